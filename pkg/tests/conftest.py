import pytest
import torch

from mmgan.core import LossConfig, ModelConfig, TrainConfig, TrainerConfig
from mmgan.data import generate_dataset

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains the default configuration end to end")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


def tiny_config(**model_kw) -> TrainConfig:
    """16x16, 8-channel networks: fast enough for per-test training steps."""
    model = dict(
        resolution=16, latent_dim=8, w_dim=8, num_layers=6, branch_index=4, fourier_channels=8,
        g_channel_base=128, g_channel_max=8, d_channel_base=64, d_channel_max=8,
    )
    model.update(model_kw)
    return TrainConfig(
        model=ModelConfig(**model),
        loss=LossConfig(r1_interval=4, blur_ramp_images=1000),
        trainer=TrainerConfig(batch_size=4, max_steps=4, max_images=0, eval_every_images=0,
                              checkpoint_every_images=0),
    )


@pytest.fixture
def cfg() -> TrainConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(24, seed=0, resolution=16)


@pytest.fixture
def real_batch(tiny_dataset):
    return tiny_dataset.batch(torch.arange(4))
