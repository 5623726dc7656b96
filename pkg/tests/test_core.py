import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmgan.core import (
    CheckpointError,
    ConfigError,
    ModalitySpec,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    load_config,
    make_rng,
    read_container,
    rng_from_state,
    rng_state,
    save_config,
    write_container,
)


def test_standard_modalities_have_fixed_channels():
    assert ModalitySpec("depth", 1).channels == 1
    with pytest.raises(ConfigError):
        ModalitySpec("rgb", 1)
    with pytest.raises(ConfigError):
        ModalitySpec("custom", 0)
    assert ModalitySpec("thermal", 2).channels == 2


def test_duplicate_modality_names_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(modalities=[ModalitySpec("depth", 1), ModalitySpec("depth", 1)])


@settings(max_examples=60, deadline=None)
@given(layers=st.integers(4, 12), k=st.integers(-2, 14))
def test_branch_index_range_validated(layers, k):
    build = lambda: TrainConfig(model=ModelConfig(num_layers=layers, branch_index=k))
    if 1 <= k <= layers:
        cfg = build()
        assert cfg.model.trunk_layers + cfg.model.branch_layers == layers
        assert cfg.model.trunk_layers == k - 1
    else:
        with pytest.raises(ConfigError):
            build()


def test_stop_threshold_and_rates_validated():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"augment": {"stop_threshold": 0.0}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"optim": {"g_lr": -1.0}})
    assert TrainConfig.from_dict({"augment": {"stop_threshold": 1.0}}).augment.stop_threshold == 1.0


def test_dotted_overrides_and_yaml_roundtrip(tmp_path):
    data = apply_overrides(TrainConfig().to_dict(), {"trainer.max-steps": "10", "model.discriminator_mode": "FD_ONLY"})
    cfg = TrainConfig.from_dict(data)
    assert cfg.trainer.max_steps == 10
    assert cfg.model.discriminator_mode.value == "FD_ONLY"
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()
    with pytest.raises(ConfigError):
        load_config(path, {"trainer.no_such_key": "1"})


def test_rng_same_seed_same_stream():
    a = torch.rand(100, generator=make_rng(0))
    b = torch.rand(100, generator=make_rng(0))
    c = torch.rand(100, generator=make_rng(1))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_rng_state_roundtrip_continues_stream():
    gen = make_rng(5)
    torch.rand(37, generator=gen)
    saved = rng_state(gen)
    uninterrupted = torch.rand(1000, generator=gen)
    resumed = torch.rand(1000, generator=rng_from_state(saved))
    assert torch.equal(uninterrupted, resumed)


def test_container_roundtrip_and_corruption(tmp_path):
    tensors = {"a": torch.arange(6.0).reshape(2, 3), "s": torch.tensor(1.5), "i": torch.arange(4)}
    path = tmp_path / "x.ckpt"
    write_container(path, tensors, {"step": 3})
    back, meta = read_container(path)
    assert meta == {"step": 3}
    assert all(torch.equal(back[k], v) for k, v in tensors.items())

    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "trunc.ckpt")
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        read_container(tmp_path / "flip.ckpt")
    with pytest.raises(CheckpointError, match="not found"):
        read_container(tmp_path / "missing.ckpt")


def test_container_version_mismatch(tmp_path, monkeypatch):
    import mmgan.core as core

    path = tmp_path / "v.ckpt"
    monkeypatch.setattr(core, "CHECKPOINT_VERSION", 99)
    write_container(path, {"a": torch.zeros(1)}, {})
    monkeypatch.undo()
    with pytest.raises(CheckpointError, match="version"):
        read_container(path)
