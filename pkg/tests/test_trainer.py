import copy
import csv
import dataclasses
import json

import pytest
import torch

from mmgan import trainer as T
from mmgan.core import AugmentationMode, CheckpointError, TrainConfig
from mmgan.data import load_external
from mmgan.generator import generate


def replace(cfg, section, **kw):
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **kw)})


def params(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_zero_learning_rate_is_a_null_update(cfg, real_batch):
    cfg = replace(cfg, "optim", g_lr=0.0, d_lr=0.0)
    state = T.create_state(cfg)
    g0, d0 = params(state.G), params(state.D)
    T.train_step(state, real_batch)
    assert same(g0, params(state.G)) and same(d0, params(state.D))
    row = state.history[-1]
    assert all(torch.isfinite(torch.tensor(row[k])) for k in ("g_loss", "d_loss"))


def test_lazy_r1_only_on_schedule(cfg, real_batch):
    state = T.create_state(cfg)
    for _ in range(9):
        T.train_step(state, real_batch)
    r1_steps = [i for i, row in enumerate(state.history) if row["r1"] is not None]
    assert r1_steps == [0, 4, 8]


@pytest.mark.parametrize("step,expect_effect", [(0, True), (1, False), (4, True)])
def test_r1_changes_gradients_iff_scheduled(cfg, real_batch, step, expect_effect):
    base = T.create_state(cfg)
    base.step = step
    off = copy.deepcopy(base)
    off.config = replace(cfg, "loss", r1_gamma=0.0)
    T.train_step(base, real_batch)
    T.train_step(off, real_batch)
    grads_on = [p.grad for p in base.D.parameters()]
    grads_off = [p.grad for p in off.D.parameters()]
    assert (not same(grads_on, grads_off)) == expect_effect


def test_checkpoint_resume_is_bit_exact(cfg, real_batch, tmp_path):
    state = T.create_state(cfg)
    T.train_step(state, real_batch)
    path = T.save_checkpoint(state, tmp_path / "a.ckpt")
    T.train_step(state, real_batch)
    resumed_a, resumed_b = T.load_checkpoint(path), T.load_checkpoint(path)
    T.train_step(resumed_a, real_batch)
    T.train_step(resumed_b, real_batch)
    assert resumed_a.history[-1] == state.history[-1] == resumed_b.history[-1]
    assert same(params(resumed_a.G), params(state.G)) and same(params(resumed_a.D), params(state.D))
    assert same(params(resumed_a.G), params(resumed_b.G))


def test_checkpoint_save_load_save_identical_bytes(cfg, real_batch, tmp_path):
    state = T.create_state(replace(cfg, "trainer", ema_kimg=1.0))
    for _ in range(2):
        T.train_step(state, real_batch)
    first = T.save_checkpoint(state, tmp_path / "1.ckpt")
    second = T.save_checkpoint(T.load_checkpoint(first), tmp_path / "2.ckpt")
    assert first.read_bytes() == second.read_bytes()


def test_initial_checkpoint_and_truncation(cfg, tmp_path):
    path = T.save_checkpoint(T.create_state(cfg), tmp_path / "s0.ckpt")
    state = T.load_checkpoint(path)
    assert state.step == 0 and state.ada.p == 0.0 and state.images_seen == 0
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "t.ckpt")


def test_train_max_steps_rows_and_csv(cfg, tiny_dataset, tmp_path):
    res = T.train(replace(cfg, "trainer", max_steps=10), tiny_dataset, tmp_path)
    assert res.stop_reason == "max_steps" and res.state.step == 10 and len(res.state.history) == 10
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert list(rows[0]) == T.metrics_columns(cfg)
    assert res.checkpoint.is_file()
    assert (tmp_path / "samples_final_rgb.png").is_file()


def test_no_augmentation_never_stops_early(cfg, tiny_dataset):
    cfg = replace(cfg, "augment", mode=AugmentationMode.NONE)
    res = T.train(replace(cfg, "trainer", max_steps=12), tiny_dataset, signal_fn=lambda x: torch.ones_like(x))
    assert res.stop_reason == "max_steps" and res.state.ada.p == 0.0


def test_forced_overfit_signal_stops_at_threshold(cfg, tiny_dataset):
    cfg = replace(cfg, "augment", ada_kimg=0.1, interval=1)
    cfg = replace(cfg, "trainer", max_steps=500)
    res = T.train(cfg, tiny_dataset, signal_fn=lambda x: torch.ones_like(x))
    assert res.stop_reason == "ada_threshold"
    assert res.state.ada.p >= 0.7
    ps = [row["p"] for row in res.state.history]
    assert all(b >= a for a, b in zip(ps, ps[1:]))


def test_eval_rows_in_history(cfg, tiny_dataset):
    cfg = replace(cfg, "trainer", max_steps=4, eval_every_images=8, eval_samples=16)
    res = T.train(cfg, tiny_dataset, evaluate=True)
    evaluated = [row for row in res.state.history if "fid_rgb" in row]
    assert [row["step"] for row in evaluated] == [2, 4]
    assert all(row["fid_depth"] >= 0 for row in evaluated)


def test_finetune_sampler_counts(tiny_dataset):
    paired, unpaired = tiny_dataset.subset(range(5)), tiny_dataset.subset(range(5, 24))
    gen = torch.Generator().manual_seed(0)
    batch, flags = T.sample_finetune_batch(paired, unpaired, 8, gen)
    assert int(flags.sum()) == 4 and len(flags) == 8 and batch["rgb"].shape[0] == 8
    _, flags = T.sample_finetune_batch(paired, None, 8, gen)
    assert bool(flags.all()) and len(flags) == 8
    _, flags = T.sample_finetune_batch(paired, unpaired, 7, gen)
    assert int(flags.sum()) == 4
    with pytest.raises(ValueError):
        T.sample_finetune_batch(tiny_dataset.subset([]), unpaired, 8, gen)
    plan = T.plan_finetune_batch(9, 3)
    assert abs(plan.paired_count - plan.unpaired_count) <= 1 and plan.paired_count + plan.unpaired_count == 9


def test_finetune_paired_fraction_over_many_batches(tiny_dataset):
    paired, unpaired = tiny_dataset.subset(range(3)), tiny_dataset.subset(range(3, 24))
    gen = torch.Generator().manual_seed(1)
    frac = sum(float(T.sample_finetune_batch(paired, unpaired, 8, gen)[1].float().mean()) for _ in range(1000)) / 1000
    assert abs(frac - 0.5) <= 1 / 8


def test_all_paired_finetune_step_equals_train_step(cfg, real_batch):
    a = T.create_state(cfg)
    b = copy.deepcopy(a)
    T.train_step(a, real_batch)
    T.finetune_step(b, real_batch, torch.ones(4, dtype=torch.bool))
    assert a.history[-1] == b.history[-1]
    assert same(params(a.G), params(b.G)) and same(params(a.D), params(b.D))


def test_finetune_step_needs_a_paired_sample(cfg, real_batch):
    with pytest.raises(ValueError):
        T.finetune_step(T.create_state(cfg), real_batch, torch.zeros(4, dtype=torch.bool))


def test_paired_only_heads_ignore_unpaired_samples(cfg, real_batch):
    flags = torch.tensor([True, True, False, False])
    zeroed = {k: v.clone() for k, v in real_batch.items()}
    for v in zeroed.values():
        v[2:] = 0
    a = T.create_state(cfg)
    b = copy.deepcopy(a)
    T.finetune_step(a, real_batch, flags)
    T.finetune_step(b, zeroed, flags)

    def head_grads(state, name):
        return [p.grad for p in state.D.heads[name].parameters()]

    for name in ("cd", "fd_depth", "fd_normal"):
        assert same(head_grads(a, name), head_grads(b, name)), name
    assert not same(head_grads(a, "fd_rgb"), head_grads(b, "fd_rgb"))


def test_every_head_gets_gradient(cfg, real_batch):
    state = T.create_state(cfg)
    T.train_step(state, real_batch)
    for name, head in state.D.heads.items():
        assert sum(float(p.grad.abs().sum()) for p in head.parameters()) > 0, name


def test_non_finite_loss_aborts_with_dump(cfg, real_batch):
    state = T.create_state(cfg)
    bad = dict(real_batch, depth=torch.full_like(real_batch["depth"], float("nan")))
    with pytest.raises(T.NumericAbort) as info:
        T.train_step(state, bad)
    assert "p" in info.value.dump and "real_logits" in info.value.dump


def test_losses_stay_finite_over_long_fuzz(cfg, tiny_dataset):
    cfg = replace(cfg, "augment", mode=AugmentationMode.FIXED_P, p=0.5)
    res = T.train(replace(cfg, "trainer", max_steps=500), tiny_dataset)
    assert len(res.state.history) == 500
    assert all(row["g_loss"] == row["g_loss"] and row["d_loss"] == row["d_loss"] for row in res.state.history)


def test_head_coverage_over_window(cfg, tiny_dataset):
    state = T.create_state(cfg)
    seen = {name: False for name in state.D.head_names}
    for _ in range(100):
        idx = torch.randint(len(tiny_dataset), (4,), generator=state.rng)
        T.train_step(state, tiny_dataset.batch(idx))
        for name, head in state.D.heads.items():
            seen[name] |= any(p.grad is not None and float(p.grad.abs().sum()) > 0 for p in head.parameters())
        if all(seen.values()):
            break
    assert all(seen.values())


def test_finetune_loop_runs_without_ada(cfg, tmp_path):
    cfg = replace(cfg, "finetune", num_samples=20, paired_pct=10, max_steps=3)
    cfg = replace(cfg, "augment", p=0.4)
    pretrained = T.create_state(cfg)
    split = T.build_finetune_split(cfg)
    assert len(split.target_paired) == 2
    res = T.finetune(pretrained, split.target_paired, split.target_unpaired, tmp_path)
    assert res.state.step == 3 and res.state.ada.p == 0.0
    assert res.checkpoint.is_file()


def test_synthesize_dataset_and_reload(cfg, tmp_path):
    state = T.create_state(cfg)
    manifest = T.synthesize_dataset(state, 100, tmp_path / "big")
    records = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(records) == 100
    for rec in records:
        for key in ("rgb", "depth", "normal"):
            assert (manifest.parent / rec[key]).is_file()
        assert (manifest.parent / rec["depth"]).with_suffix(".json").is_file()
    samples = list(load_external(manifest, cfg.model.resolution))
    assert len(samples) == 100 and all(s["paired"] for s in samples)
    gen = T.generate_tuples(state.G, 64, seed=0)  # first export batch
    for i in range(3):
        assert torch.allclose(torch.from_numpy(samples[i]["images"]["depth"]), gen["depth"][i].clamp(-1, 1), atol=1e-3)


def test_synthesized_set_size_scales_linearly(cfg, tmp_path):
    state = T.create_state(cfg)
    small = T.synthesize_dataset(state, 4, tmp_path / "s").parent
    large = T.synthesize_dataset(state, 20, tmp_path / "l").parent
    count = lambda d: sum(1 for p in d.rglob("*.png"))
    assert count(large) == 5 * count(small)


def test_interpolation_frames(cfg):
    state = T.create_state(cfg)
    frames = T.interpolation_frames(state.G, num_codes=2, fps=10)
    assert all(v.shape[0] == 10 for v in frames.values())
    z = torch.randn(2, cfg.model.latent_dim, generator=torch.Generator().manual_seed(0))
    start = generate(state.G.eval(), z[:1])
    for k in frames:
        assert torch.allclose(frames[k][0], start[k][0], atol=1e-6)
    assert T.interpolation_frames(state.G)["depth"].shape[0] == 600
    with pytest.raises(ValueError):
        T.interpolation_frames(state.G, num_codes=1)


def test_ema_generator_tracks(cfg, real_batch):
    state = T.create_state(replace(cfg, "trainer", ema_kimg=0.01))
    before = params(state.G_ema)
    T.train_step(state, real_batch)
    assert not same(before, params(state.G_ema))
    assert state.sampler is state.G_ema


def test_default_config_builds_procedural_dataset():
    cfg = replace(TrainConfig(), "data", num_samples=6)
    ds = T.build_dataset(cfg)
    assert len(ds) == 6 and ds.resolution == 32
