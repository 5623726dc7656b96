"""Adversarial training loop, cross-domain fine-tuning, checkpoints and dataset synthesis."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import augment
from .core import (
    AugmentationMode,
    CheckpointError,
    ConfigError,
    TrainConfig,
    make_rng,
    read_container,
    rng_from_state,
    rng_state,
    write_container,
)
from .data import (
    DEPTH_RANGE,
    IMAGE_EXTENT,
    DomainSplit,
    TupleDataset,
    export_sample,
    generate_dataset,
    load_dataset,
    split_domains,
    write_manifest,
)
from .discriminator import CONSISTENCY, MultiDiscriminator, head_names_for
from .generator import Generator, interpolate_w, map_latent, synthesize
from .loss import blur_sigma, blur_tuple, lazy_r1_active
from .metrics import MetricReport, evaluate_tuples, frechet_distance, load_extractor, stats_from_features

log = logging.getLogger(__name__)

SignalFn = Callable[[torch.Tensor], torch.Tensor]


class NumericAbort(FloatingPointError):
    """Raised on a non-finite loss; ``dump`` carries the offending logits and p."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainState:
    config: TrainConfig
    G: Generator
    D: MultiDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    ada: augment.AdaController
    rng: torch.Generator
    step: int = 0
    images_seen: int = 0
    history: list[dict] = field(default_factory=list)
    G_ema: Generator | None = None
    stop_reason: str = ""

    @property
    def sampler(self) -> Generator:
        return self.G_ema if self.G_ema is not None else self.G


def _optimizers(cfg: TrainConfig, G, D):
    o = cfg.optim
    opt_g = torch.optim.Adam(G.parameters(), lr=o.g_lr, betas=tuple(o.betas), eps=o.eps)
    opt_d = torch.optim.Adam(D.parameters(), lr=o.d_lr, betas=tuple(o.betas), eps=o.eps)
    return opt_g, opt_d


def _initial_p(cfg: TrainConfig) -> float:
    mode = AugmentationMode(cfg.augment.mode)
    return 0.0 if mode == AugmentationMode.NONE else float(cfg.augment.p)


def create_state(cfg: TrainConfig) -> TrainState:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.trainer.seed)
        G = Generator(cfg)
        D = MultiDiscriminator(cfg)
    opt_g, opt_d = _optimizers(cfg, G, D)
    ada = augment.AdaController.from_config(cfg.augment, cfg.trainer.batch_size)
    ada.p = _initial_p(cfg)
    G_ema = copy.deepcopy(G).eval().requires_grad_(False) if cfg.trainer.ema_kimg > 0 else None
    return TrainState(cfg, G, D, opt_g, opt_d, ada, make_rng(cfg.trainer.seed + 1), G_ema=G_ema)


# -- one optimization step -----------------------------------------------------------


def _head_rows(state: TrainState, paired: torch.Tensor) -> dict[str, torch.Tensor]:
    """Real-side rows per head: color-augmentable fidelity heads see every sample, the rest paired only."""
    all_rows = torch.arange(len(paired))
    paired_rows = torch.nonzero(paired, as_tuple=False)[:, 0]
    rows = {}
    for name in state.D.head_names:
        if name == CONSISTENCY:
            rows[name] = paired_rows
        else:
            spec = state.config.modality(name[len("fd_"):])
            rows[name] = all_rows if spec.color_augmentable else paired_rows
    return rows


def _color_modalities(cfg: TrainConfig) -> tuple[str, ...]:
    return tuple(m.name for m in cfg.modalities if m.color_augmentable)


def _augment(state: TrainState, tup: dict[str, torch.Tensor], p: float) -> dict[str, torch.Tensor]:
    plans = augment.sample_plans(p, next(iter(tup.values())).shape[0], state.rng)
    if all(plan.is_identity() for plan in plans):
        return tup
    return augment.apply_batch(plans, tup, _color_modalities(state.config))


def _abort(state: TrainState, what: str, **logits) -> None:
    dump = {k: v.detach().clone() for k, v in logits.items()}
    dump["p"] = state.ada.p
    dump["step"] = state.step
    raise NumericAbort(f"non-finite {what} at step {state.step} (p={state.ada.p:.4f})", dump)


def _step(
    state: TrainState,
    real: dict[str, torch.Tensor],
    paired: torch.Tensor,
    signal_fn: SignalFn | None = None,
    adapt: bool = True,
) -> dict:
    cfg = state.config
    G, D = state.G, state.D
    names = cfg.modality_names
    real = {n: real[n] for n in names}
    batch = paired.shape[0]
    if not bool(paired.any()):
        raise ValueError("batch has no paired sample; the consistency head has nothing to learn from")
    heads = D.head_names
    rows = _head_rows(state, paired)
    sigma = blur_sigma(state.images_seen, cfg.loss)
    p = state.ada.p

    # discriminator update
    D.requires_grad_(True)
    G.eval()
    z = torch.randn(batch, cfg.model.latent_dim, generator=state.rng)
    with torch.no_grad():
        fake = G(z)
    r1_on = cfg.loss.r1_gamma > 0 and lazy_r1_active(state.step, cfg.loss.r1_interval)
    real_src = {n: v.detach().requires_grad_(r1_on) for n, v in blur_tuple(real, sigma).items()}
    real_logits = D.score_all(_augment(state, real_src, p))
    fake_logits = D.score_all(_augment(state, blur_tuple(fake, sigma), p))
    per_head = {}
    for k, name in enumerate(heads):
        r = real_logits[rows[name], k]
        per_head[name] = F.softplus(-r).mean() + F.softplus(fake_logits[:, k]).mean()
    d_total = sum(per_head.values())
    if not torch.isfinite(d_total):
        _abort(state, "discriminator loss", real_logits=real_logits, fake_logits=fake_logits)
    r1_value = torch.zeros([])
    if r1_on:
        inputs = [real_src[n] for n in names]
        for k, name in enumerate(heads):
            idx = rows[name]
            grads = torch.autograd.grad(real_logits[idx, k].sum(), inputs, create_graph=True, allow_unused=True)
            sq = sum(g[idx].square().flatten(1).sum(1) for g in grads if g is not None)
            r1_value = r1_value + sq.mean()
        r1_value = r1_value * (cfg.loss.r1_gamma / 2)
    d_objective = d_total + r1_value * cfg.loss.r1_interval
    state.opt_d.zero_grad(set_to_none=True)
    d_objective.backward()
    state.opt_d.step()

    if adapt and AugmentationMode(cfg.augment.mode) == AugmentationMode.ADAPTIVE:
        valid = torch.cat([real_logits[rows[n], k].detach() for k, n in enumerate(heads)])
        state.ada.update(signal_fn(valid) if signal_fn is not None else valid)

    # generator update
    D.requires_grad_(False)
    G.train()
    z = torch.randn(batch, cfg.model.latent_dim, generator=state.rng)
    gen_logits = D.score_all(_augment(state, blur_tuple(G(z), sigma), p))
    g_total = F.softplus(-gen_logits).mean(dim=0).sum()
    if not torch.isfinite(g_total):
        _abort(state, "generator loss", gen_logits=gen_logits)
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    state.opt_g.step()
    D.requires_grad_(True)

    if state.G_ema is not None:
        beta = 0.5 ** (batch / (cfg.trainer.ema_kimg * 1000))
        with torch.no_grad():
            for pe, pg in zip(state.G_ema.parameters(), state.G.parameters()):
                pe.lerp_(pg, 1 - beta)
            for be, bg in zip(state.G_ema.buffers(), state.G.buffers()):
                be.copy_(bg)

    state.step += 1
    state.images_seen += batch
    row = {
        "step": state.step,
        "images_seen": state.images_seen,
        "g_loss": float(g_total.detach()),
        "d_loss": float(d_total.detach()),
        "r1": float(r1_value.detach()) if r1_on else None,
        **{f"d_{n}": float(v.detach()) for n, v in per_head.items()},
        "p": state.ada.p,
        "blur_sigma": sigma,
    }
    state.history.append(row)
    return row


def train_step(state: TrainState, real_batch: dict[str, torch.Tensor], signal_fn: SignalFn | None = None) -> TrainState:
    """One D update then one G update on a batch of complete tuples."""
    batch = next(iter(real_batch.values())).shape[0]
    _step(state, real_batch, torch.ones(batch, dtype=torch.bool), signal_fn)
    return state


def finetune_step(
    state: TrainState,
    batch: dict[str, torch.Tensor],
    flags: torch.Tensor,
    signal_fn: SignalFn | None = None,
) -> TrainState:
    """Like :func:`train_step`, but heads needing non-color modalities see only flagged (paired) reals."""
    flags = torch.as_tensor(flags, dtype=torch.bool)
    _step(state, batch, flags, signal_fn, adapt=state.config.finetune.ada)
    return state


# -- fine-tuning sampler ----------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneBatchPlan:
    paired_count: int
    unpaired_count: int


def plan_finetune_batch(batch_size: int, unpaired_available: int) -> FinetuneBatchPlan:
    if unpaired_available == 0:
        return FinetuneBatchPlan(batch_size, 0)
    return FinetuneBatchPlan(math.ceil(batch_size / 2), batch_size // 2)


def sample_finetune_batch(
    paired_pool: TupleDataset,
    unpaired_pool: TupleDataset | None,
    batch_size: int,
    rng: torch.Generator,
) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Half paired, half unpaired samples; returns the batch and its paired flags."""
    if len(paired_pool) == 0:
        raise ValueError("paired pool is empty; the consistency head cannot be trained")
    n_unpaired = len(unpaired_pool) if unpaired_pool is not None else 0
    plan = plan_finetune_batch(batch_size, n_unpaired)
    pi = torch.randint(len(paired_pool), (plan.paired_count,), generator=rng)
    parts = [paired_pool.batch(pi)]
    if plan.unpaired_count:
        ui = torch.randint(n_unpaired, (plan.unpaired_count,), generator=rng)
        parts.append(unpaired_pool.batch(ui))
    batch = {k: torch.cat([p[k] for p in parts]) for k in parts[0]}
    flags = torch.cat([torch.ones(plan.paired_count, dtype=torch.bool), torch.zeros(plan.unpaired_count, dtype=torch.bool)])
    return batch, flags


# -- checkpoints ---------------------------------------------------------------------------


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict) -> list:
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for key, value in st.items():
            tensors[f"{prefix}.{pid}.{key}"] = torch.as_tensor(value)
    return sd["param_groups"]


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, groups: list) -> None:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if name.startswith(prefix + "."):
            _, pid, key = name.split(".", 2)
            state.setdefault(int(pid), {})[key] = value.clone()
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    tensors = {f"G.{k}": v for k, v in state.G.state_dict().items()}
    tensors.update({f"D.{k}": v for k, v in state.D.state_dict().items()})
    if state.G_ema is not None:
        tensors.update({f"G_ema.{k}": v for k, v in state.G_ema.state_dict().items()})
    groups_g = _flatten_optimizer("opt_g", state.opt_g, tensors)
    groups_d = _flatten_optimizer("opt_d", state.opt_d, tensors)
    tensors["rng"] = rng_state(state.rng)
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "images_seen": state.images_seen,
        "ada": state.ada.state_dict(),
        "history": state.history,
        "opt_g_groups": groups_g,
        "opt_d_groups": groups_d,
        "stop_reason": state.stop_reason,
    }
    write_container(path, tensors, meta)
    return Path(path)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, meta = read_container(path)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        state = create_state(cfg)
        if any(k.startswith("G_ema.") for k in tensors) and state.G_ema is None:
            state.G_ema = copy.deepcopy(state.G).eval().requires_grad_(False)

        def sub(prefix):
            return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

        state.G.load_state_dict(sub("G"))
        state.D.load_state_dict(sub("D"))
        if state.G_ema is not None:
            state.G_ema.load_state_dict(sub("G_ema"))
        _restore_optimizer("opt_g", state.opt_g, tensors, meta["opt_g_groups"])
        _restore_optimizer("opt_d", state.opt_d, tensors, meta["opt_d_groups"])
        state.rng = rng_from_state(tensors["rng"])
        state.ada = augment.AdaController.from_state(meta["ada"])
        state.step = int(meta["step"])
        state.images_seen = int(meta["images_seen"])
        state.history = [dict(r) for r in meta["history"]]
        state.stop_reason = meta.get("stop_reason", "")
    except (KeyError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from None
    return state


# -- sampling helpers ------------------------------------------------------------------------


def depth_range_of(cfg: TrainConfig) -> tuple[float, float] | None:
    if cfg.data.depth_norm == "fixed":
        return tuple(cfg.data.depth_range) if cfg.data.depth_range else DEPTH_RANGE
    return None


def pixel_size_of(cfg: TrainConfig) -> float:
    return IMAGE_EXTENT / cfg.model.resolution


def build_dataset(cfg: TrainConfig, classes=None, num_samples: int | None = None, seed: int | None = None) -> TupleDataset:
    """Training tuples from the configured source (procedural renderer or a manifest)."""
    d = cfg.data
    if d.depth_norm not in ("fixed", "per_image"):
        raise ConfigError(f"data.depth_norm must be 'fixed' or 'per_image', got {d.depth_norm!r}")
    if d.source == "manifest":
        if not d.manifest:
            raise ConfigError("data.source=manifest needs data.manifest")
        rng = depth_range_of(cfg) if d.depth_range or d.depth_norm == "per_image" else "auto"
        return load_dataset(d.manifest, cfg.model.resolution, cfg.modality_names,
                            {m.name: m.channels for m in cfg.modalities}, rng)
    if d.source != "procedural":
        raise ConfigError(f"data.source must be 'procedural' or 'manifest', got {d.source!r}")
    if cfg.modality_names != ["rgb", "depth", "normal"]:
        raise ConfigError("the procedural renderer provides exactly the rgb, depth and normal modalities")
    return generate_dataset(
        num_samples if num_samples is not None else d.num_samples,
        list(classes) if classes is not None else list(d.classes),
        d.seed if seed is None else seed,
        cfg.model.resolution,
        depth_range=depth_range_of(cfg),
    )


def build_finetune_split(cfg: TrainConfig) -> DomainSplit:
    """Held-out-class tuples split into a paired fraction and an RGB-only remainder."""
    f = cfg.finetune
    target = build_dataset(cfg, classes=[f.holdout_class], num_samples=f.num_samples, seed=cfg.data.seed + 1)
    return split_domains(target, f.holdout_class, f.paired_pct, seed=cfg.data.seed,
                         color_modalities=[m.name for m in cfg.modalities if m.color_augmentable])


@torch.no_grad()
def generate_tuples(G: Generator, n: int, seed: int = 0, batch: int = 128) -> dict[str, torch.Tensor]:
    was_training = G.training
    G.eval()
    gen = make_rng(seed)
    z = torch.randn(n, G.latent_dim, generator=gen)
    parts = [G(z[i: i + batch]) for i in range(0, n, batch)]
    G.train(was_training)
    return {k: torch.cat([p[k] for p in parts]) for k in parts[0]}


class Evaluator:
    """Caches real-feature statistics and scores a generator with a fixed latent set."""

    def __init__(self, cfg: TrainConfig, real: TupleDataset, num_samples: int | None = None, seed: int = 12345):
        self.cfg = cfg
        self.extractor = load_extractor(cfg.metrics.extractor)
        self.num_samples = num_samples or cfg.trainer.eval_samples
        self.seed = seed
        gen = make_rng(seed)
        idx = torch.randperm(len(real), generator=gen)[: min(len(real), cfg.metrics.fid_samples)]
        self.real_stats = {n: stats_from_features(self.extractor(real.images[n][idx])) for n in cfg.modality_names}

    def evaluate(self, G: Generator, oracle=None) -> MetricReport:
        gen = generate_tuples(G, self.num_samples, self.seed)
        report = evaluate_tuples({}, gen, self.extractor, depth_range_of(self.cfg) or (1.0, 2.0),
                                 pixel_size_of(self.cfg), oracle)
        for n, stats in self.real_stats.items():
            report.fid[n] = frechet_distance(stats, stats_from_features(self.extractor(gen[n])))
        return report


# -- artifacts ----------------------------------------------------------------------------------


def to_uint8(name: str, x: torch.Tensor) -> np.ndarray:
    """[C, H, W] in [-1, 1] -> HxW or HxWx3 uint8 for viewing."""
    img = ((x.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()
    return img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)


def save_grid(images: torch.Tensor, path: Path, name: str = "", cols: int = 4) -> Path:
    n, c, h, w = images.shape
    rows = math.ceil(n / cols)
    canvas = torch.full((c, rows * h, cols * w), -1.0)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[:, r * h: (r + 1) * h, q * w: (q + 1) * w] = images[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(name, canvas)).save(path)
    return path


def save_sample_grids(G: Generator, out_dir: Path, tag: str, n: int = 16, seed: int = 7) -> list[Path]:
    gen = generate_tuples(G, n, seed)
    return [save_grid(v, Path(out_dir) / f"samples_{tag}_{k}.png", k) for k, v in gen.items()]


def metrics_columns(cfg: TrainConfig) -> list[str]:
    """Fixed metrics.csv column order."""
    cols = ["step", "images_seen", "g_loss", "d_loss", "r1"]
    cols += [f"d_{n}" for n in head_names_for(cfg)]
    cols += ["p", "blur_sigma"]
    cols += [f"fid_{n}" for n in cfg.modality_names]
    cols += ["sie", "normal_mean_deg", "normal_median_deg", "within_11.25", "within_22.5", "within_30",
             "self_consistency_deg"]
    return cols


def write_metrics_csv(state: TrainState, path: Path) -> Path:
    cols = metrics_columns(state.config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in state.history:
            writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in cols})
    return path


# -- loops ----------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    stop_reason: str
    checkpoint: Path | None
    reports: list[tuple[int, MetricReport]] = field(default_factory=list)


def _stop_reason(state: TrainState, max_steps: int, max_images: int, adaptive: bool) -> str:
    if adaptive and state.ada.should_stop():
        return "ada_threshold"
    if max_steps and state.step >= max_steps:
        return "max_steps"
    if max_images and state.images_seen >= max_images:
        return "max_images"
    return ""


def _run_loop(
    state: TrainState,
    next_batch: Callable[[], tuple[dict, torch.Tensor]],
    step_fn: Callable,
    max_steps: int,
    max_images: int,
    adaptive: bool,
    out_dir: Path | None,
    evaluator: Evaluator | None,
    signal_fn: SignalFn | None,
    tag: str,
) -> TrainResult:
    cfg = state.config
    if not max_steps and not max_images and not adaptive:
        raise ConfigError("training needs max_steps, max_images or adaptive augmentation to terminate")
    reports = []
    start_steps, start_images = state.step, state.images_seen
    eval_every, ckpt_every = cfg.trainer.eval_every_images, cfg.trainer.checkpoint_every_images

    def evaluate():
        report = evaluator.evaluate(state.sampler)
        reports.append((state.step, report))
        if state.history:
            state.history[-1].update(report.row())
        return report

    reason = ""
    while True:
        reason = _stop_reason(state, max_steps and start_steps + max_steps, max_images and start_images + max_images,
                              adaptive)
        if reason:
            break
        batch, flags = next_batch()
        prev = state.images_seen
        step_fn(state, batch, flags, signal_fn)
        if evaluator is not None and eval_every and prev // eval_every != state.images_seen // eval_every:
            evaluate()
        if out_dir is not None and ckpt_every and prev // ckpt_every != state.images_seen // ckpt_every:
            save_checkpoint(state, out_dir / f"{tag}-{state.images_seen:08d}.ckpt")
            save_sample_grids(state.sampler, out_dir, f"{state.images_seen:08d}")
            write_metrics_csv(state, out_dir / "metrics.csv")
    state.stop_reason = reason
    if evaluator is not None and (not reports or reports[-1][0] != state.step):
        evaluate()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(state, out_dir / f"{tag}-final.ckpt")
        save_sample_grids(state.sampler, out_dir, "final")
        write_metrics_csv(state, out_dir / "metrics.csv")
    log.info("%s stopped after %d steps (%s)", tag, state.step, reason)
    return TrainResult(state, reason, ckpt, reports)


def train(
    config: TrainConfig,
    dataset: TupleDataset,
    out_dir: str | Path | None = None,
    signal_fn: SignalFn | None = None,
    state: TrainState | None = None,
    evaluate: bool = False,
) -> TrainResult:
    """Train until max_steps / max_images, or until adaptive p reaches the stop threshold."""
    state = state or create_state(config)
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    batch_size = cfg.trainer.batch_size
    complete = torch.nonzero(dataset.paired, as_tuple=False)[:, 0]
    if len(complete) == 0:
        raise ValueError("dataset has no complete tuples")

    def next_batch():
        idx = complete[torch.randint(len(complete), (batch_size,), generator=state.rng)]
        return dataset.batch(idx), torch.ones(batch_size, dtype=torch.bool)

    def step_fn(st, batch, flags, sig):
        _step(st, batch, flags, sig)

    evaluator = Evaluator(cfg, dataset.subset(complete)) if evaluate else None
    adaptive = AugmentationMode(cfg.augment.mode) == AugmentationMode.ADAPTIVE
    return _run_loop(state, next_batch, step_fn, cfg.trainer.max_steps, cfg.trainer.max_images, adaptive, out,
                     evaluator, signal_fn, "train")


def start_finetune(pretrained: TrainState, cfg: TrainConfig | None = None) -> TrainState:
    """Copy pretrained networks into a fresh state with new optimizers and counters."""
    cfg = cfg or pretrained.config
    state = create_state(cfg)
    state.G.load_state_dict(pretrained.G.state_dict())
    state.D.load_state_dict(pretrained.D.state_dict())
    if state.G_ema is not None:
        state.G_ema.load_state_dict((pretrained.G_ema or pretrained.G).state_dict())
    if not cfg.finetune.ada:
        state.ada.p = 0.0
    return state


def finetune(
    pretrained: TrainState | str | Path,
    paired: TupleDataset,
    unpaired: TupleDataset | None,
    out_dir: str | Path | None = None,
    cfg: TrainConfig | None = None,
    evaluate_on: TupleDataset | None = None,
) -> TrainResult:
    """Continue training on a target domain with balanced paired/unpaired batches."""
    if not isinstance(pretrained, TrainState):
        pretrained = load_checkpoint(pretrained)
    state = start_finetune(pretrained, cfg)
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    if unpaired is not None and len(unpaired) == 0:
        unpaired = None

    def next_batch():
        return sample_finetune_batch(paired, unpaired, cfg.trainer.batch_size, state.rng)

    evaluator = Evaluator(cfg, evaluate_on) if evaluate_on is not None else None
    adaptive = cfg.finetune.ada and AugmentationMode(cfg.augment.mode) == AugmentationMode.ADAPTIVE
    return _run_loop(state, next_batch, finetune_step, cfg.finetune.max_steps, cfg.finetune.max_images, adaptive,
                     out, evaluator, None, "finetune")


# -- export and interpolation ---------------------------------------------------------------------


def _sampler_from(source) -> tuple[Generator, TrainConfig]:
    if isinstance(source, TrainState):
        return source.sampler, source.config
    state = load_checkpoint(source)
    return state.sampler, state.config


def synthesize_dataset(checkpoint, n: int, out_dir: str | Path, seed: int = 0, with_normals: bool = True) -> Path:
    """Write n generated tuples in the export format and return the manifest path."""
    G, cfg = _sampler_from(checkpoint)
    out = Path(out_dir)
    depth_range = depth_range_of(cfg)
    records = []
    batch = 64
    for start in range(0, n, batch):
        count = min(batch, n - start)
        gen = generate_tuples(G, count, seed=seed * 1_000_003 + start)
        for i in range(count):
            tup = {k: v[i].clamp(-1, 1).double().numpy() for k, v in gen.items() if with_normals or k != "normal"}
            records.append(export_sample(out, f"{start + i:06d}", "generated", tup, depth_range))
    meta = {"depth_range": list(depth_range) if depth_range else None, "pixel_size": pixel_size_of(cfg),
            "source": "generated", "count": n}
    return write_manifest(out / "manifest.jsonl", records, meta)


@torch.no_grad()
def interpolation_frames(source, num_codes: int = 11, fps: int = 60, seed: int = 0) -> dict[str, torch.Tensor]:
    """(num_codes - 1) * fps frames from linear interpolation between successive mapped codes."""
    if num_codes < 2:
        raise ValueError("num_codes must be at least 2")
    if fps < 1:
        raise ValueError("fps must be positive")
    G, _ = _sampler_from(source) if not isinstance(source, Generator) else (source, None)
    was_training = G.training
    G.eval()
    z = torch.randn(num_codes, G.latent_dim, generator=make_rng(seed))
    ws = map_latent(G, z)
    frames = [interpolate_w(ws[i], ws[i + 1], j / fps) for i in range(num_codes - 1) for j in range(fps)]
    w = torch.stack(frames)
    parts = [synthesize(G, w[i: i + 128]) for i in range(0, len(w), 128)]
    G.train(was_training)
    return {k: torch.cat([p[k] for p in parts]) for k in parts[0]}


def write_frames(frames: dict[str, torch.Tensor], out_dir: str | Path) -> dict[str, Path]:
    out = {}
    for name, seq in frames.items():
        d = Path(out_dir) / name
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(seq):
            Image.fromarray(to_uint8(name, img)).save(d / f"frame_{i:05d}.png")
        out[name] = d
    return out


def smoothness_ratio(depth_frames: torch.Tensor, pairs: int = 2000, seed: int = 0) -> float:
    """Mean |depth change| between consecutive frames over that between random frame pairs."""
    d = depth_frames.double()
    adjacent = (d[1:] - d[:-1]).abs().mean()
    gen = make_rng(seed)
    a = torch.randint(len(d), (pairs,), generator=gen)
    b = torch.randint(len(d), (pairs,), generator=gen)
    keep = a != b
    random_pairs = (d[a[keep]] - d[b[keep]]).abs().mean()
    return float(adjacent / random_pairs)
