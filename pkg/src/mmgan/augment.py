"""Tuple-consistent discriminator augmentation and the adaptive-p controller.

One :class:`AugmentPlan` is sampled per tuple.  Geometric and corruption ops
use identical parameters for every modality; color ops touch only the
modalities flagged ``color_augmentable``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F

from .loss import gaussian_blur

GEOMETRIC_OPS = ("xflip", "rot90", "int_translate", "iso_scale", "rotate", "aniso_scale", "frac_translate")
COLOR_OPS = ("brightness", "contrast", "luma_flip", "hue", "saturation")
CORRUPTION_OPS = ("filter_gain", "noise", "cutout")
ALL_OPS = GEOMETRIC_OPS + COLOR_OPS + CORRUPTION_OPS

# Parameter spreads of the standard adaptive-augmentation pipeline.
INT_TRANSLATE_MAX = 0.125
SCALE_STD = 0.2
ANISO_STD = 0.2
FRAC_TRANSLATE_STD = 0.125
BRIGHTNESS_STD = 0.2
CONTRAST_STD = 0.5
SATURATION_STD = 1.0
FILTER_STD = 1.0
NOISE_STD = 0.1
CUTOUT_SIZE = 0.5

_LUMA = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64) / math.sqrt(3.0)


@dataclass(frozen=True)
class AugmentPlan:
    """Sampled transform parameters; ``None`` means the op is skipped."""

    xflip: int | None = None
    rot90: int | None = None
    int_translate: tuple[float, float] | None = None
    iso_scale: float | None = None
    rotate: float | None = None
    aniso_scale: float | None = None
    frac_translate: tuple[float, float] | None = None
    brightness: float | None = None
    contrast: float | None = None
    luma_flip: int | None = None
    hue: float | None = None
    saturation: float | None = None
    filter_gain: float | None = None
    noise: tuple[float, int] | None = None
    cutout: tuple[float, float] | None = None

    def present(self) -> dict[str, bool]:
        return {name: getattr(self, name) is not None for name in ALL_OPS}

    def is_identity(self) -> bool:
        return not any(self.present().values())

    def without_color(self) -> "AugmentPlan":
        return dataclasses.replace(self, **{name: None for name in COLOR_OPS})

    def only(self, names: Iterable[str]) -> "AugmentPlan":
        keep = set(names)
        return dataclasses.replace(self, **{n: None for n in ALL_OPS if n not in keep})


def sample_plan(p: float, rng: torch.Generator) -> AugmentPlan:
    """Include each op independently with probability p.

    RNG consumption does not depend on p, so runs that differ only in p stay
    seed-aligned.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    gate = torch.rand(len(ALL_OPS), generator=rng, dtype=torch.float64).tolist()
    u = torch.rand(10, generator=rng, dtype=torch.float64).tolist()
    g = torch.randn(9, generator=rng, dtype=torch.float64).tolist()
    values = {
        "xflip": int(u[0] < 0.5),
        "rot90": min(int(u[1] * 4), 3),
        "int_translate": ((u[2] * 2 - 1) * INT_TRANSLATE_MAX, (u[3] * 2 - 1) * INT_TRANSLATE_MAX),
        "iso_scale": 2 ** (g[0] * SCALE_STD),
        "rotate": (u[4] * 2 - 1) * math.pi,
        "aniso_scale": 2 ** (g[1] * ANISO_STD),
        "frac_translate": (g[2] * FRAC_TRANSLATE_STD, g[3] * FRAC_TRANSLATE_STD),
        "brightness": g[4] * BRIGHTNESS_STD,
        "contrast": 2 ** (g[5] * CONTRAST_STD),
        "luma_flip": int(u[5] < 0.5),
        "hue": (u[6] * 2 - 1) * math.pi,
        "saturation": 2 ** (g[6] * SATURATION_STD),
        "filter_gain": 2 ** (g[7] * FILTER_STD),
        "noise": (abs(g[8]) * NOISE_STD, int(u[7] * 2**31)),
        "cutout": (u[8], u[9]),
    }
    return AugmentPlan(**{name: values[name] for name, gv in zip(ALL_OPS, gate) if gv < p})


def _shift(x: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    """Integer translation with zero fill; x is [C, H, W]."""
    h, w = x.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return torch.zeros_like(x)
    x = F.pad(x, [max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0)])
    return x[..., max(-dy, 0): max(-dy, 0) + h, max(-dx, 0): max(-dx, 0) + w]


def _inverse_affine(plan: AugmentPlan) -> torch.Tensor | None:
    """Output->input sampling matrix (normalized coords) for the general geometric ops."""
    mats = []
    if plan.iso_scale is not None:
        s = plan.iso_scale
        mats.append(torch.tensor([[1 / s, 0, 0], [0, 1 / s, 0], [0, 0, 1]], dtype=torch.float64))
    if plan.rotate is not None:
        c, s = math.cos(-plan.rotate), math.sin(-plan.rotate)
        mats.append(torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=torch.float64))
    if plan.aniso_scale is not None:
        s = plan.aniso_scale
        mats.append(torch.tensor([[1 / s, 0, 0], [0, s, 0], [0, 0, 1]], dtype=torch.float64))
    if plan.frac_translate is not None:
        tx, ty = plan.frac_translate
        mats.append(torch.tensor([[1, 0, -2 * tx], [0, 1, -2 * ty], [0, 0, 1]], dtype=torch.float64))
    if not mats:
        return None
    # ops are applied in listed order, so the inverse composes in reverse
    inv = torch.eye(3, dtype=torch.float64)
    for m in mats:
        inv = inv @ m
    return inv


def _color_matrix(plan: AugmentPlan) -> torch.Tensor | None:
    eye = torch.eye(4, dtype=torch.float64)
    v = torch.cat([_LUMA, torch.zeros(1, dtype=torch.float64)])
    vv = torch.outer(v, v)
    c = eye.clone()
    used = False
    if plan.brightness is not None:
        t = eye.clone()
        t[:3, 3] = plan.brightness
        c, used = t @ c, True
    if plan.contrast is not None:
        c, used = torch.diag(torch.tensor([plan.contrast] * 3 + [1.0], dtype=torch.float64)) @ c, True
    if plan.luma_flip is not None:
        c, used = (eye - 2 * vv * plan.luma_flip) @ c, True
    if plan.hue is not None:
        th = plan.hue
        a = _LUMA
        cross = torch.tensor([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=torch.float64)
        r = eye.clone()
        r[:3, :3] = math.cos(th) * torch.eye(3, dtype=torch.float64) + math.sin(th) * cross
        r[:3, :3] += (1 - math.cos(th)) * torch.outer(a, a)
        c, used = r @ c, True
    if plan.saturation is not None:
        s = vv + (eye - vv) * plan.saturation
        s[3, 3] = 1.0
        c, used = s @ c, True
    return c if used else None


def _apply_shared(x: torch.Tensor, plan: AugmentPlan) -> torch.Tensor:
    """Geometric ops on a [C, H, W] stack of every modality's channels."""
    if plan.xflip:
        x = x.flip(-1)
    if plan.rot90:
        x = torch.rot90(x, plan.rot90, dims=(-2, -1))
    if plan.int_translate is not None:
        h, w = x.shape[-2:]
        x = _shift(x, round(plan.int_translate[0] * w), round(plan.int_translate[1] * h))
    inv = _inverse_affine(plan)
    if inv is not None:
        theta = inv[:2].to(x.dtype)[None]
        grid = F.affine_grid(theta, [1, *x.shape], align_corners=False)
        x = F.grid_sample(x[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    return x


def _apply_corruption(x: torch.Tensor, plan: AugmentPlan) -> torch.Tensor:
    if plan.filter_gain is not None:
        low = gaussian_blur(x[None], 1.0)[0]
        x = low + plan.filter_gain * (x - low)
    if plan.noise is not None:
        std, seed = plan.noise
        gen = torch.Generator().manual_seed(seed)
        field = torch.randn(x.shape[-2:], generator=gen, dtype=torch.float64).to(x.dtype)
        x = x + std * field
    if plan.cutout is not None:
        h, w = x.shape[-2:]
        cy = (torch.arange(h, dtype=torch.float64) + 0.5) / h
        cx = (torch.arange(w, dtype=torch.float64) + 0.5) / w
        inside_y = (cy - plan.cutout[1]).abs() < CUTOUT_SIZE / 2
        inside_x = (cx - plan.cutout[0]).abs() < CUTOUT_SIZE / 2
        keep = ~(inside_y[:, None] & inside_x[None, :])
        x = x * keep.to(x.dtype)
    return x


def apply(
    plan: AugmentPlan,
    tup: dict[str, torch.Tensor],
    color_modalities: Iterable[str] = ("rgb",),
) -> dict[str, torch.Tensor]:
    """Apply one plan to a single tuple of [C, H, W] images."""
    if plan.is_identity():
        return dict(tup)
    names = list(tup)
    sizes = [tup[n].shape[0] for n in names]
    x = _apply_shared(torch.cat([tup[n] for n in names], dim=0), plan)
    parts = dict(zip(names, torch.split(x, sizes, dim=0)))
    cmat = _color_matrix(plan)
    if cmat is not None:
        for n in color_modalities:
            if n in parts:
                img = parts[n]
                if img.shape[0] != 3:
                    raise ValueError(f"color ops need 3 channels, {n!r} has {img.shape[0]}")
                m = cmat.to(img.dtype)
                parts[n] = torch.einsum("ij,jhw->ihw", m[:3, :3], img) + m[:3, 3, None, None]
    x = _apply_corruption(torch.cat([parts[n] for n in names], dim=0), plan)
    return dict(zip(names, torch.split(x, sizes, dim=0)))


def apply_batch(
    plans: list[AugmentPlan],
    batch: dict[str, torch.Tensor],
    color_modalities: Iterable[str] = ("rgb",),
) -> dict[str, torch.Tensor]:
    names = list(batch)
    color_modalities = tuple(color_modalities)
    out = [apply(plan, {n: batch[n][i] for n in names}, color_modalities) for i, plan in enumerate(plans)]
    return {n: torch.stack([o[n] for o in out]) for n in names}


def sample_plans(p: float, n: int, rng: torch.Generator) -> list[AugmentPlan]:
    return [sample_plan(p, rng) for _ in range(n)]


@dataclass
class AdaController:
    """Adjusts p from the mean sign of real logits, accumulated over ``interval`` updates."""

    p: float = 0.0
    target: float = 0.6
    adjust_step: float = 0.0
    interval: int = 4
    stop_threshold: float = 0.7
    overfit_estimate: float = 0.0
    sign_sum: float = 0.0
    sign_count: int = 0
    pending: int = 0

    @classmethod
    def from_config(cls, aug_cfg, batch_size: int) -> "AdaController":
        step = batch_size * aug_cfg.interval / (aug_cfg.ada_kimg * 1000)
        return cls(p=aug_cfg.p, target=aug_cfg.target, adjust_step=step, interval=aug_cfg.interval,
                   stop_threshold=aug_cfg.stop_threshold)

    def update(self, real_logits: torch.Tensor) -> "AdaController":
        signs = torch.sign(real_logits.detach().double())
        self.sign_sum += float(signs.sum())
        self.sign_count += signs.numel()
        self.pending += 1
        if self.pending >= self.interval:
            self.overfit_estimate = self.sign_sum / max(self.sign_count, 1)
            diff = self.overfit_estimate - self.target
            direction = (diff > 0) - (diff < 0)
            self.p = min(max(self.p + direction * self.adjust_step, 0.0), 1.0)
            self.sign_sum, self.sign_count, self.pending = 0.0, 0, 0
        return self

    def should_stop(self) -> bool:
        return self.p >= self.stop_threshold

    def state_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_state(cls, state: dict) -> "AdaController":
        return cls(**state)


def update_p(ctrl: AdaController, real_logits: torch.Tensor) -> AdaController:
    return ctrl.update(real_logits)


def should_stop(ctrl: AdaController) -> bool:
    return ctrl.should_stop()
