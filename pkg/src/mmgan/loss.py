"""Non-saturating logistic losses, R1 penalty and the discriminator-input blur schedule."""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn.functional as F

from .core import LossConfig


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"{name}: non-finite logits")


def reduce_heads(per_head: torch.Tensor) -> torch.Tensor:
    """Combine per-head adversarial terms with equal weight 1."""
    return per_head.sum()


def _as_2d(logits: torch.Tensor) -> torch.Tensor:
    return logits[:, None] if logits.ndim == 1 else logits


def g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Mean over the batch, sum over heads, of softplus(-logit)."""
    fake_logits = _as_2d(fake_logits)
    _check_finite("g_loss", fake_logits)
    return reduce_heads(F.softplus(-fake_logits).mean(dim=0))


def d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    real_logits, fake_logits = _as_2d(real_logits), _as_2d(fake_logits)
    _check_finite("d_loss", real_logits, fake_logits)
    return reduce_heads(F.softplus(-real_logits).mean(dim=0) + F.softplus(fake_logits).mean(dim=0))


def r1_penalty(
    d_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    real: dict[str, torch.Tensor] | torch.Tensor,
    gamma: float,
) -> torch.Tensor:
    """gamma/2 * E_x ||grad_x D(x)||^2, summed over heads when D returns [B, K].

    The returned value is differentiable w.r.t. the discriminator parameters.
    """
    single = isinstance(real, torch.Tensor)
    inputs = {"x": real} if single else dict(real)
    inputs = {k: v.detach().requires_grad_(True) for k, v in inputs.items()}
    out = d_fn(inputs["x"] if single else inputs)
    if not out.requires_grad:
        raise RuntimeError("r1_penalty: discriminator output carries no gradient w.r.t. its input")
    out = _as_2d(out)
    keys = list(inputs)
    total = out.new_zeros(out.shape[0])
    for k in range(out.shape[1]):
        grads = torch.autograd.grad(
            out[:, k].sum(), [inputs[n] for n in keys], create_graph=True, allow_unused=True,
            retain_graph=True,
        )
        for g in grads:
            if g is not None:
                total = total + g.square().flatten(1).sum(dim=1)
    return total.mean() * (gamma / 2)


def blur_sigma(step_images: int, cfg: LossConfig) -> float:
    """Linear ramp from blur_sigma_init at 0 images to 0 at blur_ramp_images."""
    if step_images < 0:
        raise ValueError("step_images must be non-negative")
    frac = max(0.0, 1.0 - step_images / cfg.blur_ramp_images)
    return cfg.blur_sigma_init * frac


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; identity for sigma <= 0."""
    if sigma <= 0:
        return x
    radius = min(int(math.ceil(3 * sigma)), x.shape[-1] - 1, x.shape[-2] - 1)
    if radius < 1:
        return x
    t = torch.arange(-radius, radius + 1, dtype=x.dtype, device=x.device)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    x = F.pad(x, [radius, radius, radius, radius], mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def blur_tuple(tup: dict[str, torch.Tensor], sigma: float) -> dict[str, torch.Tensor]:
    return {k: gaussian_blur(v, sigma) for k, v in tup.items()}


def lazy_r1_active(step: int, interval: int) -> bool:
    return step % interval == 0
