"""Mapping network plus a shared-trunk / per-modality-branch synthesis network."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModalitySpec, TrainConfig

LRELU_SLOPE = 0.2
LRELU_GAIN = math.sqrt(2.0)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LRELU_SLOPE) * LRELU_GAIN


def normalize_2nd_moment(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * (x.square().mean(dim=1, keepdim=True) + eps).rsqrt()


class FullyConnected(nn.Module):
    """Linear layer with optional equalized learning rate (runtime He scaling)."""

    def __init__(self, in_features, out_features, bias_init=0.0, activation=False, equalized=True):
        super().__init__()
        self.equalized = equalized
        self.activation = activation
        std = 1.0 if equalized else 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * std)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init)))
        self.gain = 1.0 / math.sqrt(in_features) if equalized else 1.0

    def forward(self, x):
        x = F.linear(x, self.weight * self.gain, self.bias)
        return lrelu(x) if self.activation else x


class Conv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, activation=True, equalized=True):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        std = 1.0 if equalized else 1.0 / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size) * std)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.gain = 1.0 / math.sqrt(fan_in) if equalized else 1.0
        self.stride = stride
        self.padding = kernel_size // 2
        self.activation = activation

    def forward(self, x):
        x = F.conv2d(x, self.weight * self.gain, self.bias, stride=self.stride, padding=self.padding)
        return lrelu(x) if self.activation else x


class MappingNetwork(nn.Module):
    """Two fully-connected stages z -> w, after 2nd-moment normalization of z."""

    def __init__(self, latent_dim: int, w_dim: int, equalized: bool = True):
        super().__init__()
        self.latent_dim = latent_dim
        self.w_dim = w_dim
        self.fc0 = FullyConnected(latent_dim, w_dim, activation=True, equalized=equalized)
        self.fc1 = FullyConnected(w_dim, w_dim, activation=True, equalized=equalized)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent must have shape [B, {self.latent_dim}], got {tuple(z.shape)}")
        return self.fc1(self.fc0(normalize_2nd_moment(z)))


def fourier_features(channels: int, size: int = 4, seed: int = 0) -> torch.Tensor:
    """Fixed sinusoidal coordinate features of shape [channels, size, size].

    Frequencies are drawn once from a private generator and stay below the
    grid's Nyquist limit, so the input carries spatial structure without any
    per-sample noise.
    """
    gen = torch.Generator().manual_seed(seed)
    freqs = torch.randn(channels, 2, generator=gen, dtype=torch.float64)
    radii = freqs.norm(dim=1, keepdim=True).clamp_min(1e-8)
    freqs = freqs / radii * torch.rand(channels, 1, generator=gen, dtype=torch.float64) * (size / 2)
    phases = torch.rand(channels, generator=gen, dtype=torch.float64) - 0.5
    coords = (torch.arange(size, dtype=torch.float64) + 0.5) / size - 0.5
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    arg = freqs[:, 0, None, None] * gx + freqs[:, 1, None, None] * gy + phases[:, None, None]
    return torch.sin(2 * math.pi * arg).float()


class SynthesisBlock(nn.Module):
    """Style-modulated 3x3 convolution with its own affine style transform.

    The input magnitude is normalized by an exponential moving average of its
    mean square, updated only while the module is in training mode.
    """

    def __init__(self, in_channels, out_channels, w_dim, resolution, up=False, ema_beta=0.999, equalized=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.resolution = resolution
        self.up = up
        self.ema_beta = ema_beta
        self.affine = FullyConnected(w_dim, in_channels, bias_init=1.0, equalized=equalized)
        std = 1.0 if equalized else 1.0 / math.sqrt(in_channels * 9)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 3, 3) * std)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.register_buffer("magnitude_ema", torch.ones([]))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if self.training:
            cur = x.detach().square().mean().to(self.magnitude_ema.dtype)
            self.magnitude_ema.copy_(cur.lerp(self.magnitude_ema, self.ema_beta))
        styles = self.affine(w)  # [B, in]
        weight = self.weight
        y = F.conv2d(x * styles[:, :, None, None], weight, padding=1)
        # demodulation: unit-norm modulated filters per sample and output channel
        dcoefs = (weight[None] * styles[:, None, :, None, None]).square().sum(dim=[2, 3, 4])
        y = y * (dcoefs + 1e-8).rsqrt()[:, :, None, None] * self.magnitude_ema.rsqrt()
        return lrelu(y + self.bias[None, :, None, None])


def layer_plan(resolution: int, num_layers: int, channel_base: int, channel_max: int) -> list[tuple[int, int, bool]]:
    """(resolution, out_channels, upsample) for every synthesis block, starting from 4x4."""
    stages = int(np.log2(resolution)) - 1
    plan = []
    prev_stage = 0
    for i in range(num_layers):
        stage = i * stages // num_layers
        res = 4 * 2**stage
        plan.append((res, min(channel_max, channel_base // res), stage != prev_stage))
        prev_stage = stage
    return plan


class Branch(nn.Module):
    def __init__(self, blocks: list[SynthesisBlock], in_channels: int, out_channels: int, equalized=True):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.to_out = Conv2d(in_channels, out_channels, 1, activation=False, equalized=equalized)

    def forward(self, x, w):
        for block in self.blocks:
            x = block(x, w)
        return self.to_out(x)


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        m = cfg.model
        self.modalities: list[ModalitySpec] = list(cfg.modalities)
        self.branch_index = m.branch_index
        self.plan = layer_plan(m.resolution, m.num_layers, m.g_channel_base, m.g_channel_max)
        self.register_buffer("fourier", fourier_features(m.fourier_channels))

        def make_block(i: int, in_ch: int) -> SynthesisBlock:
            res, out_ch, up = self.plan[i]
            return SynthesisBlock(in_ch, out_ch, m.w_dim, res, up, m.magnitude_ema_beta, m.equalized_lr)

        channels = [m.fourier_channels] + [c for _, c, _ in self.plan]
        k = m.branch_index
        self.trunk = nn.ModuleList(make_block(i, channels[i]) for i in range(k - 1))
        self.branches = nn.ModuleDict(
            {
                spec.name: Branch(
                    [make_block(i, channels[i]) for i in range(k - 1, m.num_layers)],
                    channels[-1],
                    spec.channels,
                    m.equalized_lr,
                )
                for spec in self.modalities
            }
        )

    def trunk_forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.fourier[None].expand(w.shape[0], -1, -1, -1).to(w.dtype)
        for block in self.trunk:
            x = block(x, w)
        return x

    def forward(self, w: torch.Tensor) -> dict[str, torch.Tensor]:
        shared = self.trunk_forward(w)
        return {name: branch(shared, w) for name, branch in self.branches.items()}


class Generator(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.latent_dim = cfg.model.latent_dim
        self.w_dim = cfg.model.w_dim
        self.mapping = MappingNetwork(cfg.model.latent_dim, cfg.model.w_dim, cfg.model.equalized_lr)
        self.synthesis = SynthesisNetwork(cfg)

    def forward(self, z: torch.Tensor) -> dict[str, torch.Tensor]:
        return self.synthesis(self.mapping(z))


def map_latent(G: Generator, z: torch.Tensor) -> torch.Tensor:
    squeeze = z.ndim == 1
    w = G.mapping(z[None] if squeeze else z)
    return w[0] if squeeze else w


def synthesize(G: Generator, w: torch.Tensor) -> dict[str, torch.Tensor]:
    if w.ndim == 1:
        return {k: v[0] for k, v in G.synthesis(w[None]).items()}
    if w.shape[-1] != G.w_dim:
        raise ValueError(f"w must have length {G.w_dim}, got {w.shape[-1]}")
    return G.synthesis(w)


def generate(G: Generator, z: torch.Tensor) -> dict[str, torch.Tensor]:
    return synthesize(G, map_latent(G, z))


def interpolate_w(w_a: torch.Tensor, w_b: torch.Tensor, t: float) -> torch.Tensor:
    if w_a.shape != w_b.shape:
        raise ValueError(f"w shapes differ: {tuple(w_a.shape)} vs {tuple(w_b.shape)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * w_a + t * w_b


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
