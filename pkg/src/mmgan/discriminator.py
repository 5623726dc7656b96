"""Per-modality fidelity heads and a consistency head over channel-concatenated tuples."""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import DiscriminatorMode, TrainConfig
from .generator import Conv2d, FullyConnected

CONSISTENCY = "cd"


def fidelity_key(modality: str) -> str:
    return f"fd_{modality}"


def minibatch_stddev(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    b, c, h, w = x.shape
    g = min(group_size, b)
    while b % g:
        g -= 1
    y = x.reshape(g, -1, c, h, w)
    y = (y - y.mean(dim=0)).square().mean(dim=0).add(1e-8).sqrt()
    y = y.mean(dim=[1, 2, 3]).reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
    return torch.cat([x, y], dim=1)


class DiscriminatorHead(nn.Module):
    """Strided convolution stack ending in one scalar logit per sample.

    All heads share this template; only ``in_channels`` differs.
    """

    def __init__(self, in_channels, resolution, channel_base=512, channel_max=64, mbstd=False, equalized=True):
        super().__init__()
        self.in_channels = in_channels

        def ch(res):
            return min(channel_max, channel_base // res)

        self.from_input = Conv2d(in_channels, ch(resolution), 1, equalized=equalized)
        layers = []
        res = resolution
        while res > 4:
            layers.append(Conv2d(ch(res), ch(res // 2), 3, stride=2, equalized=equalized))
            res //= 2
        self.down = nn.Sequential(*layers)
        self.mbstd = mbstd
        c4 = ch(4)
        self.conv = Conv2d(c4 + int(mbstd), c4, 3, equalized=equalized)
        self.fc = FullyConnected(c4 * 16, c4, activation=True, equalized=equalized)
        self.out = FullyConnected(c4, 1, equalized=equalized)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"head expects [B, {self.in_channels}, H, W] input, got {tuple(x.shape)}")
        x = self.down(self.from_input(x))
        if self.mbstd:
            x = minibatch_stddev(x)
        x = self.fc(self.conv(x).flatten(1))
        return self.out(x)[:, 0]

    @torch.no_grad()
    def zero_output_(self):
        self.out.weight.zero_()
        self.out.bias.zero_()


class MultiDiscriminator(nn.Module):
    """Fidelity heads (one per modality) plus the consistency head, per discriminator mode."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        m = cfg.model
        self.mode = DiscriminatorMode(m.discriminator_mode)
        self.modalities = list(cfg.modalities)
        self.order = [spec.name for spec in self.modalities]

        def head(channels):
            return DiscriminatorHead(channels, m.resolution, m.d_channel_base, m.d_channel_max, m.mbstd, m.equalized_lr)

        heads = {}
        if self.mode != DiscriminatorMode.CD_ONLY:
            for spec in self.modalities:
                heads[fidelity_key(spec.name)] = head(spec.channels)
        if self.mode != DiscriminatorMode.FD_ONLY:
            heads[CONSISTENCY] = head(sum(spec.channels for spec in self.modalities))
        self.heads = nn.ModuleDict(heads)

    @property
    def head_names(self) -> list[str]:
        return list(self.heads.keys())

    def score_fidelity(self, modality: str, images: torch.Tensor) -> torch.Tensor:
        key = fidelity_key(modality)
        if key not in self.heads:
            raise KeyError(f"no fidelity head for {modality!r} in mode {self.mode.value}")
        return self.heads[key](images)

    def concat(self, tup: dict[str, torch.Tensor]) -> torch.Tensor:
        """Channel-concatenate a tuple in the configured (canonical) modality order."""
        if not isinstance(tup, dict):
            raise TypeError("consistency input must be a modality->tensor mapping, not a pre-concatenated tensor")
        missing = [n for n in self.order if n not in tup]
        extra = [n for n in tup if n not in self.order]
        if missing or extra:
            raise ValueError(f"tuple mismatch: missing {missing}, unexpected {extra}")
        return torch.cat([tup[n] for n in self.order], dim=1)

    def score_consistency(self, tup: dict[str, torch.Tensor]) -> torch.Tensor:
        if CONSISTENCY not in self.heads:
            raise KeyError(f"no consistency head in mode {self.mode.value}")
        return self.heads[CONSISTENCY](self.concat(tup))

    def score_head(self, name: str, tup: dict[str, torch.Tensor]) -> torch.Tensor:
        if name == CONSISTENCY:
            return self.score_consistency(tup)
        return self.score_fidelity(name[len("fd_"):], tup[name[len("fd_"):]])

    def score_all(self, tup: dict[str, torch.Tensor], mode: DiscriminatorMode | str | None = None) -> torch.Tensor:
        """Logits [B, K]: fidelity heads in modality order, then the consistency head."""
        mode = self.mode if mode is None else DiscriminatorMode(mode)
        if mode == DiscriminatorMode.FD_ONLY:
            names = [fidelity_key(n) for n in self.order]
        elif mode == DiscriminatorMode.CD_ONLY:
            names = [CONSISTENCY]
        else:
            names = [fidelity_key(n) for n in self.order] + [CONSISTENCY]
        self.concat(tup)  # validates completeness
        return torch.stack([self.score_head(n, tup) for n in names], dim=1)

    def forward(self, tup):
        return self.score_all(tup)


def head_names_for(cfg: TrainConfig) -> list[str]:
    mode = DiscriminatorMode(cfg.model.discriminator_mode)
    names = []
    if mode != DiscriminatorMode.CD_ONLY:
        names += [fidelity_key(n) for n in cfg.modality_names]
    if mode != DiscriminatorMode.FD_ONLY:
        names.append(CONSISTENCY)
    return names


def logit_count(num_modalities: int, mode: DiscriminatorMode | str) -> int:
    mode = DiscriminatorMode(mode)
    return {DiscriminatorMode.CD_PLUS_FD: num_modalities + 1, DiscriminatorMode.FD_ONLY: num_modalities}.get(mode, 1)

