"""Fréchet distance on extractor features, scale-invariant depth error and normal angular statistics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

COV_DDOF = 1
ANGLE_THRESHOLDS = (11.25, 22.5, 30.0)
DEGENERATE_NORM = 1e-6
CLAMP_REPORT = 1e-6

Extractor = Callable[[torch.Tensor], np.ndarray]


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("FeatureStats needs at least 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean length {self.mean.size}")


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got shape {feats.shape}")
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=COV_DDOF))
    return FeatureStats(feats.mean(axis=0), (cov + cov.T) / 2, feats.shape[0])


def feature_stats(images: torch.Tensor | np.ndarray, extractor: Extractor) -> FeatureStats:
    if len(images) < 2:
        raise ValueError("feature_stats needs at least 2 images")
    return stats_from_features(extractor(torch.as_tensor(images)))


def _psd_sqrt(m: np.ndarray) -> tuple[np.ndarray, float]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    clamped = float(-vals[vals < 0].min()) if (vals < 0).any() else 0.0
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, clamped


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    sa_half, c1 = _psd_sqrt(a.cov)
    inner = sa_half @ b.cov @ sa_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    c2 = float(-vals.min()) if vals.min() < 0 else 0.0
    clamped = max(c1, c2)
    if clamped > CLAMP_REPORT:
        log.info("frechet_distance: clamped negative eigenvalue of magnitude %.3g", clamped)
    tr_cross = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_cross)
    return max(d, 0.0)


def fid(real_images, gen_images, extractor: Extractor) -> float:
    return frechet_distance(feature_stats(real_images, extractor), feature_stats(gen_images, extractor))


def sie(pred_depth, ref_depth, valid_mask=None) -> float:
    """Variance of the log depth ratio over the mask: mean(z^2) - mean(z)^2."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    ref = np.asarray(ref_depth, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {ref.shape}")
    mask = np.ones(pred.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    p, r = pred[mask], ref[mask]
    if p.size == 0:
        raise ValueError("sie: empty mask")
    if (p <= 0).any() or (r <= 0).any():
        raise ValueError("sie: depths must be strictly positive inside the mask")
    z = np.log(p) - np.log(r)
    n = z.size
    return max(float((z * z).sum() / n - z.sum() ** 2 / n**2), 0.0)


@dataclass
class AngularStats:
    mean: float
    median: float
    pct_within: dict[float, float]
    count: int
    degenerate: int = 0


def angular_errors(pred_normals, ref_normals, mask=None, thresholds=ANGLE_THRESHOLDS) -> AngularStats:
    """Per-pixel angles (degrees) between normal maps [..., 3, H, W] (channel axis -3)."""
    p = np.asarray(pred_normals, dtype=np.float64)
    r = np.asarray(ref_normals, dtype=np.float64)
    if p.shape != r.shape or p.ndim < 3 or p.shape[-3] != 3:
        raise ValueError(f"normal maps must share shape [..., 3, H, W], got {p.shape} and {r.shape}")
    p = np.moveaxis(p, -3, -1).reshape(-1, 3)
    r = np.moveaxis(r, -3, -1).reshape(-1, 3)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), np.asarray(pred_normals).shape[:-3] + np.asarray(pred_normals).shape[-2:])
        m = m.reshape(-1)
        p, r = p[m], r[m]
    np_, nr = np.linalg.norm(p, axis=1), np.linalg.norm(r, axis=1)
    ok = (np_ > DEGENERATE_NORM) & (nr > DEGENERATE_NORM)
    degenerate = int((~ok).sum())
    if len(ok) == 0 or degenerate * 2 > len(ok):
        raise ValueError(f"angular_errors: {degenerate} of {len(ok)} vectors are degenerate")
    cos = np.clip((p[ok] * r[ok]).sum(1) / (np_[ok] * nr[ok]), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    pct = {float(g): float((ang <= g).mean() * 100) for g in thresholds}
    return AngularStats(float(ang.mean()), float(np.median(ang)), pct, int(ang.size), degenerate)


# -- feature extractors -----------------------------------------------------------


class RandomConvEncoder(nn.Module):
    """Frozen, seed-0 random three-block conv encoder; features are per-block global means."""

    def __init__(self, widths=(32, 64, 128), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(widths)
        self.weights = nn.ParameterList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=gen) / math.sqrt(cin * 9)
            self.weights.append(nn.Parameter(w, requires_grad=False))
        self.eval()

    @property
    def dim(self) -> int:
        return sum(w.shape[0] for w in self.weights)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.float()
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if x.shape[1] != 3:
            raise ValueError(f"extractor expects 1 or 3 channels, got {x.shape[1]}")
        feats = []
        for w in self.weights:
            x = F.leaky_relu(F.conv2d(x, w, padding=1), 0.2) * math.sqrt(2)
            feats.append(x.mean(dim=[2, 3]))
            x = F.avg_pool2d(x, 2)
        return torch.cat(feats, dim=1)


_BUILTIN: RandomConvEncoder | None = None


def builtin_extractor(images: torch.Tensor, batch: int = 256) -> np.ndarray:
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = RandomConvEncoder()
    out = [_BUILTIN(images[i: i + batch]) for i in range(0, len(images), batch)]
    return torch.cat(out).double().numpy()


def load_extractor(spec: str = "builtin") -> Extractor:
    """``builtin`` or a path to a TorchScript module mapping [N, C, H, W] -> [N, F]."""
    if spec == "builtin":
        return builtin_extractor
    path = Path(spec)
    if not path.is_file():
        raise FileNotFoundError(f"extractor weights not found: {path}")
    module = torch.jit.load(str(path), map_location="cpu").eval()

    def run(images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return module(images.float()).double().numpy()

    return run


# -- geometry oracle ------------------------------------------------------------------


class GeometryOracle(nn.Module):
    """Small CNN fitted on real tuples to predict depth and normals from RGB.

    Supplies reference geometry for generated RGB where no ground truth exists.
    """

    def __init__(self, width: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=4, dilation=4), nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, 4, 1),
            )

    def forward(self, rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(rgb)
        return torch.tanh(out[:, :1]), F.normalize(out[:, 1:], dim=1)

    def fit(self, rgb: torch.Tensor, depth: torch.Tensor, normal: torch.Tensor, steps: int = 300,
            batch: int = 32, lr: float = 2e-3, seed: int = 0) -> "GeometryOracle":
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        self.train()
        for _ in range(steps):
            idx = torch.randint(len(rgb), (batch,), generator=gen)
            d, n = self(rgb[idx])
            loss = F.l1_loss(d, depth[idx]) + (1 - (n * normal[idx]).sum(1)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.eval()
        return self

    @torch.no_grad()
    def predict(self, rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self(rgb)


# -- reports ------------------------------------------------------------------------------


@dataclass
class MetricReport:
    fid: dict[str, float] = field(default_factory=dict)
    sie: float = float("nan")
    normal_mean_deg: float = float("nan")
    normal_median_deg: float = float("nan")
    pct_within: dict[float, float] = field(default_factory=dict)
    self_consistency_deg: float = float("nan")

    def columns(self) -> list[str]:
        cols = [f"fid_{m}" for m in self.fid]
        cols += ["sie", "normal_mean_deg", "normal_median_deg"]
        cols += [f"within_{g:g}" for g in self.pct_within]
        return cols + ["self_consistency_deg"]

    def row(self) -> dict[str, float]:
        out = {f"fid_{m}": v for m, v in self.fid.items()}
        out.update(sie=self.sie, normal_mean_deg=self.normal_mean_deg, normal_median_deg=self.normal_median_deg)
        out.update({f"within_{g:g}": v for g, v in self.pct_within.items()})
        out["self_consistency_deg"] = self.self_consistency_deg
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns())
        writer.writeheader()
        writer.writerow(self.row())
        return buf.getvalue()

    def table(self) -> str:
        row = self.row()
        width = max(len(k) for k in row)
        return "\n".join(f"{k:<{width}}  {v:10.4f}" for k, v in row.items())


def self_consistency(gen: Mapping[str, torch.Tensor], depth_range, pixel_size: float, border: int = 1) -> AngularStats:
    """Generated normals vs normals derived from the generated depth (interior pixels)."""
    from .data import denormalize_depth, normals_from_depth

    depth = denormalize_depth(gen["depth"].clamp(-1, 1).double().numpy(), *depth_range)
    derived = normals_from_depth(depth, pixel_size)
    normal = gen["normal"].double().numpy()
    sl = (Ellipsis, slice(border, -border or None), slice(border, -border or None))
    return angular_errors(normal[sl], derived[sl])


def evaluate_tuples(
    real: Mapping[str, torch.Tensor],
    gen: Mapping[str, torch.Tensor],
    extractor: Extractor = builtin_extractor,
    depth_range=None,
    pixel_size: float = 1.0,
    oracle: GeometryOracle | None = None,
) -> MetricReport:
    """Per-modality toy-FID plus geometry statistics of a generated set."""
    report = MetricReport()
    for name in real:
        report.fid[name] = fid(real[name], gen[name], extractor)
    if "depth" in gen and "normal" in gen and depth_range is not None:
        sc = self_consistency(gen, depth_range, pixel_size)
        report.self_consistency_deg = sc.mean
    if oracle is not None and "rgb" in gen:
        from .data import denormalize_depth

        ref_d, ref_n = oracle.predict(gen["rgb"].float())
        lo, hi = depth_range if depth_range is not None else (1.0, 2.0)
        pred = denormalize_depth(gen["depth"].clamp(-1, 1).double().numpy(), lo, hi)
        ref = denormalize_depth(ref_d.double().numpy(), lo, hi)
        report.sie = float(np.mean([sie(p, r) for p, r in zip(pred, ref)]))
        if "normal" in gen:
            st = angular_errors(gen["normal"].double().numpy(), ref_n.double().numpy())
            report.normal_mean_deg, report.normal_median_deg = st.mean, st.median
            report.pct_within = st.pct_within
    return report
