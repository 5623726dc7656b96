"""Shared types, configuration schema, RNG helpers and the checkpoint container."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

CHECKPOINT_FORMAT = "mmgan-checkpoint"
CHECKPOINT_VERSION = 1
HEADER_KEY = "mmgan"

STANDARD_CHANNELS = {"rgb": 3, "depth": 1, "normal": 3}


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class DiscriminatorMode(str, enum.Enum):
    FD_ONLY = "FD_ONLY"
    CD_ONLY = "CD_ONLY"
    CD_PLUS_FD = "CD_PLUS_FD"


class AugmentationMode(str, enum.Enum):
    NONE = "NONE"
    FIXED_P = "FIXED_P"
    ADAPTIVE = "ADAPTIVE"


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int
    color_augmentable: bool = False

    def __post_init__(self):
        if not self.name:
            raise ConfigError("modality name must be non-empty")
        if self.channels < 1:
            raise ConfigError(f"modality {self.name!r}: channels must be >= 1, got {self.channels}")
        expected = STANDARD_CHANNELS.get(self.name)
        if expected is not None and self.channels != expected:
            raise ConfigError(f"modality {self.name!r} must have {expected} channels, got {self.channels}")


def default_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec("rgb", 3, color_augmentable=True),
        ModalitySpec("depth", 1),
        ModalitySpec("normal", 3),
    ]


@dataclass
class ModelConfig:
    resolution: int = 32
    latent_dim: int = 64
    w_dim: int = 64
    # Synthesis blocks in total; blocks 1..branch_index-1 form the shared trunk.
    num_layers: int = 8
    branch_index: int = 6
    fourier_channels: int = 64
    g_channel_base: int = 1024
    g_channel_max: int = 64
    d_channel_base: int = 512
    d_channel_max: int = 64
    discriminator_mode: DiscriminatorMode = DiscriminatorMode.CD_PLUS_FD
    magnitude_ema_beta: float = 0.999
    equalized_lr: bool = True
    mbstd: bool = False
    # No-op in the simplified blocks; kept so configs can record the choice.
    critical_sampling_rgb: bool = False

    @property
    def trunk_layers(self) -> int:
        return self.branch_index - 1

    @property
    def branch_layers(self) -> int:
        return self.num_layers - self.branch_index + 1


@dataclass
class LossConfig:
    r1_gamma: float = 1.0
    r1_interval: int = 16
    blur_sigma_init: float = 2.0
    blur_ramp_images: int = 50_000


@dataclass
class AugmentConfig:
    mode: AugmentationMode = AugmentationMode.ADAPTIVE
    p: float = 0.0  # initial p (ADAPTIVE) or constant p (FIXED_P)
    target: float = 0.6
    interval: int = 4
    ada_kimg: float = 500.0
    stop_threshold: float = 0.7


@dataclass
class OptimConfig:
    g_lr: float = 0.002
    d_lr: float = 0.002
    betas: tuple[float, float] = (0.0, 0.99)
    eps: float = 1e-8


@dataclass
class TrainerConfig:
    batch_size: int = 16
    max_steps: int = 0  # 0 = unbounded, use max_images
    max_images: int = 50_000
    seed: int = 0
    ema_kimg: float = 0.0  # 0 disables the generator EMA copy
    checkpoint_every_images: int = 10_000
    eval_every_images: int = 1_000
    eval_samples: int = 256
    strict_determinism: bool = True


@dataclass
class DataConfig:
    source: str = "procedural"  # procedural | manifest
    manifest: str = ""
    num_samples: int = 2000
    classes: list[str] = field(default_factory=lambda: ["office", "lounge", "storage"])
    seed: int = 1234
    # per_image: per-image min/max stretch; fixed: dataset-wide depth_range
    depth_norm: str = "fixed"
    depth_range: tuple[float, float] | None = None


@dataclass
class FinetuneConfig:
    holdout_class: str = "auditorium"
    paired_pct: float = 10.0
    num_samples: int = 600
    max_images: int = 8_000
    max_steps: int = 0
    ada: bool = False


@dataclass
class MetricsConfig:
    extractor: str = "builtin"  # builtin | path to a TorchScript module
    num_samples: int = 512
    fid_samples: int = 1000
    oracle_steps: int = 300


@dataclass
class TrainConfig:
    modalities: list[ModalitySpec] = field(default_factory=default_modalities)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [m.name for m in self.modalities]
        if not names:
            raise ConfigError("at least one modality is required")
        if len(set(names)) != len(names):
            raise ConfigError(f"modality names must be unique: {names}")
        m = self.model
        if not 1 <= m.branch_index <= m.num_layers:
            raise ConfigError(f"branch_index must lie in [1, {m.num_layers}], got {m.branch_index}")
        res = m.resolution
        if res < 4 or res & (res - 1):
            raise ConfigError(f"resolution must be a power of two >= 4, got {res}")
        stages = int(np.log2(res)) - 1
        if m.num_layers < stages:
            raise ConfigError(f"num_layers={m.num_layers} cannot reach resolution {res} ({stages} stages)")
        for key in ("latent_dim", "w_dim", "fourier_channels"):
            if getattr(m, key) < 1:
                raise ConfigError(f"model.{key} must be positive")
        if not 0.0 < self.augment.stop_threshold <= 1.0:
            raise ConfigError("augment.stop_threshold must lie in (0, 1]")
        if not 0.0 <= self.augment.p <= 1.0:
            raise ConfigError("augment.p must lie in [0, 1]")
        for key in ("g_lr", "d_lr", "eps"):
            if getattr(self.optim, key) < 0:
                raise ConfigError(f"optim.{key} must be non-negative")
        if self.loss.r1_gamma < 0 or self.loss.r1_interval < 1:
            raise ConfigError("loss.r1_gamma must be >= 0 and loss.r1_interval >= 1")
        if self.loss.blur_sigma_init < 0 or self.loss.blur_ramp_images < 1:
            raise ConfigError("blur_sigma_init must be >= 0 and blur_ramp_images >= 1")
        if self.trainer.batch_size < 1:
            raise ConfigError("trainer.batch_size must be positive")
        if self.augment.interval < 1 or self.augment.ada_kimg <= 0:
            raise ConfigError("augment.interval and augment.ada_kimg must be positive")
        if self.data.depth_norm not in ("fixed", "per_image"):
            raise ConfigError(f"data.depth_norm must be 'fixed' or 'per_image', got {self.data.depth_norm!r}")
        if not 0 < self.finetune.paired_pct <= 100:
            raise ConfigError("finetune.paired_pct must lie in (0, 100]")

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _from_plain(cls, data or {}, "")


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _from_plain(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(str(value).upper())
        except ValueError:
            raise ConfigError(f"{where}: {value!r} is not one of {[e.value for e in tp]}") from None
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a sequence of length {len(args)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    return value


def _from_plain(cls: type, data: dict[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys under {prefix or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        where = f"{prefix}.{key}" if prefix else key
        if cls is TrainConfig and key == "modalities":
            kwargs[key] = [v if isinstance(v, ModalitySpec) else _from_plain(ModalitySpec, v, where) for v in value]
            continue
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(data: dict[str, Any], overrides: dict[str, str]) -> dict[str, Any]:
    """Apply ``{"trainer.max-steps": "10"}``-style overrides to a plain config dict.

    Hyphens in keys are treated as underscores and values are parsed as YAML
    scalars, so ``"10"`` becomes an int and ``"[1, 2]"`` a list.
    """
    out = json.loads(json.dumps(data))
    for dotted, raw in overrides.items():
        parts = dotted.replace("-", "_").split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a mapping")
    if overrides:
        data = apply_overrides(data, overrides)
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# -- RNG ---------------------------------------------------------------------


def make_rng(seed: int) -> torch.Generator:
    """CPU torch generator; Philox/MT streams are platform-stable for a fixed torch build."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def rng_state(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().clone()


def rng_from_state(state: torch.Tensor) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.set_state(state.clone())
    return gen


# -- Checkpoint container ----------------------------------------------------


def _checksum(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.view(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def write_container(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> None:
    """Write named arrays plus a JSON metadata block to one safetensors file."""
    tensors = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "checksum": _checksum(tensors),
        "meta": meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # one key only: the file format keeps metadata in an unordered map
    save_file(tensors, str(path), metadata={HEADER_KEY: json.dumps(header, sort_keys=True)})


def read_container(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as fh:
            raw = (fh.metadata() or {}).get(HEADER_KEY)
        header = json.loads(raw) if raw else {}
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an mmgan checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: file has {header.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    if header.get("checksum") != _checksum(tensors):
        raise CheckpointError(f"checksum mismatch in {path}; file is corrupt")
    return tensors, header.get("meta", {})
