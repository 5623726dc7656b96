"""Procedural RGB + depth + normal scenes, depth normalization, domain splits and file I/O.

Normals follow the depth-gradient convention ``n ~ (-dd/dx, -dd/dy, 1)`` with
x along image columns, y along image rows (downwards) and d the orthographic
depth; a surface facing the camera head-on is ``(0, 0, 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

# -- depth normalization -------------------------------------------------------


def normalize_depth(d: np.ndarray, dmin: float | None = None, dmax: float | None = None) -> np.ndarray:
    """Min/max rescale to [-1, 1]; per-image extremes unless a range is given.

    A constant map (zero span) becomes all -1.
    """
    d = np.asarray(d, dtype=np.float64)
    lo = float(d.min()) if dmin is None else float(dmin)
    hi = float(d.max()) if dmax is None else float(dmax)
    if hi - lo <= 0:
        return np.full_like(d, -1.0)
    return ((d - lo) / (hi - lo) - 0.5) * 2.0


def denormalize_depth(dn: np.ndarray, dmin: float, dmax: float) -> np.ndarray:
    if dmax <= dmin:
        raise ValueError(f"denormalize_depth needs dmax > dmin, got [{dmin}, {dmax}]")
    return (np.asarray(dn, dtype=np.float64) / 2.0 + 0.5) * (dmax - dmin) + dmin


# -- normals -----------------------------------------------------------------------


def normals_from_depth(depth: np.ndarray, pixel_size: float = 1.0) -> np.ndarray:
    """Unit normals [..., 3, H, W] from a depth map [..., H, W] (or [..., 1, H, W]).

    Central differences inside, one-sided differences on the border.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim >= 3 and d.shape[-3] == 1:
        d = d[..., 0, :, :]
    gy, gx = np.gradient(d, pixel_size, axis=(-2, -1))
    n = np.stack([-gx, -gy, np.ones_like(d)], axis=-3)
    return n / np.linalg.norm(n, axis=-3, keepdims=True)


# -- procedural renderer ---------------------------------------------------------

CAMERA_PITCH = math.radians(25.0)
CAMERA_HEIGHT = 1.6
CAMERA_BACKOFF = 3.0
IMAGE_EXTENT = 4.0
WALL_Z = 5.0
LIGHT_DIR = np.array([-0.4, 0.8, -0.45]) / np.linalg.norm([-0.4, 0.8, -0.45])
AMBIENT = 0.35
SUPERSAMPLE = 2
# Covers every depth the renderer can emit for the object ranges below.
DEPTH_RANGE = (2.0, 8.5)

SCENE_CLASSES: dict[str, dict] = {
    "empty": dict(boxes=(0, 0), spheres=(0, 0), wall=(0.80, 0.78, 0.72), floor=(0.45, 0.45, 0.50),
                  palette=[(0.5, 0.5, 0.5)], box_h=(0.3, 0.6), box_w=(0.4, 0.8)),
    "office": dict(boxes=(2, 3), spheres=(0, 1), wall=(0.85, 0.82, 0.70), floor=(0.40, 0.42, 0.52),
                   palette=[(0.55, 0.35, 0.20), (0.30, 0.30, 0.32), (0.70, 0.70, 0.68)],
                   box_h=(0.4, 0.9), box_w=(0.5, 1.1)),
    "lounge": dict(boxes=(0, 1), spheres=(2, 3), wall=(0.65, 0.80, 0.62), floor=(0.62, 0.45, 0.28),
                   palette=[(0.90, 0.55, 0.20), (0.85, 0.30, 0.35), (0.95, 0.85, 0.40)],
                   box_h=(0.3, 0.6), box_w=(0.6, 1.2)),
    "storage": dict(boxes=(3, 4), spheres=(0, 0), wall=(0.62, 0.64, 0.68), floor=(0.25, 0.25, 0.28),
                    palette=[(0.30, 0.45, 0.70), (0.50, 0.55, 0.60), (0.20, 0.30, 0.45)],
                    box_h=(0.9, 1.6), box_w=(0.4, 0.7)),
    "auditorium": dict(boxes=(3, 4), spheres=(0, 0), wall=(0.40, 0.30, 0.45), floor=(0.50, 0.25, 0.20),
                       palette=[(0.75, 0.15, 0.15), (0.60, 0.10, 0.20), (0.85, 0.40, 0.30)],
                       box_h=(0.25, 0.45), box_w=(1.2, 2.2)),
}
SOURCE_CLASSES = ("office", "lounge", "storage")


@dataclass
class SceneSample:
    rgb: np.ndarray  # [3, H, W] in [-1, 1]
    depth: np.ndarray  # [1, H, W] raw positive units
    normal: np.ndarray  # [3, H, W] unit vectors
    scene_class: str
    paired: bool = True
    surface_id: np.ndarray | None = None  # [H, W], -1 where a pixel mixes surfaces
    pixel_size: float = IMAGE_EXTENT


def _camera():
    s, c = math.sin(CAMERA_PITCH), math.cos(CAMERA_PITCH)
    fwd = np.array([0.0, -s, c])
    up = np.array([0.0, c, s])
    right = np.array([1.0, 0.0, 0.0])
    center = np.array([0.0, CAMERA_HEIGHT, 0.0]) - CAMERA_BACKOFF * fwd
    return center, right, up, fwd


def _rays(res: int):
    center, right, up, fwd = _camera()
    coords = ((np.arange(res) + 0.5) / res - 0.5) * IMAGE_EXTENT
    v, u = np.meshgrid(-coords, coords, indexing="ij")  # row 0 at the top
    origins = center + u[..., None] * right + v[..., None] * up
    return origins.reshape(-1, 3), fwd


def _hit_box(o, d, lo, hi):
    tnear = np.full(len(o), -np.inf)
    tfar = np.full(len(o), np.inf)
    axis = np.zeros(len(o), dtype=int)
    for i in range(3):
        if abs(d[i]) < 1e-12:
            outside = (o[:, i] < lo[i]) | (o[:, i] > hi[i])
            tfar[outside] = -np.inf
            continue
        t1 = (lo[i] - o[:, i]) / d[i]
        t2 = (hi[i] - o[:, i]) / d[i]
        tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
        better = tmin > tnear
        axis[better] = i
        tnear = np.maximum(tnear, tmin)
        tfar = np.minimum(tfar, tmax)
    hit = (tnear <= tfar) & (tnear > 0)
    normal = np.zeros((len(o), 3))
    normal[np.arange(len(o)), axis] = -np.sign(d[axis])
    return np.where(hit, tnear, np.inf), normal, axis


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = oc @ d
    cc = (oc * oc).sum(1) - r * r
    disc = b * b - cc
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, (p - c) / r


def _sample_objects(rng: np.random.Generator, spec: dict):
    objects = []
    n_boxes = int(rng.integers(spec["boxes"][0], spec["boxes"][1] + 1))
    n_spheres = int(rng.integers(spec["spheres"][0], spec["spheres"][1] + 1))
    total = n_boxes + n_spheres
    if spec["boxes"][1] + spec["spheres"][1] > 0 and total == 0:
        n_boxes, total = 1, 1
    while total > 4:
        if n_spheres > n_boxes:
            n_spheres -= 1
        else:
            n_boxes -= 1
        total -= 1
    palette = spec["palette"]
    for _ in range(n_boxes):
        w = rng.uniform(*spec["box_w"])
        h = rng.uniform(*spec["box_h"])
        dz = rng.uniform(0.4, 0.9)
        x = rng.uniform(-1.8, 1.8)
        z = rng.uniform(0.8, 4.4)
        color = np.clip(np.array(palette[rng.integers(len(palette))]) + rng.normal(0, 0.05, 3), 0.02, 1.0)
        objects.append(("box", np.array([x - w / 2, 0.0, z - dz / 2]), np.array([x + w / 2, h, z + dz / 2]), color))
    for _ in range(n_spheres):
        r = rng.uniform(0.25, 0.6)
        center = np.array([rng.uniform(-1.7, 1.7), r, rng.uniform(1.0, 4.4)])
        color = np.clip(np.array(palette[rng.integers(len(palette))]) + rng.normal(0, 0.05, 3), 0.02, 1.0)
        objects.append(("sphere", center, r, color))
    return objects


def _render(res: int, objects, wall_color, floor_color):
    o, d = _rays(res)
    n = len(o)
    best_t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    sid = np.full(n, -1)

    def take(t, nrm, color, ident):
        closer = t < best_t
        best_t[closer] = t[closer]
        normal[closer] = nrm[closer] if nrm.ndim == 2 else nrm
        albedo[closer] = color[closer] if color.ndim == 2 else color
        sid[closer] = ident[closer] if np.ndim(ident) else ident

    t_floor = np.where(d[1] < 0, -o[:, 1] / d[1], np.inf)
    t_floor = np.where(t_floor > 0, t_floor, np.inf)
    hit = o + np.where(np.isfinite(t_floor), t_floor, 0)[:, None] * d
    checker = ((np.floor(hit[:, 0] / 0.5) + np.floor(hit[:, 2] / 0.5)) % 2) * 2 - 1
    floor_albedo = np.clip(np.asarray(floor_color)[None] * (1 + 0.08 * checker[:, None]), 0, 1)
    take(t_floor, np.array([0.0, 1.0, 0.0]), floor_albedo, 0)
    t_wall = (WALL_Z - o[:, 2]) / d[2]
    take(np.where(t_wall > 0, t_wall, np.inf), np.array([0.0, 0.0, -1.0]), np.asarray(wall_color), 1)
    for i, obj in enumerate(objects):
        if obj[0] == "box":
            t, nrm, face = _hit_box(o, d, obj[1], obj[2])
            take(t, nrm, obj[3], 10 * (i + 1) + face)  # one id per box face
        else:
            t, nrm = _hit_sphere(o, d, obj[1], obj[2])
            take(t, nrm, obj[3], 10 * (i + 1))
    if not np.isfinite(best_t).all():
        raise RuntimeError("renderer left pixels without geometry")
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0, None)
    rgb = np.clip(albedo * shade[:, None], 0, 1)
    _, right, up, fwd = _camera()
    enc = np.stack([-(normal @ right), normal @ up, -(normal @ fwd)], axis=1)
    return (
        rgb.reshape(res, res, 3).transpose(2, 0, 1),
        best_t.reshape(1, res, res),
        enc.reshape(res, res, 3).transpose(2, 0, 1),
        sid.reshape(res, res),
    )


def _pool(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def generate_scene(seed: int, resolution: int, scene_class: str) -> SceneSample:
    """Render one room: floor and back wall plus up to four boxes/spheres, orthographic view."""
    if scene_class not in SCENE_CLASSES:
        raise KeyError(f"unknown scene class {scene_class!r}; known: {sorted(SCENE_CLASSES)}")
    spec = SCENE_CLASSES[scene_class]
    rng = np.random.default_rng([int(seed), sum(map(ord, scene_class))])
    objects = _sample_objects(rng, spec)
    wall = np.clip(np.array(spec["wall"]) + rng.normal(0, 0.04, 3), 0, 1)
    floor = np.clip(np.array(spec["floor"]) + rng.normal(0, 0.04, 3), 0, 1)
    k = SUPERSAMPLE
    rgb, depth, normal, sid = _render(resolution * k, objects, wall, floor)
    rgb, depth, normal = _pool(rgb, k), _pool(depth, k), _pool(normal, k)
    normal = normal / np.linalg.norm(normal, axis=0, keepdims=True)
    blocks = sid.reshape(resolution, k, resolution, k).transpose(0, 2, 1, 3).reshape(resolution, resolution, -1)
    pure = (blocks == blocks[..., :1]).all(-1)
    surface_id = np.where(pure, blocks[..., 0], -1)
    return SceneSample(
        rgb=(rgb * 2 - 1).astype(np.float32),
        depth=depth.astype(np.float32),
        normal=normal.astype(np.float32),
        scene_class=scene_class,
        surface_id=surface_id,
        pixel_size=IMAGE_EXTENT / resolution,
    )


def smooth_mask(surface_id: np.ndarray) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood lies on one surface (no silhouettes or creases)."""
    sid = np.pad(surface_id, 1, mode="edge")
    h, w = surface_id.shape
    ok = surface_id >= 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ok &= sid[1 + dy: 1 + dy + h, 1 + dx: 1 + dx + w] == surface_id
    return ok


# -- datasets ----------------------------------------------------------------------


@dataclass
class TupleDataset:
    images: dict[str, torch.Tensor]  # name -> float32 [N, C, H, W] in [-1, 1]
    classes: list[str]
    paired: torch.Tensor  # bool [N]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.classes)

    def subset(self, idx: Sequence[int] | torch.Tensor) -> "TupleDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TupleDataset(
            {k: v[idx] for k, v in self.images.items()},
            [self.classes[i] for i in idx.tolist()],
            self.paired[idx],
            dict(self.meta),
        )

    def batch(self, idx: torch.Tensor) -> dict[str, torch.Tensor]:
        return {k: v[idx] for k, v in self.images.items()}

    @property
    def resolution(self) -> int:
        return next(iter(self.images.values())).shape[-1]


def class_counts(n: int, classes: Sequence[str], weights: Sequence[float] | None = None) -> dict[str, int]:
    """Largest-remainder apportionment of n samples over classes."""
    w = np.ones(len(classes)) if weights is None else np.asarray(weights, dtype=np.float64)
    quota = w / w.sum() * n
    counts = np.floor(quota).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return dict(zip(classes, counts.tolist()))


def generate_dataset(
    n: int,
    classes: Sequence[str] = SOURCE_CLASSES,
    seed: int = 0,
    resolution: int = 32,
    weights: Sequence[float] | None = None,
    depth_range: tuple[float, float] | None = DEPTH_RANGE,
) -> TupleDataset:
    """Render n scenes with an exact class mix; depth normalized with a fixed range by default."""
    counts = class_counts(n, classes, weights)
    labels = np.concatenate([[c] * k for c, k in counts.items()]) if n else np.array([], dtype=str)
    labels = np.random.default_rng(seed).permutation(labels).tolist()
    rgb, depth, normal = [], [], []
    for i, cls in enumerate(labels):
        s = generate_scene(seed * 1_000_003 + i, resolution, cls)
        rgb.append(s.rgb)
        if depth_range is None:
            depth.append(normalize_depth(s.depth))
        else:
            depth.append(np.clip(normalize_depth(s.depth, *depth_range), -1, 1))
        normal.append(s.normal)
    images = {
        "rgb": torch.from_numpy(np.stack(rgb)).float(),
        "depth": torch.from_numpy(np.stack(depth)).float(),
        "normal": torch.from_numpy(np.stack(normal)).float(),
    }
    meta = {"depth_range": list(depth_range) if depth_range else None, "pixel_size": IMAGE_EXTENT / resolution}
    return TupleDataset(images, labels, torch.ones(len(labels), dtype=torch.bool), meta)


@dataclass
class DomainSplit:
    source: TupleDataset
    target_paired: TupleDataset
    target_unpaired: TupleDataset


def paired_count(n: int, pct: float) -> int:
    return math.ceil(round(pct * n / 100.0, 9))


def split_domains(
    dataset: TupleDataset,
    holdout_class: str,
    paired_pct: float,
    seed: int = 0,
    color_modalities: Sequence[str] = ("rgb",),
) -> DomainSplit:
    """Hold out one class; keep non-color modalities on ceil(pct% * N) of its samples."""
    if holdout_class not in set(dataset.classes):
        raise KeyError(f"class {holdout_class!r} not in dataset")
    if not 0 < paired_pct <= 100:
        raise ValueError(f"paired_pct must lie in (0, 100], got {paired_pct}")
    target = [i for i, c in enumerate(dataset.classes) if c == holdout_class]
    source = [i for i, c in enumerate(dataset.classes) if c != holdout_class]
    perm = np.random.default_rng(seed).permutation(target).tolist()
    k = paired_count(len(target), paired_pct)
    paired = dataset.subset(sorted(perm[:k]))
    unpaired = dataset.subset(sorted(perm[k:]))
    for name in unpaired.images:
        if name not in color_modalities:
            unpaired.images[name] = torch.zeros_like(unpaired.images[name])
    unpaired.paired = torch.zeros(len(unpaired), dtype=torch.bool)
    return DomainSplit(dataset.subset(source), paired, unpaired)


# -- files: manifest, export, loading ------------------------------------------------


class DataError(RuntimeError):
    pass


def _encode_normal(n: np.ndarray) -> np.ndarray:
    return np.clip(np.round((n + 1) / 2 * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _encode_rgb(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((x + 1) / 2 * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_depth_png(path: Path, raw: np.ndarray) -> dict:
    """16-bit PNG using the full code range plus a JSON sidecar with the raw extremes."""
    raw = np.asarray(raw, dtype=np.float64).reshape(raw.shape[-2:])
    lo, hi = float(raw.min()), float(raw.max())
    span = hi - lo if hi > lo else 1.0
    codes = np.round((raw - lo) / span * 65535).astype(np.uint16)
    Image.fromarray(codes).save(path)
    meta = {"dmin": lo, "dmax": hi}
    path.with_suffix(".json").write_text(json.dumps(meta))
    return meta


def read_depth_png(path: Path) -> np.ndarray:
    """Raw depth [H, W]; decoded through the sidecar when present, else the 16-bit codes."""
    codes = np.asarray(Image.open(path), dtype=np.float64)
    if codes.ndim == 3:
        codes = codes[..., 0]
    sidecar = path.with_suffix(".json")
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text())
        return meta["dmin"] + codes / 65535.0 * (meta["dmax"] - meta["dmin"])
    return codes


def export_sample(
    out_dir: Path,
    sample_id: str,
    scene_class: str,
    tup: dict[str, np.ndarray],
    depth_range: tuple[float, float] | None,
) -> dict:
    """Write one normalized tuple ([C, H, W] arrays) as PNGs and return its manifest record."""
    out_dir = Path(out_dir)
    rec = {"id": sample_id, "class": scene_class, "rgb": None, "depth": None, "normal": None}
    for name, img in tup.items():
        img = np.asarray(img)
        rel = f"{name}/{sample_id}.png"
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if name == "depth":
            lo, hi = depth_range if depth_range else (0.0, 65535.0)
            write_depth_png(path, denormalize_depth(img, lo, hi))
        elif name == "normal":
            Image.fromarray(_encode_normal(img)).save(path)
        elif name == "rgb":
            Image.fromarray(_encode_rgb(img)).save(path)
        else:
            continue
        rec[name] = rel
    return rec


def write_manifest(path: Path, records: list[dict], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    if meta is not None:
        path.with_name("dataset.json").write_text(json.dumps(meta, indent=2))
    return path


def export_dataset(dataset: TupleDataset, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    rng = dataset.meta.get("depth_range")
    records = []
    for i in range(len(dataset)):
        tup = {k: v[i].numpy() for k, v in dataset.images.items()}
        if not bool(dataset.paired[i]):
            tup = {"rgb": tup["rgb"]}
        records.append(export_sample(out_dir, f"{i:06d}", dataset.classes[i], tup, tuple(rng) if rng else None))
    return write_manifest(out_dir / "manifest.jsonl", records, dataset.meta)


def _resize(img: np.ndarray, res: int) -> np.ndarray:
    """[C, H, W] float -> [C, res, res] via per-channel bilinear resampling."""
    if img.shape[-1] == res and img.shape[-2] == res:
        return img
    return np.stack(
        [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((res, res), Image.BILINEAR)) for c in img]
    )


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1) / 255.0 * 2 - 1


def load_external(
    manifest: str | Path,
    resolution: int,
    depth_range: tuple[float, float] | None | str = "auto",
) -> Iterator[dict]:
    """Stream normalized tuples from a JSON-lines manifest.

    Each record has ``id``, ``class``, ``rgb`` and optional ``depth``/``normal``
    paths relative to the manifest.  ``depth_range="auto"`` uses the range in
    a sibling ``dataset.json`` when present, otherwise per-image min/max.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    root = manifest.parent
    if depth_range == "auto":
        meta_path = root / "dataset.json"
        meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
        depth_range = tuple(meta["depth_range"]) if meta.get("depth_range") else None
    with manifest.open() as fh:
        lines = [ln for ln in fh if ln.strip()]
    for lineno, line in enumerate(lines, 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest}:{lineno}: malformed record ({exc})") from None
        if not rec.get("rgb"):
            raise DataError(f"{manifest}:{lineno}: record {rec.get('id')!r} has no rgb path")
        images = {}
        for name in ("rgb", "depth", "normal"):
            rel = rec.get(name)
            if not rel:
                continue
            path = root / rel
            if not path.is_file():
                raise DataError(f"sample {rec.get('id')!r}: missing {name} file {path}")
            if name == "depth":
                try:
                    raw = read_depth_png(path)
                except (OSError, ValueError) as exc:
                    raise DataError(f"cannot read depth {path}: {exc}") from None
                norm = normalize_depth(raw) if depth_range is None else normalize_depth(raw, *depth_range)
                img = norm[None]
            else:
                img = _read_image(path)
            images[name] = _resize(img, resolution).astype(np.float32)
        shapes = {k: v.shape[-2:] for k, v in images.items()}
        if len(set(shapes.values())) != 1:
            raise DataError(f"sample {rec.get('id')!r}: modality shapes differ {shapes}")
        yield {
            "id": rec.get("id"),
            "class": rec.get("class", ""),
            "images": images,
            "paired": "depth" in images,
        }


def load_dataset(
    manifest: str | Path,
    resolution: int,
    modalities: Sequence[str] = ("rgb", "depth", "normal"),
    channels: dict[str, int] | None = None,
    depth_range: tuple[float, float] | None | str = "auto",
) -> TupleDataset:
    channels = channels or {"rgb": 3, "depth": 1, "normal": 3}
    imgs = {m: [] for m in modalities}
    classes, paired = [], []
    for sample in load_external(manifest, resolution, depth_range):
        full = all(m in sample["images"] for m in modalities)
        for m in modalities:
            img = sample["images"].get(m)
            imgs[m].append(img if img is not None else np.zeros((channels[m], resolution, resolution), np.float32))
        classes.append(sample["class"])
        paired.append(full)
    meta_path = Path(manifest).parent / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    return TupleDataset(
        {m: torch.from_numpy(np.stack(v)) for m, v in imgs.items()},
        classes,
        torch.tensor(paired, dtype=torch.bool),
        meta,
    )
