"""Datasets: CIFAR-10 binary records and a procedural shapes dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_SHAPE = (3, 32, 32)


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


# -- CIFAR-10 binary ----------------------------------------------------------


def load_cifar10_binary(
    path: str | Path, image_shape: tuple[int, int, int] = CIFAR_SHAPE, num_classes: int = 10
) -> Dataset:
    """Read records of one label byte followed by channel-planar, row-major pixels."""
    raw = Path(path).read_bytes()
    rec = 1 + int(np.prod(image_shape))
    if len(raw) % rec:
        whole = len(raw) // rec
        raise DataError(f"{path}: truncated record at byte offset {whole * rec} (record size {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise DataError(f"{path}: label byte {labels[bad[0]]} >= {num_classes} at byte offset {bad[0] * rec}")
    images = arr[:, 1:].reshape((-1,) + tuple(image_shape)).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes, Path(path).stem)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_cifar10_binary(path: str | Path, dataset: Dataset) -> None:
    pixels = to_bytes(dataset.images).reshape(len(dataset), -1)
    if len(dataset) and dataset.labels.max() > 255:
        raise DataError("labels do not fit in one byte")
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def write_manifest(path: str | Path, dataset: Dataset, **extra) -> None:
    meta = {"name": dataset.name, "image_shape": list(dataset.image_shape), "num_classes": dataset.num_classes,
            "count": len(dataset), **extra}
    Path(path).write_text(json.dumps(meta, indent=2))


def load_dataset(path: str | Path) -> Dataset:
    """Load a binary dataset, honoring a ``<path>.json`` sidecar manifest if present."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        ds = load_cifar10_binary(path, tuple(meta["image_shape"]), int(meta["num_classes"]))
        ds.name = meta.get("name", ds.name)
        return ds
    return load_cifar10_binary(path)


# -- procedural shapes ----------------------------------------------------------


def _disk(yy, xx, r):
    return (np.hypot(yy, xx) <= r).astype(np.float64)


def _square_outline(yy, xx, r):
    m = np.maximum(np.abs(yy), np.abs(xx))
    return ((m <= r) & (m >= r - max(1.5, 0.3 * r))).astype(np.float64)


def _stripes(yy, xx, r, rng):
    period = 4.0
    phase = rng.uniform(0, period)
    inside = np.maximum(np.abs(yy), np.abs(xx)) <= r
    return (inside & (((yy + xx + phase) % period) < period / 2)).astype(np.float64)


def _checker(yy, xx, r, rng):
    cell = 2.0
    oy, ox = rng.uniform(0, 2 * cell, size=2)
    inside = np.maximum(np.abs(yy), np.abs(xx)) <= r
    check = (np.floor((yy + oy) / cell) + np.floor((xx + ox) / cell)) % 2 == 0
    return (inside & check).astype(np.float64)


def _cross(yy, xx, r):
    w = max(1.0, 0.3 * r)
    return (((np.abs(yy) <= w) & (np.abs(xx) <= r)) | ((np.abs(xx) <= w) & (np.abs(yy) <= r))).astype(np.float64)


def _ring(yy, xx, r):
    d = np.hypot(yy, xx)
    return ((d <= r) & (d >= r - max(1.5, 0.35 * r))).astype(np.float64)


def _hbars(yy, xx, r, rng):
    period = 4.0
    phase = rng.uniform(0, period)
    inside = np.maximum(np.abs(yy), np.abs(xx)) <= r
    return (inside & (((yy + phase) % period) < period / 2)).astype(np.float64)


def _triangle(yy, xx, r):
    return ((yy <= r * 0.8) & (yy >= -r) & (np.abs(xx) <= (yy + r) * 0.6)).astype(np.float64)


SHAPES = ["disk", "square", "stripes", "checker", "cross", "ring", "hbars", "triangle"]
_RENDER = {
    "disk": lambda yy, xx, r, rng: _disk(yy, xx, r),
    "square": lambda yy, xx, r, rng: _square_outline(yy, xx, r),
    "stripes": _stripes,
    "checker": _checker,
    "cross": lambda yy, xx, r, rng: _cross(yy, xx, r),
    "ring": lambda yy, xx, r, rng: _ring(yy, xx, r),
    "hbars": _hbars,
    "triangle": lambda yy, xx, r, rng: _triangle(yy, xx, r),
}


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    size: int = 16
    samples_per_class: int = 500
    seed: int = 0
    channels: int = 3
    pixel_noise: float = 0.02
    min_contrast: float = 0.3
    max_contrast: float = 0.6
    texture: float = 0.03  # amplitude of the fine class-specific overlay; 0 disables it


# period-2 overlays and channel sign patterns; distinct up to sign, so no phase
# shift turns one class's overlay into another's
_TEXTURE_PATTERNS = ("checker", "vbars", "hbars")
_TEXTURE_SIGNS = ((1, 1, 1), (1, 1, -1), (1, -1, 1), (-1, 1, 1))


def _texture(label: int, yy: np.ndarray, xx: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
    kind = _TEXTURE_PATTERNS[(label // len(_TEXTURE_SIGNS)) % len(_TEXTURE_PATTERNS)]
    signs = np.resize(np.array(_TEXTURE_SIGNS[label % len(_TEXTURE_SIGNS)], dtype=np.float64), channels)
    iy, ix = yy.astype(np.int64) + rng.integers(0, 2), xx.astype(np.int64) + rng.integers(0, 2)
    wave = {"checker": iy + ix, "vbars": ix, "hbars": iy}[kind]
    return signs[:, None, None] * np.where(wave % 2 == 0, 1.0, -1.0)[None]


def _render_one(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h = spec.size
    c = spec.channels
    r = h * rng.uniform(0.22, 0.36)
    cy, cx = (h - 1) / 2 + rng.uniform(-h / 7, h / 7, size=2)
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    yy, xx = yy - cy, xx - cx
    mask = _RENDER[SHAPES[label]](yy, xx, r, rng)
    bg = rng.uniform(0.15, 0.85, size=c)
    contrast = rng.uniform(spec.min_contrast, spec.max_contrast) * rng.choice([-1.0, 1.0])
    fg = np.clip(bg.mean() + contrast + rng.uniform(-0.15, 0.15, size=c), 0.0, 1.0)
    # shading gradient across the background
    tilt = rng.uniform(-0.1, 0.1, size=2)
    shade = (tilt[0] * yy + tilt[1] * xx) / h
    img = bg[:, None, None] + shade[None] + (fg - bg)[:, None, None] * mask[None]
    if spec.texture > 0:
        grid_y, grid_x = np.mgrid[0:h, 0:h]
        img = img + spec.texture * _texture(label, grid_y, grid_x, c, rng)
    img = img + spec.pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Render a balanced, seeded dataset of class-dependent shapes and textures."""
    if spec.classes < 2:
        raise DataError("need at least 2 classes")
    if spec.classes > len(SHAPES):
        raise DataError(f"at most {len(SHAPES)} classes available, asked for {spec.classes}")
    if not 0.0 <= spec.min_contrast <= spec.max_contrast <= 1.0:
        raise DataError("need 0 <= min_contrast <= max_contrast <= 1")
    if not 0.0 <= spec.texture <= 0.5:
        raise DataError("texture amplitude must lie in [0, 0.5]")
    rng = np.random.default_rng(spec.seed)
    n = spec.classes * spec.samples_per_class
    labels = np.tile(np.arange(spec.classes), spec.samples_per_class)
    labels = labels[rng.permutation(n)]
    images = np.stack([_render_one(int(lab), spec, rng) for lab in labels]).astype(np.float32)
    return Dataset(images, labels, spec.classes, f"synthetic-k{spec.classes}-s{spec.size}-seed{spec.seed}")


_FLOAT_FIELDS = ("pixel_noise", "min_contrast", "max_contrast", "texture")


def parse_data_arg(arg: str) -> Dataset:
    """``synthetic[:key=value,...]`` or a path to a binary record file."""
    if arg.startswith("synthetic"):
        fields = {}
        if ":" in arg:
            for item in arg.split(":", 1)[1].split(","):
                if not item:
                    continue
                k, _, v = item.partition("=")
                k = k.strip()
                try:
                    fields[k] = float(v) if k in _FLOAT_FIELDS else int(v)
                except ValueError:
                    raise DataError(f"bad value {v!r} for {k} in {arg!r}") from None
        try:
            return gen_synthetic(SyntheticSpec(**fields))
        except TypeError as exc:
            raise DataError(f"bad synthetic spec {arg!r}: {exc}") from exc
    return load_dataset(arg)
