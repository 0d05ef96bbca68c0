"""Procedural common corruptions at five severities.

Every generator maps a ``(C, H, W)`` image in [0, 1] to another image in [0, 1]
and is deterministic given its seed. The severity table below is frozen; its
values are specific to this package and are not comparable to the published
CIFAR-10-C / ImageNet-C parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .data import Dataset, write_cifar10_binary

RAMP_VERSION = 1

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "brightness",
    "contrast",
    "pixelate",
    "elastic",
)

CATEGORY = {
    "gaussian_noise": "noise",
    "shot_noise": "noise",
    "impulse_noise": "noise",
    "defocus_blur": "blur",
    "motion_blur": "blur",
    "brightness": "weather",
    "contrast": "digital",
    "pixelate": "digital",
    "elastic": "digital",
}

VALIDATION_KINDS = ("motion_blur", "elastic")

# kind -> five parameter tuples, severity 1..5
SEVERITY_RAMP: dict[str, tuple[tuple[float, ...], ...]] = {
    "gaussian_noise": ((0.04,), (0.08,), (0.12,), (0.18,), (0.26,)),  # sigma
    "shot_noise": ((60,), (25,), (12,), (6,), (3,)),  # photons at full intensity
    "impulse_noise": ((0.01,), (0.03,), (0.06,), (0.10,), (0.17,)),  # salt-and-pepper rate
    "defocus_blur": ((0.75,), (1.0,), (1.5,), (2.0,), (2.5,)),  # disk radius (px)
    "motion_blur": ((2.0,), (3.0,), (4.0,), (6.0,), (8.0,)),  # line length (px)
    "brightness": ((0.1,), (0.2,), (0.3,), (0.4,), (0.5,)),  # additive offset
    "contrast": ((0.6,), (0.45,), (0.3,), (0.2,), (0.12,)),  # scale about the mean
    "pixelate": ((1.5,), (2.0,), (2.5,), (3.0,), (4.0,)),  # downscale factor
    "elastic": ((0.6, 1.5), (1.0, 1.5), (1.4, 1.5), (1.8, 1.5), (2.4, 1.5)),  # rms shift (px), smoothing
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_RAMP:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def severity_params(kind: str, severity: int) -> tuple[float, ...]:
    if kind not in SEVERITY_RAMP:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return SEVERITY_RAMP[kind][severity - 1]


def dominant_strength(kind: str, severity: int) -> float:
    """Scalar that grows with corruption strength for ``kind``."""
    p = severity_params(kind, severity)[0]
    if kind == "shot_noise":
        return 1.0 / p
    if kind == "contrast":
        return 1.0 - p
    return float(p)


# -- individual generators --------------------------------------------------------


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def shot_noise(img: np.ndarray, photons: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(rng.poisson(np.clip(img, 0, 1) * photons) / photons, 0.0, 1.0)


def impulse_noise(img: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    if rate <= 0:
        return out
    hit = rng.uniform(size=img.shape) < rate
    salt = rng.uniform(size=img.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.clip(radius + 0.5 - np.hypot(yy, xx), 0.0, 1.0)
    return k / k.sum()


def line_kernel(length: float, angle: float) -> np.ndarray:
    r = int(np.ceil(length / 2)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for t in np.linspace(-length / 2, length / 2, int(4 * length) + 1):
        y, x = r + t * np.sin(angle), r + t * np.cos(angle)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                k[y0 + dy, x0 + dx] += wy * wx
    return k / k.sum()


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in img])


def defocus_blur(img: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(_filter(img, disk_kernel(radius)), 0.0, 1.0)


def motion_blur(img: np.ndarray, length: float, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, np.pi)
    return np.clip(_filter(img, line_kernel(length, angle)), 0.0, 1.0)


def brightness(img: np.ndarray, offset: float) -> np.ndarray:
    return np.clip(img + offset, 0.0, 1.0)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def _area_matrix(n: int, m: int) -> np.ndarray:
    """(m, n) matrix averaging n source pixels into m bins by overlap."""
    edges = np.arange(m + 1) * (n / m)
    a = np.zeros((m, n))
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), min(n, int(np.ceil(hi)))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
    return a / a.sum(axis=1, keepdims=True)


def pixelate(img: np.ndarray, factor: float) -> np.ndarray:
    """Block-average downscale by ``factor`` then nearest-neighbour upscale."""
    c, h, w = img.shape
    mh, mw = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    if (mh, mw) == (h, w):
        return img.copy()
    ah, aw = _area_matrix(h, mh), _area_matrix(w, mw)
    small = np.einsum("ih,chw,jw->cij", ah, img, aw)
    rows = np.minimum((np.arange(h) * mh) // h, mh - 1)
    cols = np.minimum((np.arange(w) * mw) // w, mw - 1)
    return np.clip(small[:, rows][:, :, cols], 0.0, 1.0)


def elastic(img: np.ndarray, amplitude: float, smoothing: float, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), smoothing, mode="reflect")
        rms = np.sqrt(np.mean(f**2))
        fields.append(f / rms * amplitude if rms > 0 else f)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + fields[0], xx + fields[1]]
    out = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="reflect") for ch in img])
    return np.clip(out, 0.0, 1.0)


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to one ``(C, H, W)`` image."""
    img = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    p = severity_params(spec.kind, spec.severity)
    k = spec.kind
    if k == "gaussian_noise":
        out = gaussian_noise(img, p[0], rng)
    elif k == "shot_noise":
        out = shot_noise(img, p[0], rng)
    elif k == "impulse_noise":
        out = impulse_noise(img, p[0], rng)
    elif k == "defocus_blur":
        out = defocus_blur(img, p[0])
    elif k == "motion_blur":
        out = motion_blur(img, p[0], rng)
    elif k == "brightness":
        out = brightness(img, p[0])
    elif k == "contrast":
        out = contrast(img, p[0])
    elif k == "pixelate":
        out = pixelate(img, p[0])
    else:
        out = elastic(img, p[0], p[1], rng)
    return out.astype(np.asarray(image).dtype if np.asarray(image).dtype.kind == "f" else np.float32)


def item_seed(seed: int, index: int, kind: str, severity: int) -> int:
    ss = np.random.SeedSequence([seed, index, KINDS.index(kind), severity])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def corrupt_dataset(
    dataset: Dataset, kinds: Iterable[str], severities: Iterable[int], seed: int = 0
) -> Iterator[tuple[np.ndarray, int, str, int]]:
    """Yield ``(image, label, kind, severity)`` for every image, kind and severity."""
    kinds, severities = list(kinds), list(severities)
    for kind in kinds:
        for s in severities:
            for i in range(len(dataset)):
                spec = CorruptionSpec(kind, s, item_seed(seed, i, kind, s))
                yield corrupt(dataset.images[i], spec), int(dataset.labels[i]), kind, s


def corrupt_arrays(dataset: Dataset, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """All images of ``dataset`` under one (kind, severity) cell, same seeds as the stream."""
    return np.stack(
        [corrupt(dataset.images[i], CorruptionSpec(kind, severity, item_seed(seed, i, kind, severity)))
         for i in range(len(dataset))]
    ).astype(np.float32)


@dataclass
class CorruptedSet:
    """Corrupted copies of a dataset keyed by ``(kind, severity)``."""

    clean: Dataset
    cells: dict[tuple[str, int], np.ndarray]
    seed: int = 0

    @classmethod
    def build(cls, dataset: Dataset, kinds=KINDS, severities=(1, 2, 3, 4, 5), seed: int = 0) -> "CorruptedSet":
        cells = {(k, s): corrupt_arrays(dataset, k, s, seed) for k in kinds for s in severities}
        return cls(dataset, cells, seed)

    @property
    def kinds(self) -> list[str]:
        return list(dict.fromkeys(k for k, _ in self.cells))

    def restrict(self, kinds: Iterable[str]) -> "CorruptedSet":
        kinds = set(kinds)
        return CorruptedSet(self.clean, {c: v for c, v in self.cells.items() if c[0] in kinds}, self.seed)


def export_corrupted(
    dataset: Dataset, out_dir: str | Path, kinds=KINDS, severities=(1, 2, 3, 4, 5), seed: int = 0
) -> Path:
    """Write one binary shard per (kind, severity) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards = []
    for kind in kinds:
        for s in severities:
            name = f"{kind}_s{s}.bin"
            imgs = corrupt_arrays(dataset, kind, s, seed)
            write_cifar10_binary(out / name, Dataset(imgs, dataset.labels, dataset.num_classes))
            shards.append({"file": name, "kind": kind, "severity": s, "seed": seed})
    manifest = {
        "ramp_version": RAMP_VERSION,
        "source": dataset.name,
        "image_shape": list(dataset.image_shape),
        "num_classes": dataset.num_classes,
        "count": len(dataset),
        "shards": shards,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
