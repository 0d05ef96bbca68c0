"""Evaluation: corruption error tables, mCE, calibration, sigma probes, distances."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attacks import AttackConfig, ThreatModel, fgsm, gaussian_noise, perturb, pgd
from .corruptions import CATEGORY, CorruptedSet
from .data import Dataset
from .model import per_sample_loss

SEVERITIES = (1, 2, 3, 4, 5)


def logits_of(model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits from a ModelGraph or any callable ``images -> logits``."""
    images = np.asarray(images, dtype=np.float32)
    if hasattr(model, "run"):
        if len(images) == 0:
            return np.zeros((0, model.num_classes), dtype=np.float32)
        return np.concatenate(
            [model.run(images[i : i + batch_size])["logits"] for i in range(0, len(images), batch_size)]
        )
    return np.asarray(model(images))


def accuracy(model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(logits_of(model, dataset.images).argmax(axis=1) == dataset.labels))


# -- corruption tables ------------------------------------------------------------


@dataclass
class CorruptionErrorTable:
    """Top-1 error per corruption kind at severities 1..5, plus the clean error."""

    errors: dict[str, list[float]]
    clean_error: float

    def __post_init__(self):
        for kind, row in self.errors.items():
            if len(row) != 5:
                raise ValueError(f"{kind}: expected 5 severities, got {len(row)}")
            if any(not 0.0 <= e <= 1.0 for e in row):
                raise ValueError(f"{kind}: error rates must lie in [0, 1]")
        if not 0.0 <= self.clean_error <= 1.0:
            raise ValueError("clean error must lie in [0, 1]")

    @property
    def kinds(self) -> list[str]:
        return list(self.errors)

    def to_dict(self) -> dict:
        return {"errors": {k: list(v) for k, v in self.errors.items()}, "clean_error": self.clean_error}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorruptionErrorTable":
        return cls({k: [float(e) for e in v] for k, v in d["errors"].items()}, float(d["clean_error"]))


def corruption_table(
    model,
    stream: Iterable[tuple[np.ndarray, int, str, int]] | CorruptedSet,
    clean: Dataset | None = None,
    kinds: Sequence[str] | None = None,
) -> CorruptionErrorTable:
    """Per-(kind, severity) error rates from a stream of corrupted samples.

    ``clean`` supplies the clean error; a :class:`CorruptedSet` carries its own.
    """
    if isinstance(stream, CorruptedSet):
        clean = clean if clean is not None else stream.clean
        labels = stream.clean.labels
        cells = {
            cell: float(np.mean(logits_of(model, imgs).argmax(axis=1) != labels))
            for cell, imgs in stream.cells.items()
        }
    else:
        buckets: dict[tuple[str, int], list] = defaultdict(list)
        for img, label, kind, sev in stream:
            buckets[(kind, int(sev))].append((img, label))
        cells = {}
        for cell, items in buckets.items():
            imgs = np.stack([i for i, _ in items])
            labs = np.array([l for _, l in items])
            cells[cell] = float(np.mean(logits_of(model, imgs).argmax(axis=1) != labs))
    kinds = list(kinds) if kinds is not None else list(dict.fromkeys(k for k, _ in cells))
    errors = {}
    for kind in kinds:
        row = []
        for s in SEVERITIES:
            if (kind, s) not in cells:
                raise ValueError(f"missing cell ({kind}, severity {s})")
            row.append(cells[(kind, s)])
        errors[kind] = row
    clean_error = 1.0 - accuracy(model, clean) if clean is not None else 0.0
    return CorruptionErrorTable(errors, clean_error)


def avg_corruption_accuracy(table: CorruptionErrorTable) -> float:
    return 1.0 - float(np.mean([e for row in table.errors.values() for e in row]))


def _common_kinds(table: CorruptionErrorTable, baseline: CorruptionErrorTable) -> list[str]:
    if set(table.errors) != set(baseline.errors):
        raise ValueError("tables cover different corruption kinds")
    return table.kinds


def mce(table: CorruptionErrorTable, baseline: CorruptionErrorTable) -> float:
    """Mean over kinds of summed errors, normalized by the baseline's summed errors."""
    ratios = []
    for kind in _common_kinds(table, baseline):
        denom = sum(baseline.errors[kind])
        if denom == 0:
            raise ValueError(f"baseline error sum is zero for {kind}")
        ratios.append(sum(table.errors[kind]) / denom)
    return float(np.mean(ratios))


def relative_mce(table: CorruptionErrorTable, baseline: CorruptionErrorTable) -> float:
    """Like :func:`mce` but on degradation relative to each model's clean error."""
    ratios = []
    for kind in _common_kinds(table, baseline):
        denom = sum(baseline.errors[kind]) - 5 * baseline.clean_error
        if denom == 0:
            raise ValueError(f"baseline degradation is zero for {kind}")
        ratios.append((sum(table.errors[kind]) - 5 * table.clean_error) / denom)
    return float(np.mean(ratios))


# -- calibration ----------------------------------------------------------------


@dataclass
class CalibrationReport:
    ece: float
    bin_count: int
    temperature: float = 1.0
    bins: list[tuple[float, float, float]] = field(default_factory=list)  # (confidence, accuracy, weight)


def bin_indices(confidences: np.ndarray, bins: int) -> np.ndarray:
    """Bins are [lo, hi) except the last, which also holds 1.0."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges, confidences, side="right") - 1, 0, bins - 1)


def _ece_value(confidences: np.ndarray, correct: np.ndarray, bins: int) -> float:
    idx = bin_indices(confidences, bins)
    n = len(confidences)
    conf_sum = np.bincount(idx, weights=confidences, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct.astype(np.float64), minlength=bins)
    return float(np.sum(np.abs(acc_sum - conf_sum)) / n)


def ece(confidences, correctness, bins: int = 15) -> CalibrationReport:
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=bool)
    if conf.size == 0:
        raise ValueError("ECE of an empty prediction set is undefined")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness differ in length")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_indices(conf, bins)
    n = len(conf)
    triples = []
    total = 0.0
    for b in range(bins):
        sel = idx == b
        k = int(sel.sum())
        if k == 0:
            triples.append((0.0, 0.0, 0.0))
            continue
        c, a, w = float(conf[sel].mean()), float(corr[sel].mean()), k / n
        triples.append((c, a, w))
        total += w * abs(a - c)
    return CalibrationReport(total, bins, 1.0, triples)


def _max_prob(z: np.ndarray, t: float) -> np.ndarray:
    # z is max-shifted, so the top class contributes exp(0) = 1
    return 1.0 / np.exp(z / t).sum(axis=1)


def calibration_inputs(logits: np.ndarray, labels: np.ndarray, t: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Top-class confidence of softmax(logits / t) and whether the top class is right."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    return _max_prob(z, t), logits.argmax(axis=1) == np.asarray(labels)


def temperature_grid(step: float = 0.001) -> np.ndarray:
    """1.0 first, then t and 1/t for t on the grid (0, 1]."""
    n = int(round(1.0 / step))
    ts = np.arange(1, n + 1) * step
    rest = np.concatenate([ts[:-1], 1.0 / ts[:-1]])
    return np.concatenate([[1.0], rest])


def temperature_rescale(logits, labels, bins: int = 15, step: float = 0.001) -> tuple[float, CalibrationReport]:
    """Grid search for the softmax temperature minimizing ECE.

    Ties (within 1e-12) keep the earlier grid entry, so t = 1 wins whenever
    it is optimal.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if len(logits) == 0:
        raise ValueError("temperature rescaling needs at least one sample")
    correct = logits.argmax(axis=1) == labels
    z = logits - logits.max(axis=1, keepdims=True)
    best_t, best = 1.0, np.inf
    for t in temperature_grid(step):
        value = _ece_value(_max_prob(z, t), correct, bins)
        if value < best - 1e-12:
            best_t, best = float(t), value
    conf, corr = calibration_inputs(logits, labels, best_t)
    report = ece(conf, corr, bins)
    report.temperature = best_t
    return best_t, report


def model_ece(model, images: np.ndarray, labels: np.ndarray, t: float = 1.0, bins: int = 15) -> float:
    conf, corr = calibration_inputs(logits_of(model, images), labels, t)
    return ece(conf, corr, bins).ece


# -- sigma probe ----------------------------------------------------------------


@dataclass
class SigmaCurve:
    grid: list[float]
    losses: list[float]
    mode: str = "gaussian"

    @property
    def argmin(self) -> float:
        return self.grid[int(np.argmin(self.losses))]


def sigma_probe(
    model,
    dataset: Dataset,
    grid: Sequence[float],
    mode: str = "gaussian",
    samples_per_point: int = 1,
    seed: int = 0,
) -> SigmaCurve:
    """Mean cross-entropy under additive noise of each magnitude in ``grid``.

    ``mode="sphere"`` draws noise uniformly on the sphere of radius sigma*sqrt(d).
    Perturbed inputs are clipped to [0, 1].
    """
    grid = [float(s) for s in grid]
    if not grid or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("sigma grid must be non-empty and sorted ascending")
    if mode not in ("gaussian", "sphere"):
        raise ValueError(f"unknown probe mode {mode!r}")
    rng = np.random.default_rng(seed)
    x, y = dataset.images, dataset.labels
    losses = []
    for sigma in grid:
        if sigma == 0:
            losses.append(float(per_sample_loss(logits_of(model, x), y).mean()))
            continue
        vals = []
        for _ in range(samples_per_point):
            noise = gaussian_noise(x.shape, sigma, mode == "sphere", rng)
            vals.append(per_sample_loss(logits_of(model, perturb(x, noise.astype(np.float32))), y).mean())
        losses.append(float(np.mean(vals)))
    return SigmaCurve(grid, losses, mode)


# -- distances and correlation ------------------------------------------------------


@dataclass
class DistanceTable:
    metric: str
    distances: dict[str, list[float]]  # kind -> mean distance per severity

    @property
    def non_monotone(self) -> dict[str, list[int]]:
        """Severities whose mean distance does not exceed the previous severity's."""
        flags = {}
        for kind, row in self.distances.items():
            bad = [s + 2 for s in range(len(row) - 1) if not row[s + 1] > row[s]]
            if bad:
                flags[kind] = bad
        return flags


def l2_distance(x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    d = (np.asarray(x, np.float64) - np.asarray(x2, np.float64)).reshape(len(x), -1)
    return np.sqrt(np.sum(d * d, axis=1))


def distance_stats(
    corrupted: CorruptedSet, metric: str | Callable[[np.ndarray, np.ndarray], np.ndarray] = "l2"
) -> DistanceTable:
    """Mean distance between clean and corrupted images per (kind, severity).

    ``metric`` is ``"l2"`` or a batched callable such as ``functools.partial(lpips, cfg)``.
    """
    fn = l2_distance if metric == "l2" else metric
    name = metric if isinstance(metric, str) else getattr(metric, "name", "lpips")
    clean = corrupted.clean.images
    rows: dict[str, list[float]] = {}
    for kind in corrupted.kinds:
        rows[kind] = [float(np.mean(fn(clean, corrupted.cells[(kind, s)]))) for s in SEVERITIES]
    return DistanceTable(name, rows)


def pearson(a: Sequence[float], b: Sequence[float]) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0:
        return None
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


@dataclass
class CorrelationReport:
    per_kind: dict[str, float | None]
    per_category: dict[str, float | None]
    overall: float | None


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def distance_error_correlation(
    distances: DistanceTable, errors: CorruptionErrorTable, categories: Mapping[str, str] = CATEGORY
) -> CorrelationReport:
    """Pearson correlation between per-severity distances and error rates, per kind."""
    if set(distances.distances) != set(errors.errors):
        raise ValueError("distance and error tables cover different kinds")
    per_kind = {k: pearson(distances.distances[k], errors.errors[k]) for k in errors.errors}
    by_cat: dict[str, list] = defaultdict(list)
    for k, r in per_kind.items():
        by_cat[categories.get(k, "other")].append(r)
    return CorrelationReport(
        per_kind, {c: _mean_defined(v) for c, v in by_cat.items()}, _mean_defined(per_kind.values())
    )


# -- catastrophic overfitting -----------------------------------------------------


@dataclass
class OverfitReport:
    fgsm_acc: float
    pgd10_acc: float
    gap: float
    flagged: bool


def catastrophic_overfitting_check(
    model, dataset: Dataset, eps: float, threshold: float = 0.2, batch_size: int = 250, seed: int = 0
) -> OverfitReport:
    """Robust accuracy under l-inf FGSM and 10-step PGD at the same radius."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        acc = accuracy(model, dataset)
        return OverfitReport(acc, acc, 0.0, False)
    rng = np.random.default_rng(seed)
    cfg = AttackConfig(ThreatModel(np.inf, eps), steps=10, step_size=eps / 4, init="random")
    hits_f = hits_p = 0
    for i in range(0, len(dataset), batch_size):
        x, y = dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size]
        d_f = fgsm(model, x, y, eps)
        d_p = pgd(model, x, y, cfg, rng=rng)
        hits_f += int(np.sum(logits_of(model, perturb(x, d_f)).argmax(1) == y))
        hits_p += int(np.sum(logits_of(model, perturb(x, d_p)).argmax(1) == y))
    fa, pa = hits_f / len(dataset), hits_p / len(dataset)
    return OverfitReport(fa, pa, fa - pa, (fa - pa) > threshold)
