"""Feature-space (LPIPS-style) distances and a Lagrangian perceptual attack."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import _per_sample, l2_normalize, perturb
from .data import Dataset
from .model import INPUT_TAP, ModelGraph, per_sample_loss


@dataclass(frozen=True)
class LpipsConfig:
    """Weighted feature distance over injection points of a frozen ``extractor``.

    With ``center`` set, each channel's spatial mean is subtracted per sample
    before differencing.
    """

    extractor: ModelGraph
    layers: tuple[int, ...]
    weights: tuple[float, ...]
    center: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        object.__setattr__(self, "weights", tuple(float(a) for a in self.weights))
        if not self.layers:
            raise ValueError("LPIPS needs at least one layer")
        if len(self.layers) != len(self.weights):
            raise ValueError("one weight per layer is required")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("layers must be distinct")
        if any(a < 0 for a in self.weights) or not any(a > 0 for a in self.weights):
            raise ValueError("weights must be nonnegative and not all zero")
        known = {p.layer for p in self.extractor.injection_points}
        missing = [l for l in self.layers if l not in known]
        if missing:
            raise ValueError(f"layers {missing} are not injection points of the extractor")

    @property
    def taps(self) -> tuple[str, ...]:
        return tuple(self.extractor.point(l).tap for l in self.layers)


def identity_lpips_config(extractor: ModelGraph) -> LpipsConfig:
    """Input layer only with unit weight: the distance reduces to plain l2."""
    return LpipsConfig(extractor, (1,), (1.0,))


def reference_lpips_config(extractor: ModelGraph, layers: Iterable[int] | None = None) -> LpipsConfig:
    """Channel-centered features with weights ``1 / (d_l * |L|)`` (per-dimension mean)."""
    points = {p.layer: p for p in extractor.injection_points}
    layers = sorted(points) if layers is None else list(layers)
    weights = [1.0 / (points[l].dim * len(layers)) for l in layers]
    return LpipsConfig(extractor, tuple(layers), tuple(weights), center=True)


def _center(f: np.ndarray) -> np.ndarray:
    if f.ndim < 3:
        return f
    return f - f.mean(axis=tuple(range(2, f.ndim)), keepdims=True)


def _features(cfg: LpipsConfig, x: np.ndarray) -> list[np.ndarray]:
    out = cfg.extractor.run(x)
    feats = [out[t].astype(np.float64) for t in cfg.taps]
    return [_center(f) for f in feats] if cfg.center else feats


def _check_pair(cfg: LpipsConfig, x: np.ndarray, x2: np.ndarray) -> None:
    if x.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x2.shape}")
    if tuple(x.shape[1:]) != tuple(cfg.extractor.input_shape):
        raise ValueError(f"batch shape {x.shape} does not match extractor input {cfg.extractor.input_shape}")


def _distance(cfg: LpipsConfig, fa: Sequence[np.ndarray], fb: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros(len(fa[0]))
    for a, u, v in zip(cfg.weights, fa, fb):
        total += a * np.sum((u - v).reshape(len(u), -1) ** 2, axis=1)
    return np.sqrt(total)


def lpips(cfg: LpipsConfig, x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Per-sample ``sqrt(sum_l a_l * ||phi_l(x) - phi_l(x2)||^2)`` for batches."""
    x, x2 = np.asarray(x), np.asarray(x2)
    _check_pair(cfg, x, x2)
    return _distance(cfg, _features(cfg, x), _features(cfg, x2))


def lpips_grad(
    cfg: LpipsConfig, x: np.ndarray, x2: np.ndarray, ref_feats: Sequence[np.ndarray] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample distances and their gradient with respect to ``x2``.

    Samples at distance zero get a zero gradient.
    """
    ref = ref_feats if ref_feats is not None else _features(cfg, x)
    ext = cfg.extractor
    out = ext.run(x2)
    feats = [out[t].astype(np.float64) for t in cfg.taps]
    if cfg.center:
        feats = [_center(f) for f in feats]
    dist = _distance(cfg, ref, feats)
    inv = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
    seeds: dict[str, np.ndarray] = {}
    for tap, a, f, r in zip(cfg.taps, cfg.weights, feats, ref):
        # centering is an orthogonal projection, so it is its own adjoint
        diff = f - r
        g = a * (_center(diff) if cfg.center else diff) * _per_sample(inv, diff.ndim)
        seeds[tap] = g.astype(ext.graph.dtype)
    grads = ext.graph.backward_from(seeds, [INPUT_TAP])
    return dist, grads[INPUT_TAP]


@dataclass(frozen=True)
class LpaConfig:
    eps: float
    lambdas: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    steps: int = 20
    step_size: float = 0.1
    bisection_steps: int = 10

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not self.lambdas:
            raise ValueError("at least one multiplier is required")
        if any(v <= 0 for v in self.lambdas) or list(self.lambdas) != sorted(self.lambdas):
            raise ValueError("multipliers must be positive and ascending")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


def lpa_trajectory(
    model: ModelGraph, cfg: LpipsConfig, x: np.ndarray, y: np.ndarray, lam: float, lpa: LpaConfig,
    ref_feats: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Iterates of normalized gradient ascent on ``loss - lam * max(lpips - eps, 0)``."""
    ref = ref_feats if ref_feats is not None else _features(cfg, x)
    b = len(x)
    delta = np.zeros_like(x)
    path = [delta]
    for _ in range(lpa.steps):
        xa = perturb(x, delta)
        _, grads = model.loss_grad(xa, y)
        g = grads[INPUT_TAP].astype(np.float64) * b  # per-sample loss gradient
        if np.isfinite(lpa.eps):
            dist, dg = lpips_grad(cfg, x, xa, ref)
            active = (dist > lpa.eps).astype(np.float64)
            g = g - lam * _per_sample(active, g.ndim) * dg
        delta = (perturb(x, delta + lpa.step_size * l2_normalize(g)) - x).astype(x.dtype)
        path.append(delta)
    return path


def _shrink_to_feasible(cfg, x, delta, eps, ref, iters) -> np.ndarray:
    """Largest ``s`` in [0, 1] (to bisection precision) with ``lpips(x, x + s*delta) <= eps``."""
    lo = np.zeros(len(x))
    hi = np.ones(len(x))
    for _ in range(iters):
        mid = (lo + hi) / 2
        d = _distance(cfg, ref, _features(cfg, x + _per_sample(mid, x.ndim).astype(x.dtype) * delta))
        ok = d <= eps
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return lo


def lpa_attack(
    model: ModelGraph, cfg: LpipsConfig, x: np.ndarray, y: np.ndarray, lpa: LpaConfig
) -> np.ndarray:
    """Highest-loss perturbation with ``lpips(x, x + delta) <= eps`` over the multiplier sweep.

    Samples with no feasible candidate take the least-violating one, shrunk
    along its ray until feasible.
    """
    x = np.asarray(x, dtype=model.graph.dtype)
    y = np.asarray(y, dtype=np.int64)
    if lpa.steps == 0 or lpa.eps == 0 or len(x) == 0:
        return np.zeros_like(x)
    ref = _features(cfg, x)
    n = len(x)
    best = np.zeros_like(x)
    best_loss = np.full(n, -np.inf)
    least = np.zeros_like(x)
    least_excess = np.full(n, np.inf)
    for lam in lpa.lambdas:
        delta = lpa_trajectory(model, cfg, x, y, lam, lpa, ref)[-1]
        xa = perturb(x, delta)
        loss = per_sample_loss(model.run(xa, y)["logits"].astype(np.float64), y)
        dist = _distance(cfg, ref, _features(cfg, xa))
        feasible = dist <= lpa.eps
        take = feasible & (loss > best_loss)
        best[take], best_loss[take] = delta[take], loss[take]
        closer = ~feasible & (dist - lpa.eps < least_excess)
        least[closer], least_excess[closer] = delta[closer], (dist - lpa.eps)[closer]
    missing = ~np.isfinite(best_loss)
    if missing.any():
        s = _shrink_to_feasible(cfg, x[missing], least[missing], lpa.eps, [f[missing] for f in ref],
                                lpa.bisection_steps)
        best[missing] = (least[missing] * _per_sample(s, x.ndim)).astype(x.dtype)
    return best


@dataclass
class RobustnessCurve:
    eps: list[float]
    accuracy: list[float]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "accuracy"])
            for e, a in zip(self.eps, self.accuracy):
                w.writerow([f"{e:.6g}", f"{a:.6f}"])


def lpips_robust_accuracy(
    model: ModelGraph,
    cfg: LpipsConfig,
    dataset: Dataset,
    eps_grid: Sequence[float],
    lpa: LpaConfig | None = None,
    batch_size: int = 256,
) -> RobustnessCurve:
    """Accuracy under the perceptual attack at each radius.

    A sample counts as robust at radius ``e`` only if it survives the attacks
    at every grid radius up to ``e``; the feasible sets are nested, so this is
    still a valid upper bound on true robust accuracy and makes the curve
    monotone.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    lpa = lpa or LpaConfig(eps=0.0)
    grid = sorted(float(e) for e in eps_grid)
    alive = np.ones(len(dataset), dtype=bool)
    acc = []
    for e in grid:
        conf = LpaConfig(e, lpa.lambdas, lpa.steps, lpa.step_size, lpa.bisection_steps)
        for i in range(0, len(dataset), batch_size):
            sl = slice(i, i + batch_size)
            x, y = dataset.images[sl], dataset.labels[sl]
            delta = lpa_attack(model, cfg, x, y, conf)
            pred = model.run(perturb(x, delta))["logits"].argmax(axis=1)
            alive[sl] &= pred == y
        acc.append(float(alive.mean()))
    return RobustnessCurve(grid, acc)
