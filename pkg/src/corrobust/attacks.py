"""l2 / l-inf perturbations (FGM, FGSM, PGD) and Gaussian noise augmentation.

Attacks work on any model object exposing
``loss_grad(x, y, training=...) -> (per_sample_loss, {"input": grad})``.
All perturbations are per-sample: norms are taken over every non-batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import INPUT_TAP


@dataclass(frozen=True)
class ThreatModel:
    p: float = 2
    eps: float = 0.0

    def __post_init__(self):
        if self.p not in (2, np.inf):
            raise ValueError(f"unsupported norm p={self.p}; use 2 or inf")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


@dataclass(frozen=True)
class AttackConfig:
    threat: ThreatModel
    steps: int = 10
    step_size: float | None = None
    init: str = "zero"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.init not in ("zero", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        # default 2*eps/steps when unspecified
        if self.step_size is not None:
            return self.step_size
        return 2.0 * self.threat.eps / self.steps


@dataclass(frozen=True)
class GaussianAugConfig:
    sigma: float
    mode: str = "all"
    sphere: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.mode not in ("all", "half", "uniform-sigma"):
            raise ValueError(f"unknown gaussian mode {self.mode!r}")


def _flat_norms(a: np.ndarray, p: float = 2) -> np.ndarray:
    flat = a.reshape(len(a), -1)
    if p == 2:
        return np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
    return np.abs(flat).max(axis=1)


def _per_sample(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def l2_normalize(g: np.ndarray) -> np.ndarray:
    """Per-sample unit-l2 direction of ``g``; all-zero samples stay zero."""
    norms = _flat_norms(g)
    safe = np.where(norms > 0, norms, 1.0)
    return (g / _per_sample(safe, g.ndim).astype(g.dtype)).astype(g.dtype)


def box_project(delta: np.ndarray, x: np.ndarray) -> np.ndarray:
    # only violating coordinates are touched, so feasible deltas come back bit-identical
    moved = x + delta
    inside = (moved >= 0.0) & (moved <= 1.0)
    return np.where(inside, delta, np.clip(moved, 0.0, 1.0) - x).astype(delta.dtype, copy=False)


def project(delta: np.ndarray, x: np.ndarray, threat: ThreatModel) -> np.ndarray:
    """Norm-ball projection followed by the [0, 1] box.

    Operates on batches: the first axis indexes samples.
    """
    delta = np.asarray(delta)
    eps = threat.eps
    if threat.p == np.inf:
        delta = np.clip(delta, -eps, eps)
    else:
        norms = _flat_norms(delta)
        # relative slack keeps the projection idempotent under float rounding
        factor = np.where(norms > eps * (1 + 1e-6), eps / np.where(norms > 0, norms, 1.0), 1.0)
        if np.any(factor < 1.0):
            delta = delta * _per_sample(factor, delta.ndim).astype(delta.dtype)
    return box_project(delta, x)


def perturb(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """The perturbed input fed to the model, kept inside the pixel box."""
    return np.clip(x + delta, 0.0, 1.0)


def _input_grad(model, x, y, training):
    loss, grads = model.loss_grad(x, y, taps=(INPUT_TAP,), training=training)
    return grads[INPUT_TAP]


def fgm_from_grad(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    return project(eps * l2_normalize(g), x, ThreatModel(2, eps))


def fgsm_from_grad(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    return project(eps * np.sign(g), x, ThreatModel(np.inf, eps))


def fgm(model, x: np.ndarray, y: np.ndarray, eps: float, training: bool = False) -> np.ndarray:
    """Single l2-normalized gradient step of length ``eps``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return np.zeros_like(x)
    return fgm_from_grad(x, _input_grad(model, x, y, training), eps)


def fgsm(model, x: np.ndarray, y: np.ndarray, eps: float, training: bool = False) -> np.ndarray:
    """Single gradient-sign step of length ``eps`` (sign(0) = 0)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return np.zeros_like(x)
    return fgsm_from_grad(x, _input_grad(model, x, y, training), eps)


def random_in_ball(shape: tuple[int, ...], threat: ThreatModel, rng: np.random.Generator, dtype=np.float32):
    """Uniform sample from the norm ball (per sample)."""
    if threat.p == np.inf:
        return rng.uniform(-threat.eps, threat.eps, size=shape).astype(dtype)
    n = shape[0]
    d = int(np.prod(shape[1:]))
    direction = l2_normalize(rng.standard_normal(shape))
    radius = threat.eps * rng.uniform(size=n) ** (1.0 / d)
    return (direction * _per_sample(radius, len(shape))).astype(dtype)


def pgd(
    model,
    x: np.ndarray,
    y: np.ndarray,
    config: AttackConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> np.ndarray:
    """Projected gradient ascent inside the threat model; returns the last iterate."""
    threat = config.threat
    if threat.eps == 0:
        return np.zeros_like(x)
    if config.init == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        delta = project(random_in_ball(x.shape, threat, rng, x.dtype), x, threat)
    else:
        delta = np.zeros_like(x)
    alpha = config.alpha
    for _ in range(config.steps):
        g = _input_grad(model, perturb(x, delta), y, training)
        if threat.p == np.inf:
            step = alpha * np.sign(g)
        else:
            step = alpha * l2_normalize(g)
        delta = project(delta + step, x, threat)
    return delta


def gaussian_noise(shape: tuple[int, ...], sigma, sphere: bool, rng: np.random.Generator) -> np.ndarray:
    """N(0, sigma^2 I) noise, or uniform noise on the sphere of radius sigma*sqrt(d).

    ``sigma`` may be a scalar or a per-sample vector.
    """
    d = int(np.prod(shape[1:]))
    noise = rng.standard_normal(shape)
    sigma = _per_sample(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (shape[0],)), len(shape))
    if sphere:
        noise = l2_normalize(noise) * np.sqrt(d)
    return noise * sigma


def gaussian_augment(batch: np.ndarray, config: GaussianAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Add noise per ``config.mode`` and clip to [0, 1].

    ``all`` perturbs every sample, ``half`` a random subset of floor(b/2)
    samples, ``uniform-sigma`` every sample with its own sigma ~ U[0, sigma].
    """
    if config.sigma == 0:
        return batch.copy()
    b = len(batch)
    out = batch.copy()
    if config.mode == "all":
        idx = np.arange(b)
        sigma = config.sigma
    elif config.mode == "half":
        idx = np.sort(rng.choice(b, b // 2, replace=False))
        sigma = config.sigma
    else:
        idx = np.arange(b)
        sigma = rng.uniform(0.0, config.sigma, size=b)
    if len(idx) == 0:
        return out
    noise = gaussian_noise((len(idx),) + batch.shape[1:], sigma, config.sphere, rng)
    out[idx] = np.clip(batch[idx] + noise, 0.0, 1.0).astype(batch.dtype)
    return out
