"""SGD-momentum training with an optional per-batch perturbation method."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import attacks
from .attacks import AttackConfig, GaussianAugConfig, ThreatModel
from .corruptions import CorruptedSet
from .data import Dataset
from .metrics import accuracy, avg_corruption_accuracy, corruption_table
from .model import ModelGraph, ModelSpec, build_model
from .rlat import make_plan, rlat_step

log = logging.getLogger(__name__)

METHODS = ("standard", "gaussian", "fgm", "fgsm", "pgd", "rlat")
ADV_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: list[int] = field(default_factory=lambda: [15, 25])
    decay_factor: float = 10.0
    method: str = "standard"
    eps: float = 0.0
    norm: str = "l2"
    sigma: float = 0.0
    gaussian_mode: str = "all"
    sphere: bool = False
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    pgd_init: str = "zero"
    rlat_layers: list[int] | None = None
    adv_fraction: float = 1.0
    seed: int = 0
    widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    blocks_per_stage: int = 1
    norm_layer: str = "batchnorm"

    def __post_init__(self):
        self.decay_epochs = [int(e) for e in self.decay_epochs]
        self.widths = [int(w) for w in self.widths]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        d = self.decay_epochs
        # decay epochs past the end are allowed and simply never reached
        if any(b <= a for a, b in zip(d, d[1:])) or any(e < 1 for e in d):
            raise ValueError(f"decay_epochs {d} must be strictly increasing and >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.adv_fraction not in ADV_FRACTIONS:
            raise ValueError(f"adv_fraction must be one of {ADV_FRACTIONS}")
        if self.eps < 0 or self.sigma < 0:
            raise ValueError("eps and sigma must be nonnegative")
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.method == "gaussian":
            GaussianAugConfig(self.sigma, self.gaussian_mode, self.sphere)
        if self.method == "pgd":
            self.attack_config()

    @property
    def threat(self) -> ThreatModel:
        return ThreatModel(2 if self.norm == "l2" else np.inf, self.eps)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.threat, self.pgd_steps, self.pgd_step_size, self.pgd_init)

    def model_spec(self, dataset: Dataset) -> ModelSpec:
        return ModelSpec(dataset.image_shape, tuple(self.widths), self.blocks_per_stage, dataset.num_classes,
                         self.norm_layer)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    clean_eval_acc: float | None
    corruption_eval_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records]}


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step schedule: divide by ``decay_factor`` at every decay epoch reached."""
    k = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr * config.decay_factor ** (-k)


def sgd_update(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place SGD with momentum and coupled weight decay.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """
    for name, p in params.items():
        g = grads[name] + p.dtype.type(weight_decay) * p
        v = velocity.get(name)
        v = g if v is None else p.dtype.type(momentum) * v + g
        velocity[name] = v
        p -= p.dtype.type(lr) * v


def _adv_mask(b: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(b, dtype=bool)
    k = int(np.floor(fraction * b))
    if k == b:
        mask[:] = True
    elif k > 0:
        mask[rng.choice(b, k, replace=False)] = True
    return mask


class Trainer:
    """Holds model, optimizer state and RNG streams for one training run."""

    def __init__(self, config: TrainConfig, dataset: Dataset, model: ModelGraph | None = None):
        config.validate()
        self.config = config
        self.dataset = dataset
        init_seq, shuffle_seq, aug_seq = np.random.SeedSequence(config.seed).spawn(3)
        if model is None:
            model = build_model(config.model_spec(dataset), int(init_seq.generate_state(1)[0]))
        self.model = model
        self.velocity: dict[str, np.ndarray] = {}
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.aug_rng = np.random.default_rng(aug_seq)
        self.plan = make_plan(model, config.eps, config.rlat_layers) if config.method == "rlat" else None

    def perturbed_inputs(self, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Training inputs for an l_p or Gaussian method; clean rows stay untouched."""
        c = self.config
        model = self.model
        if c.method == "standard" or not mask.any():
            return x
        xs, ys = x[mask], y[mask]
        if c.method == "gaussian":
            adv = attacks.gaussian_augment(xs, GaussianAugConfig(c.sigma, c.gaussian_mode, c.sphere), self.aug_rng)
        else:
            if c.method == "fgm":
                delta = attacks.fgm(model, xs, ys, c.eps, training=True)
            elif c.method == "fgsm":
                delta = attacks.fgsm(model, xs, ys, c.eps, training=True)
            else:
                delta = attacks.pgd(model, xs, ys, c.attack_config(), rng=self.aug_rng, training=True)
            adv = attacks.perturb(xs, delta)
        out = x.copy()
        out[mask] = adv
        return out

    def train_batch(self, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[float, dict[str, np.ndarray]]:
        c = self.config
        mask = _adv_mask(len(x), c.adv_fraction, self.aug_rng) if c.method != "standard" else np.zeros(len(x), bool)
        if c.method == "rlat":
            loss, grads = rlat_step(self.model, x, y, self.plan, mask=None if mask.all() else mask)
        else:
            loss, grads = self.model.param_grads(self.perturbed_inputs(x, y, mask), y)
        sgd_update(self.model.params, grads, self.velocity, lr, c.momentum, c.weight_decay)
        return loss, grads

    def run_epoch(self, epoch: int) -> tuple[float, list[float]]:
        c = self.config
        lr = lr_at_epoch(c, epoch)
        order = self.shuffle_rng.permutation(len(self.dataset))
        losses = []
        # incomplete trailing batch is dropped
        for start in range(0, len(order) - c.batch_size + 1, c.batch_size):
            idx = order[start : start + c.batch_size]
            loss, _ = self.train_batch(self.dataset.images[idx], self.dataset.labels[idx], lr)
            losses.append(loss)
        return lr, losses


def train(
    config: TrainConfig,
    dataset: Dataset,
    eval_set: Dataset | None = None,
    corrupted: CorruptedSet | None = None,
    model: ModelGraph | None = None,
) -> tuple[ModelGraph, TrainLog]:
    """Train for ``config.epochs`` epochs and return the final model (no early stopping)."""
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset of {len(dataset)} samples is smaller than one batch")
    trainer = Trainer(config, dataset, model)
    tlog = TrainLog()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr, losses = trainer.run_epoch(epoch)
        seconds = time.perf_counter() - t0
        tlog.batch_losses.extend(losses)
        clean_acc = accuracy(trainer.model, eval_set) if eval_set is not None else None
        corr_acc = avg_corruption_accuracy(corruption_table(trainer.model, corrupted)) if corrupted else None
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), clean_acc, corr_acc, seconds)
        tlog.records.append(rec)
        log.info("epoch %d lr %.4g loss %.4f clean %s (%.1fs)", epoch, lr, rec.train_loss, clean_acc, seconds)
    return trainer.model, tlog
