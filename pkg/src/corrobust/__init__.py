"""Corruption robustness through layerwise adversarial training, on a small numpy graph engine.

Setting ``CORROBUST_THREADS`` limits BLAS threads at import time; ``0`` means a
single thread, which makes runs bit-reproducible.
"""

import os

from threadpoolctl import threadpool_limits

_threads = os.environ.get("CORROBUST_THREADS")
if _threads is not None and _threads.strip():
    threadpool_limits(max(1, int(_threads)))

from .attacks import AttackConfig, GaussianAugConfig, ThreatModel, fgm, fgsm, gaussian_augment, pgd, project  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import Dataset, SyntheticSpec, gen_synthetic, load_cifar10_binary  # noqa: E402
from .model import ModelGraph, ModelSpec, build_model  # noqa: E402
from .rlat import make_plan, rlat_step  # noqa: E402
from .tensor import Graph, gradcheck  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "Dataset",
    "GaussianAugConfig",
    "Graph",
    "ModelGraph",
    "ModelSpec",
    "SyntheticSpec",
    "ThreatModel",
    "TrainConfig",
    "build_model",
    "fgm",
    "fgsm",
    "gaussian_augment",
    "gen_synthetic",
    "gradcheck",
    "load_checkpoint",
    "load_cifar10_binary",
    "make_plan",
    "pgd",
    "project",
    "rlat_step",
    "save_checkpoint",
    "train",
]
