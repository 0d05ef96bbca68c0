"""Relaxed LPIPS adversarial training: one-step layerwise l2 perturbations.

Each selected injection point ``l`` gets an additive perturbation bounded by
``eps_l = eps * d_l / (l * d_in)``. All layerwise gradients come from a single
backward pass at zero perturbation, then the loss is re-evaluated with every
perturbation in place and differentiated with respect to the weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .attacks import fgm_from_grad, l2_normalize, perturb
from .model import INPUT_TAP, ModelGraph


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    tap: str
    dim: int
    eps: float


@dataclass(frozen=True)
class LayerPerturbationPlan:
    entries: tuple[PlanEntry, ...]
    base_eps: float
    input_dim: int

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(e.layer for e in self.entries)

    @property
    def taps(self) -> tuple[str, ...]:
        return tuple(e.tap for e in self.entries)

    def budget(self, layer: int) -> float:
        for e in self.entries:
            if e.layer == layer:
                return e.eps
        return 0.0


def layer_budget(eps: float, layer: int, dim: int, input_dim: int) -> float:
    return eps * dim / (layer * input_dim)


def make_plan(model: ModelGraph, eps: float, layers: Iterable[int] | None = None) -> LayerPerturbationPlan:
    """Budgets for the chosen injection points (all of them when ``layers`` is None)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    points = {p.layer: p for p in model.injection_points}
    layers = sorted(points) if layers is None else sorted(set(layers))
    if not layers:
        raise ValueError("RLAT needs at least one layer")
    unknown = [l for l in layers if l not in points]
    if unknown:
        raise ValueError(f"layers {unknown} are not injection points of the model")
    d_in = points[1].dim
    entries = tuple(
        PlanEntry(l, points[l].tap, points[l].dim, layer_budget(eps, l, points[l].dim, d_in)) for l in layers
    )
    return LayerPerturbationPlan(entries, float(eps), d_in)


def _check_plan(model: ModelGraph, plan: LayerPerturbationPlan) -> None:
    points = {p.layer: p for p in model.injection_points}
    for e in plan.entries:
        p = points.get(e.layer)
        if p is None or p.tap != e.tap or p.dim != e.dim:
            raise ValueError(f"plan entry for layer {e.layer} does not match the model")


@dataclass
class LayerPerturbations:
    input: np.ndarray
    offsets: dict[str, np.ndarray]


def rlat_perturbations(
    model: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    plan: LayerPerturbationPlan,
    mask: np.ndarray | None = None,
    training: bool = True,
) -> LayerPerturbations:
    """Perturbed input and inner-layer offsets from one forward/backward at zero.

    ``mask`` (boolean per sample) restricts perturbations to a subset; other
    samples keep zero perturbation everywhere.
    """
    _check_plan(model, plan)
    x = np.asarray(x, dtype=model.graph.dtype)
    _, grads = model.loss_grad(x, y, taps=plan.taps, training=training)
    keep = None if mask is None else np.asarray(mask, dtype=bool)
    x_adv = x
    offsets: dict[str, np.ndarray] = {}
    for e in plan.entries:
        g = grads[e.tap]
        if keep is not None:
            g = g * keep.reshape((-1,) + (1,) * (g.ndim - 1))
        if e.tap == INPUT_TAP:
            x_adv = perturb(x, fgm_from_grad(x, g, e.eps))
        else:
            offsets[e.tap] = (e.eps * l2_normalize(g)).astype(g.dtype)
    return LayerPerturbations(x_adv, offsets)


def rlat_step(
    model: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    plan: LayerPerturbationPlan,
    mask: np.ndarray | None = None,
    update_stats: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss under layerwise perturbations and its gradient with respect to the weights.

    Always costs exactly two forward and two backward passes.
    """
    pert = rlat_perturbations(model, x, y, plan, mask=mask, training=True)
    return model.param_grads(pert.input, y, training=True, update_stats=update_stats, offsets=pert.offsets)
