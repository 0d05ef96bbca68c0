"""Static computation graphs over numpy arrays with reverse-mode differentiation.

A :class:`Graph` is built once (inputs, parameters, primitive ops, taps) and then
evaluated many times with different bindings. Tensors are plain ``numpy.ndarray``
values; the graph's dtype is float32 by default and float64 for verification.

Taps are named identity nodes whose values are returned from :meth:`Graph.forward`
and which accept an additive offset at evaluation time. Gradients can be requested
for parameters, inputs and taps in a single backward pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "GradcheckReport",
    "forward",
    "backward",
    "gradcheck",
]


class GraphError(ValueError):
    """Invalid graph construction or evaluation request."""


class ShapeError(GraphError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        super().__init__(f"non-finite value produced at node {node!r}")
        self.node = node


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


# --------------------------------------------------------------------------
# primitive kernels
#
# Forward kernels: fn(values, attrs, ctx) -> (output, cache)
# Backward kernels: fn(grad, values, output, cache, attrs, needs) -> tuple of
# input gradients (None where needs[i] is False).
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _add_fwd(vals, attrs, ctx):
    return vals[0] + vals[1], None


def _add_bwd(g, vals, out, cache, attrs, needs):
    return (
        _unbroadcast(g, vals[0].shape) if needs[0] else None,
        _unbroadcast(g, vals[1].shape) if needs[1] else None,
    )


def _scale_fwd(vals, attrs, ctx):
    return vals[0] * vals[0].dtype.type(attrs["factor"]), None


def _scale_bwd(g, vals, out, cache, attrs, needs):
    return (g * g.dtype.type(attrs["factor"]),)


def _matmul_fwd(vals, attrs, ctx):
    return vals[0] @ vals[1], None


def _matmul_bwd(g, vals, out, cache, attrs, needs):
    a, b = vals
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(vals, attrs, ctx):
    x, w = vals
    s, p = attrs["stride"], attrs["padding"]
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    xp = _pad(x, p)
    # cols: (n, ho, wo, ci * kh * kw) ordered to match w.reshape(co, -1)
    patches = np.empty((n, ho, wo, ci, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s].transpose(0, 2, 3, 1)
    cols = patches.reshape(n * ho * wo, ci * kh * kw)
    out = cols @ w.reshape(co, -1).T
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_bwd(g, vals, out, cols, attrs, needs):
    x, w = vals
    s, p = attrs["stride"], attrs["padding"]
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    gw = gx = None
    if needs[1]:
        gw = (g2.T @ cols).reshape(w.shape)
    if needs[0]:
        dcols = (g2 @ w.reshape(co, -1)).reshape(n, ho, wo, ci, kh, kw)
        gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    return gx, gw


def _relu_fwd(vals, attrs, ctx):
    return np.maximum(vals[0], 0), None


def _relu_bwd(g, vals, out, cache, attrs, needs):
    # subgradient at 0 is 0
    return (g * (vals[0] > 0),)


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    return (0,), (1, -1)


def _bn_fwd(vals, attrs, ctx):
    x, gamma, beta = vals
    axes, shape = _bn_axes(x)
    eps = x.dtype.type(attrs["eps"])
    rm_key, rv_key = attrs["running_mean"], attrs["running_var"]
    if ctx.training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if ctx.update_stats:
            m = attrs["momentum"]
            count = x.size // x.shape[1]
            unbiased = var * (count / max(count - 1, 1))
            buf = ctx.buffers
            buf[rm_key] = (m * buf[rm_key] + (1 - m) * mean).astype(buf[rm_key].dtype)
            buf[rv_key] = (m * buf[rv_key] + (1 - m) * unbiased).astype(buf[rv_key].dtype)
    else:
        mean = ctx.buffers[rm_key].astype(x.dtype)
        var = ctx.buffers[rv_key].astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv, ctx.training)


def _bn_bwd(g, vals, out, cache, attrs, needs):
    x, gamma, beta = vals
    xhat, inv, training = cache
    axes, shape = _bn_axes(x)
    ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
    gbeta = g.sum(axis=axes) if needs[2] else None
    gx = None
    if needs[0]:
        scale = (gamma * inv).reshape(shape)
        if training:
            gmean = g.mean(axis=axes, keepdims=True)
            gxhat_mean = (g * xhat).mean(axis=axes, keepdims=True)
            gx = scale * (g - gmean - xhat * gxhat_mean)
        else:
            gx = g * scale
    return gx, ggamma, gbeta


def _avgpool_fwd(vals, attrs, ctx):
    x = vals[0]
    k = attrs["kernel"]
    n, c, h, w = x.shape
    if k is None:
        return x.mean(axis=(2, 3), keepdims=True), None
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)), None


def _avgpool_bwd(g, vals, out, cache, attrs, needs):
    x = vals[0]
    k = attrs["kernel"]
    n, c, h, w = x.shape
    if k is None:
        return (np.broadcast_to(g / x.dtype.type(h * w), x.shape).copy(),)
    gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / x.dtype.type(k * k)
    return (gx,)


def _flatten_fwd(vals, attrs, ctx):
    x = vals[0]
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g, vals, out, cache, attrs, needs):
    return (g.reshape(vals[0].shape),)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _ce_fwd(vals, attrs, ctx):
    logits, labels = vals
    logp = _log_softmax(logits)
    idx = labels.astype(np.int64)
    per_sample = -logp[np.arange(len(idx)), idx]
    return np.asarray(per_sample.mean(), dtype=logits.dtype), (logp, idx)


def _ce_bwd(g, vals, out, cache, attrs, needs):
    logp, idx = cache
    n = logp.shape[0]
    grad = np.exp(logp)
    grad[np.arange(n), idx] -= 1
    return (grad * (g / logp.dtype.type(n)), None)


def _l2_fwd(vals, attrs, ctx):
    x = vals[0]
    sq = np.asarray(np.sum(x * x), dtype=x.dtype)
    if attrs["squared"]:
        return sq, None
    return np.sqrt(sq), None


def _l2_bwd(g, vals, out, cache, attrs, needs):
    x = vals[0]
    if attrs["squared"]:
        return (2 * g * x,)
    if out == 0:
        return (np.zeros_like(x),)
    return (g * x / out,)


def _tap_fwd(vals, attrs, ctx):
    offset = ctx.offsets.get(attrs["tap"])
    if offset is None:
        return vals[0], None
    return vals[0] + offset, None


def _identity_bwd(g, vals, out, cache, attrs, needs):
    return (g,)


FORWARD_RULES: dict[str, Callable] = {
    "add": _add_fwd,
    "residual_add": _add_fwd,
    "scale": _scale_fwd,
    "matmul": _matmul_fwd,
    "conv2d": _conv_fwd,
    "relu": _relu_fwd,
    "batchnorm": _bn_fwd,
    "avgpool": _avgpool_fwd,
    "flatten": _flatten_fwd,
    "softmax_cross_entropy": _ce_fwd,
    "l2_norm": _l2_fwd,
    "tap": _tap_fwd,
}

BACKWARD_RULES: dict[str, Callable] = {
    "add": _add_bwd,
    "residual_add": _add_bwd,
    "scale": _scale_bwd,
    "matmul": _matmul_bwd,
    "conv2d": _conv_bwd,
    "relu": _relu_bwd,
    "batchnorm": _bn_bwd,
    "avgpool": _avgpool_bwd,
    "flatten": _flatten_bwd,
    "softmax_cross_entropy": _ce_bwd,
    "l2_norm": _l2_bwd,
    "tap": _identity_bwd,
}

_LEAF_OPS = {"input", "parameter", "constant"}


@dataclass
class _Context:
    training: bool
    update_stats: bool
    offsets: Mapping[str, np.ndarray]
    buffers: dict[str, np.ndarray]


@dataclass
class Trace:
    """Values and backward caches of one forward evaluation."""

    values: dict[str, np.ndarray]
    caches: dict[str, Any]


class Graph:
    """A directed acyclic graph of primitive operations.

    Nodes are appended in construction order, which is also a valid topological
    order because every op refers only to nodes that already exist.
    """

    def __init__(self, dtype: Any = np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: dict[str, Node] = {}
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.constants: dict[str, np.ndarray] = {}
        self.taps: list[str] = []
        self.outputs: list[str] = []
        self.n_forward = 0
        self.n_backward = 0
        self._trace: Trace | None = None
        self._counter = 0

    # -- construction ------------------------------------------------------

    def _fresh(self, op: str) -> str:
        self._counter += 1
        return f"{op}_{self._counter}"

    def _add_node(self, op: str, inputs: Iterable[str], name: str | None = None, **attrs) -> str:
        name = name or self._fresh(op)
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if i not in self.nodes:
                raise GraphError(f"node {name!r} refers to unknown input {i!r}")
        self.nodes[name] = Node(name, op, inputs, attrs)
        return name

    def input(self, name: str, shape: tuple[int | None, ...], dtype: Any = None) -> str:
        """Declare a bound input. ``None`` entries in ``shape`` accept any size."""
        return self._add_node("input", (), name, shape=tuple(shape), dtype=dtype)

    def parameter(self, name: str, value: np.ndarray) -> str:
        self.params[name] = np.array(value, dtype=self.dtype)
        return self._add_node("parameter", (), name)

    def constant(self, name: str, value: Any) -> str:
        self.constants[name] = np.array(value, dtype=self.dtype)
        return self._add_node("constant", (), name)

    def add(self, a: str, b: str, name: str | None = None) -> str:
        return self._add_node("add", (a, b), name)

    def residual_add(self, a: str, b: str, name: str | None = None) -> str:
        return self._add_node("residual_add", (a, b), name)

    def scale(self, a: str, factor: float, name: str | None = None) -> str:
        return self._add_node("scale", (a,), name, factor=float(factor))

    def matmul(self, a: str, b: str, name: str | None = None) -> str:
        return self._add_node("matmul", (a, b), name)

    def conv2d(self, x: str, w: str, stride: int = 1, padding: int = 0, name: str | None = None) -> str:
        return self._add_node("conv2d", (x, w), name, stride=int(stride), padding=int(padding))

    def relu(self, x: str, name: str | None = None) -> str:
        return self._add_node("relu", (x,), name)

    def batchnorm(
        self, x: str, channels: int, name: str, eps: float = 1e-5, momentum: float = 0.9
    ) -> str:
        """Batch normalization with learnable affine and running statistics.

        ``momentum`` is the weight kept on the old running value.
        """
        gamma = self.parameter(f"{name}.gamma", np.ones(channels))
        beta = self.parameter(f"{name}.beta", np.zeros(channels))
        rm, rv = f"{name}.running_mean", f"{name}.running_var"
        self.buffers[rm] = np.zeros(channels, dtype=self.dtype)
        self.buffers[rv] = np.ones(channels, dtype=self.dtype)
        return self._add_node(
            "batchnorm", (x, gamma, beta), name, eps=eps, momentum=momentum, running_mean=rm, running_var=rv
        )

    def avgpool(self, x: str, kernel: int | None = None, name: str | None = None) -> str:
        """Non-overlapping average pooling; ``kernel=None`` pools globally."""
        return self._add_node("avgpool", (x,), name, kernel=kernel)

    def flatten(self, x: str, name: str | None = None) -> str:
        return self._add_node("flatten", (x,), name)

    def softmax_cross_entropy(self, logits: str, labels: str, name: str | None = None) -> str:
        """Mean cross-entropy over the batch; ``labels`` holds integer classes."""
        return self._add_node("softmax_cross_entropy", (logits, labels), name)

    def l2_norm(self, x: str, squared: bool = False, name: str | None = None) -> str:
        return self._add_node("l2_norm", (x,), name, squared=bool(squared))

    def tap(self, name: str, x: str) -> str:
        if name in self.taps:
            raise GraphError(f"duplicate tap name {name!r}")
        node = self._add_node("tap", (x,), name, tap=name)
        self.taps.append(name)
        return node

    def mark_output(self, name: str) -> None:
        if name not in self.nodes:
            raise GraphError(f"unknown node {name!r}")
        if name not in self.outputs:
            self.outputs.append(name)

    # -- utilities ---------------------------------------------------------

    def astype(self, dtype: Any) -> "Graph":
        """Copy of the graph with parameters, buffers and constants cast to ``dtype``."""
        g = copy.copy(self)
        g.dtype = np.dtype(dtype)
        g.nodes = dict(self.nodes)
        g.taps = list(self.taps)
        g.outputs = list(self.outputs)
        g.params = {k: v.astype(dtype) for k, v in self.params.items()}
        g.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        g.constants = {k: v.astype(dtype) for k, v in self.constants.items()}
        g._trace = None
        g.n_forward = g.n_backward = 0
        return g

    def copy(self) -> "Graph":
        return self.astype(self.dtype)

    def node_value(self, name: str) -> np.ndarray:
        if self._trace is None:
            raise GraphError("graph has not been evaluated")
        return self._trace.values[name]

    # -- evaluation --------------------------------------------------------

    def _bind(self, node: Node, bindings: Mapping[str, Any]) -> np.ndarray:
        if node.name not in bindings:
            raise ShapeError(node.name, "input is not bound")
        dtype = node.attrs["dtype"] or self.dtype
        value = np.asarray(bindings[node.name], dtype=dtype)
        declared = node.attrs["shape"]
        if value.ndim != len(declared) or any(
            d is not None and d != s for d, s in zip(declared, value.shape)
        ):
            raise ShapeError(node.name, f"bound shape {value.shape} does not match declared {declared}")
        return value

    def forward(
        self,
        bindings: Mapping[str, Any],
        offsets: Mapping[str, np.ndarray] | None = None,
        training: bool = False,
        update_stats: bool | None = None,
        strict: bool = False,
    ) -> dict[str, np.ndarray]:
        """Evaluate every node and return the taps and marked outputs.

        ``offsets`` maps tap names to arrays added to the tap's value. With
        ``training=True`` batchnorm uses batch statistics; running statistics
        are updated only when ``update_stats`` is true (defaults to ``training``).
        """
        offsets = dict(offsets or {})
        for k, v in offsets.items():
            if k not in self.taps:
                raise GraphError(f"offset given for unknown tap {k!r}")
            offsets[k] = np.asarray(v, dtype=self.dtype)
        ctx = _Context(
            training=training,
            update_stats=training if update_stats is None else update_stats,
            offsets=offsets,
            buffers=self.buffers,
        )
        values: dict[str, np.ndarray] = {}
        caches: dict[str, Any] = {}
        for node in self.nodes.values():
            if node.op == "input":
                out = self._bind(node, bindings)
            elif node.op == "parameter":
                out = self.params[node.name]
            elif node.op == "constant":
                out = self.constants[node.name]
            else:
                args = [values[i] for i in node.inputs]
                try:
                    out, cache = FORWARD_RULES[node.op](args, node.attrs, ctx)
                except ValueError as exc:
                    raise ShapeError(node.name, str(exc)) from exc
                if node.op == "residual_add" and args[0].shape != args[1].shape:
                    raise ShapeError(node.name, f"residual shapes differ: {args[0].shape} vs {args[1].shape}")
                if node.op == "tap" and node.name in offsets and offsets[node.name].shape != out.shape:
                    raise ShapeError(node.name, f"offset shape {offsets[node.name].shape} != {out.shape}")
                caches[node.name] = cache
            if strict and out.dtype.kind == "f" and not np.all(np.isfinite(out)):
                raise NonFiniteError(node.name)
            values[node.name] = out
        self._trace = Trace(values, caches)
        self.n_forward += 1
        return {k: values[k] for k in [*self.taps, *self.outputs]}

    def _descendants(self, roots: Iterable[str]) -> set[str]:
        desc = set(roots)
        for node in self.nodes.values():
            if any(i in desc for i in node.inputs):
                desc.add(node.name)
        return desc

    def backward_from(self, seeds: Mapping[str, Any], wrt: Iterable[str]) -> dict[str, np.ndarray]:
        """Vector-Jacobian product of the last forward evaluation.

        ``seeds`` maps node names to upstream gradients of the same shape as
        the node value. Returns gradients for every name in ``wrt``.
        """
        if self._trace is None:
            raise GraphError("backward called before forward")
        wrt = list(wrt)
        for name in wrt:
            node = self.nodes.get(name)
            if node is None or not (node.op in ("parameter", "input", "tap")):
                raise GraphError(f"cannot differentiate with respect to {name!r}: not a tap, parameter or input")
        values, caches = self._trace.values, self._trace.caches
        live = self._descendants(wrt)
        grads: dict[str, np.ndarray] = {}
        for name, g in seeds.items():
            if name not in self.nodes:
                raise GraphError(f"unknown seed node {name!r}")
            g = np.asarray(g, dtype=values[name].dtype)
            grads[name] = np.broadcast_to(g, values[name].shape).copy()
        wanted = set(wrt)
        result: dict[str, np.ndarray] = {}
        for node in reversed(list(self.nodes.values())):
            g = grads.pop(node.name, None)
            if node.name in wanted:
                result[node.name] = g if g is not None else np.zeros_like(values[node.name])
            if g is None or node.op in _LEAF_OPS or node.name not in live:
                continue
            needs = tuple(i in live for i in node.inputs)
            if not any(needs):
                continue
            args = [values[i] for i in node.inputs]
            in_grads = BACKWARD_RULES[node.op](g, args, values[node.name], caches[node.name], node.attrs, needs)
            for i, gi, need in zip(node.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        self.n_backward += 1
        return result

    def backward(self, loss: str, wrt: Iterable[str]) -> dict[str, np.ndarray]:
        """Gradients of the scalar node ``loss`` with respect to ``wrt``."""
        if self._trace is None:
            raise GraphError("backward called before forward")
        if self._trace.values[loss].size != 1:
            raise GraphError(f"loss node {loss!r} is not scalar")
        return self.backward_from({loss: 1.0}, wrt)


def forward(graph: Graph, bindings: Mapping[str, Any], **kwargs) -> dict[str, np.ndarray]:
    return graph.forward(bindings, **kwargs)


def backward(graph: Graph, loss_node: str, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    return graph.backward(loss_node, wrt)


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    checked: int


def gradcheck(
    graph: Graph,
    node: str,
    bindings: Mapping[str, Any],
    loss: str,
    step: float = 2e-4,
    tolerance: float = 1e-6,
    training: bool = False,
    max_coords: int | None = None,
    floor: float = 1e-4,
    seed: int = 0,
    order: int = 4,
) -> GradcheckReport:
    """Compare the backward gradient at ``node`` with central differences.

    ``order=2`` uses the three-point stencil, ``order=4`` (default) the
    five-point one, which allows a larger step and so less roundoff.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps exactly-zero gradients from dividing roundoff by zero.
    Batchnorm running statistics are never updated during the check.
    """
    if step <= 0:
        raise ValueError("gradcheck step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if graph.dtype != np.float64:
        raise GraphError("gradcheck requires a float64 graph (use graph.astype(np.float64))")
    kind = graph.nodes[node].op
    if kind not in ("parameter", "input", "tap"):
        raise GraphError(f"cannot gradcheck node {node!r} of kind {kind}")

    bindings = dict(bindings)
    graph.forward(bindings, training=training, update_stats=False)
    analytic = graph.backward(loss, [node])[node]

    offsets: dict[str, np.ndarray] = {}
    if kind == "parameter":
        target = graph.params[node]
    elif kind == "input":
        target = bindings[node] = np.array(bindings[node], dtype=np.float64)
    else:
        target = offsets[node] = np.zeros_like(analytic)

    def f() -> float:
        graph.forward(bindings, offsets=offsets, training=training, update_stats=False)
        return float(graph._trace.values[loss])

    flat = target.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)
    worst = 0.0
    def at(i: int, offset: float) -> float:
        orig = flat[i]
        flat[i] = orig + offset
        value = f()
        flat[i] = orig
        return value

    for i in coords:
        if order == 2:
            num = (at(i, step) - at(i, -step)) / (2 * step)
        else:
            num = (8 * (at(i, step) - at(i, -step)) - (at(i, 2 * step) - at(i, -2 * step))) / (12 * step)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return GradcheckReport(max_rel_error=worst, passed=worst <= tolerance, checked=len(coords))
