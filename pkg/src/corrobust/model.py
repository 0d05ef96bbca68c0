"""Pre-activation residual CNNs written as a composition of stages.

The network is ``f = g_L o ... o g_1``; every stage output (and the raw input)
is a tap, so feature maps can be read and additive perturbations injected at
each of them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Graph, GraphError

INPUT_TAP = "input"


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int] = (3, 16, 16)
    widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    num_classes: int = 4
    norm: str = "batchnorm"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"input_shape must be positive (C, H, W), got {self.input_shape}")
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("at least one stage with a positive channel count is required")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.norm not in ("batchnorm", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        c, h, w = self.input_shape
        down = 2 ** (len(self.widths) - 1)
        if h % down or w % down:
            raise ValueError(f"spatial size {h}x{w} not divisible by {down} for {len(self.widths)} stages")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class InjectionPoint:
    layer: int
    tap: str
    dim: int


@dataclass
class ModelGraph:
    """A classifier graph plus its ordered perturbation-injection points.

    The graph must have an input node ``x``, a label input ``y``, a ``logits``
    output and a scalar ``loss`` output.
    """

    graph: Graph
    injection_points: list[InjectionPoint]
    spec: ModelSpec | None = None
    input_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.input_shape and self.spec is not None:
            self.input_shape = self.spec.input_shape
        taps = [p.tap for p in self.injection_points]
        if len(set(taps)) != len(taps):
            raise GraphError("injection taps must be unique")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.params

    @property
    def num_classes(self) -> int:
        return int(self.graph.params["fc.w"].shape[1]) if "fc.w" in self.graph.params else int(
            self.spec.num_classes
        )

    def point(self, layer: int) -> InjectionPoint:
        for p in self.injection_points:
            if p.layer == layer:
                return p
        raise KeyError(f"unknown layer index {layer}")

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.graph.dtype)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"batch shape {x.shape} does not match input shape {self.input_shape}")
        return x

    def run(
        self,
        x: np.ndarray,
        y: np.ndarray | None = None,
        training: bool = False,
        update_stats: bool = False,
        offsets: Mapping[str, np.ndarray] | None = None,
    ) -> dict[str, np.ndarray]:
        x = self._check_batch(x)
        if y is None:
            y = np.zeros(len(x), dtype=np.int64)
        return self.graph.forward(
            {"x": x, "y": np.asarray(y, dtype=np.int64)},
            offsets=offsets,
            training=training,
            update_stats=update_stats,
        )

    def loss_grad(
        self,
        x: np.ndarray,
        y: np.ndarray,
        taps: Iterable[str] = (INPUT_TAP,),
        training: bool = False,
        offsets: Mapping[str, np.ndarray] | None = None,
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Per-sample losses and gradients of the mean loss at the given taps.

        Never updates batchnorm running statistics.
        """
        out = self.run(x, y, training=training, offsets=offsets)
        grads = self.graph.backward("loss", list(taps))
        return per_sample_loss(out["logits"], y), grads

    def param_grads(
        self, x: np.ndarray, y: np.ndarray, training: bool = True, update_stats: bool = True,
        offsets: Mapping[str, np.ndarray] | None = None,
    ) -> tuple[float, dict[str, np.ndarray]]:
        out = self.run(x, y, training=training, update_stats=update_stats, offsets=offsets)
        grads = self.graph.backward("loss", list(self.graph.params))
        return float(out["loss"]), grads

    def state(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters and batchnorm buffers."""
        return {**self.graph.params, **self.graph.buffers}

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.graph.copy(), list(self.injection_points), self.spec, self.input_shape)

    def astype(self, dtype) -> "ModelGraph":
        return ModelGraph(self.graph.astype(dtype), list(self.injection_points), self.spec, self.input_shape)


def per_sample_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), np.asarray(y, dtype=np.int64)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Build a pre-activation residual CNN for ``spec`` with seeded initialization."""
    rng = np.random.default_rng(seed)
    g = Graph(dtype)
    c_in, h, w = spec.input_shape
    use_bn = spec.norm == "batchnorm"

    def conv(x: str, name: str, cin: int, cout: int, k: int, stride: int) -> str:
        wt = g.parameter(f"{name}.w", _kaiming(rng, (cout, cin, k, k), cin * k * k))
        return g.conv2d(x, wt, stride=stride, padding=k // 2, name=name)

    def norm_relu(x: str, name: str, channels: int) -> str:
        if use_bn:
            x = g.batchnorm(x, channels, name=name)
        return g.relu(x, name=f"{name}.relu")

    x = g.input("x", (None, c_in, h, w))
    g.input("y", (None,), dtype=np.int64)
    cur = g.tap(INPUT_TAP, x)
    points = [InjectionPoint(1, INPUT_TAP, c_in * h * w)]

    cur = conv(cur, "stem", c_in, spec.widths[0], 3, 1)
    cin = spec.widths[0]
    hh, ww = h, w
    for s, width in enumerate(spec.widths):
        for b in range(spec.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            pre = f"s{s + 1}.b{b + 1}"
            o = norm_relu(cur, f"{pre}.bn1", cin)
            if stride != 1 or cin != width:
                shortcut = conv(o, f"{pre}.short", cin, width, 1, stride)
            else:
                shortcut = cur
            o = conv(o, f"{pre}.conv1", cin, width, 3, stride)
            o = norm_relu(o, f"{pre}.bn2", width)
            o = conv(o, f"{pre}.conv2", width, width, 3, 1)
            cur = g.residual_add(o, shortcut, name=f"{pre}.out")
            cin = width
            if stride == 2:
                hh, ww = hh // 2, ww // 2
        tap = f"stage{s + 1}"
        cur = g.tap(tap, cur)
        points.append(InjectionPoint(s + 2, tap, width * hh * ww))

    cur = norm_relu(cur, "head.bn", cin)
    cur = g.flatten(g.avgpool(cur, None, name="head.pool"), name="head.flat")
    fc_w = g.parameter("fc.w", _kaiming(rng, (cin, spec.num_classes), cin, gain=1.0))
    fc_b = g.parameter("fc.b", np.zeros(spec.num_classes))
    logits = g.add(g.matmul(cur, fc_w, name="fc.matmul"), fc_b, name="logits")
    loss = g.softmax_cross_entropy(logits, "y", name="loss")
    g.mark_output(logits)
    g.mark_output(loss)
    return ModelGraph(g, points, spec)


def feature_maps(model: ModelGraph, x: np.ndarray, layers: Iterable[int]) -> dict[int, np.ndarray]:
    """Values at the requested injection points (eval mode)."""
    layers = list(layers)
    points = {p.layer: p for p in model.injection_points}
    for l in layers:
        if l not in points:
            raise KeyError(f"unknown layer index {l}")
    out = model.run(x)
    return {l: out[points[l].tap] for l in layers}


def predict(model: ModelGraph, batch: np.ndarray, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and softmax probabilities."""
    batch = model._check_batch(batch)
    logits = np.concatenate(
        [model.run(batch[i : i + batch_size])["logits"] for i in range(0, len(batch), batch_size)]
    ) if len(batch) else np.zeros((0, model.num_classes), dtype=model.graph.dtype)
    return logits, softmax(logits)
