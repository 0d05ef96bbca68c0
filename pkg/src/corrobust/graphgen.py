"""Random small graphs covering every primitive, for derivative checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, gradcheck

PRIMITIVES = (
    "add", "residual_add", "scale", "matmul", "conv2d", "relu", "batchnorm", "avgpool", "flatten",
    "softmax_cross_entropy", "l2_norm", "tap",
)


@dataclass
class RandomGraph:
    graph: Graph
    bindings: dict[str, np.ndarray]
    loss: str
    training: bool


def random_graph(rng: np.random.Generator) -> RandomGraph:
    """A float64 conv/residual/linear graph with a scalar loss, random in every size."""
    g = Graph(np.float64)
    b = int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    hw = int(rng.choice([4, 6, 8]))
    width = int(rng.integers(2, 5))
    classes = int(rng.integers(2, 5))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    squared = bool(rng.integers(0, 2))
    training = bool(rng.integers(0, 2))

    x = g.input("x", (None, c, hw, hw))
    g.input("y", (None,), dtype=np.int64)
    h = g.tap("t_in", x)
    w1 = g.parameter("w1", rng.standard_normal((width, c, k, k)) / np.sqrt(c * k * k))
    h = g.conv2d(h, w1, stride=1, padding=k // 2)
    h = g.batchnorm(h, width, name="bn")
    g.buffers["bn.running_mean"] = rng.standard_normal(width) * 0.1
    g.buffers["bn.running_var"] = rng.uniform(0.5, 1.5, width)
    g.params["bn.gamma"] = rng.uniform(0.5, 1.5, width)
    g.params["bn.beta"] = rng.standard_normal(width) * 0.1
    h = g.tap("t_mid", g.relu(h))
    w2 = g.parameter("w2", rng.standard_normal((width, width, 3, 3)) / np.sqrt(width * 9))
    main = g.conv2d(h, w2, stride=stride, padding=1)
    ws = g.parameter("ws", rng.standard_normal((width, width, 1, 1)) / np.sqrt(width))
    short = g.scale(g.conv2d(h, ws, stride=stride, padding=0), float(rng.uniform(0.5, 1.5)))
    h = g.residual_add(main, short)
    side = g.l2_norm(g.tap("t_res", h), squared=squared)
    out_hw = hw // stride
    pool = int(rng.choice([k2 for k2 in (1, 2) if out_hw % k2 == 0])) if rng.integers(0, 2) else None
    h = g.flatten(g.avgpool(h, pool))
    feat = width * (1 if pool is None else (out_hw // pool) ** 2)
    wf = g.parameter("wf", rng.standard_normal((feat, classes)) / np.sqrt(feat))
    bf = g.parameter("bf", rng.standard_normal(classes) * 0.1)
    logits = g.add(g.matmul(h, wf), bf)
    ce = g.softmax_cross_entropy(logits, "y")
    loss = g.add(ce, g.scale(side, 0.05), name="loss")
    g.mark_output(loss)
    bindings = {"x": rng.standard_normal((b, c, hw, hw)), "y": rng.integers(0, classes, b)}
    return RandomGraph(g, bindings, loss, training)


def relu_margin(graph: Graph) -> float:
    """Smallest |input| over all relu nodes in the last evaluation."""
    vals = graph._trace.values
    m = np.inf
    for node in graph.nodes.values():
        if node.op == "relu":
            m = min(m, float(np.abs(vals[node.inputs[0]]).min()))
    return m


def sample_graph(seed: int, min_margin: float = 5e-3, attempts: int = 200) -> RandomGraph:
    """A random graph whose relu inputs all sit at least ``min_margin`` from the kink."""
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        rg = random_graph(rng)
        rg.graph.forward(rg.bindings, training=rg.training, update_stats=False)
        if relu_margin(rg.graph) >= min_margin:
            return rg
    raise RuntimeError(f"no kink-free graph after {attempts} attempts")


@dataclass
class GraphCheck:
    seed: int
    params: int
    max_rel_error: float
    passed: bool


def check_random_graphs(
    count: int = 20, seed: int = 0, tolerance: float = 1e-6, max_coords: int = 64
) -> list[GraphCheck]:
    """Gradcheck every parameter, the input and every tap of ``count`` random graphs."""
    results = []
    for i in range(count):
        s = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rg = sample_graph(s)
        g = rg.graph
        worst = 0.0
        for node in [*g.params, "x", *g.taps]:
            rep = gradcheck(g, node, rg.bindings, rg.loss, tolerance=tolerance, training=rg.training,
                            max_coords=max_coords, seed=s)
            worst = max(worst, rep.max_rel_error)
        n_params = sum(p.size for p in g.params.values())
        results.append(GraphCheck(s, n_params, worst, worst <= tolerance))
    return results
