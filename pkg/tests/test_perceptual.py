import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrobust.attacks import AttackConfig, ThreatModel, pgd, perturb
from corrobust.data import Dataset
from corrobust.model import InjectionPoint, ModelGraph, per_sample_loss
from corrobust.perceptual import (
    LpaConfig,
    LpipsConfig,
    RobustnessCurve,
    identity_lpips_config,
    lpa_attack,
    lpa_trajectory,
    lpips,
    lpips_grad,
    lpips_robust_accuracy,
    reference_lpips_config,
)
from corrobust.tensor import Graph


def linear_model(w, b, feat=None):
    """2-pixel linear classifier, optionally with a linear feature tap at layer 2."""
    g = Graph(np.float64)
    x = g.input("x", (None, 2))
    g.input("y", (None,), dtype=np.int64)
    h = g.tap("input", x)
    pts = [InjectionPoint(1, "input", 2)]
    if feat is not None:
        feat = np.asarray(feat, float)
        g.tap("feat", g.matmul(h, g.parameter("feat.w", feat)))
        pts.append(InjectionPoint(2, "feat", feat.shape[1]))
    logits = g.add(g.matmul(h, g.parameter("fc.w", np.asarray(w, float))), g.parameter("fc.b", np.asarray(b, float)),
                   name="logits")
    loss = g.softmax_cross_entropy(logits, "y", name="loss")
    g.mark_output(logits)
    g.mark_output(loss)
    return ModelGraph(g, pts, None, (2,))


LIN = linear_model(np.array([[1.0, 0.5], [-2.0, 1.5]]), [0.1, -0.1], feat=[[2.0, 0.3], [0.0, 1.0]])


def images(rng, n, shape=(3, 8, 8)):
    return rng.uniform(0, 1, (n,) + shape).astype(np.float32)


class TestLpips:
    def test_self_distance(self, tiny_model, rng):
        x = images(rng, 4)
        cfg = reference_lpips_config(tiny_model)
        np.testing.assert_array_equal(lpips(cfg, x, x), 0.0)

    def test_identity_is_l2(self, tiny_model, rng):
        x, x2 = images(rng, 5), images(rng, 5)
        d = lpips(identity_lpips_config(tiny_model), x, x2)
        np.testing.assert_allclose(d, np.linalg.norm((x - x2).reshape(5, -1).astype(np.float64), axis=1), rtol=1e-6)

    def test_weights_times_four_doubles(self, tiny_model, rng):
        x, x2 = images(rng, 3), images(rng, 3)
        cfg = LpipsConfig(tiny_model, (1, 2, 3), (0.1, 0.2, 0.3))
        cfg4 = LpipsConfig(tiny_model, (1, 2, 3), (0.4, 0.8, 1.2))
        np.testing.assert_allclose(lpips(cfg4, x, x2), 2 * lpips(cfg, x, x2), rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_pseudometric(self, tiny_model, seed):
        rng = np.random.default_rng(seed)
        x, x2 = images(rng, 2), images(rng, 2)
        cfg = reference_lpips_config(tiny_model)
        d = lpips(cfg, x, x2)
        assert (d >= 0).all()
        np.testing.assert_allclose(d, lpips(cfg, x2, x), rtol=1e-12)

    def test_centering_ignores_channel_shift(self, rng):
        from corrobust.perceptual import _center

        f = rng.standard_normal((2, 3, 4, 4))
        shifted = f + rng.standard_normal((2, 3, 1, 1))
        np.testing.assert_allclose(_center(shifted), _center(f), atol=1e-12)
        flat = rng.standard_normal((2, 5))
        assert np.array_equal(_center(flat), flat)

    def test_reference_weights(self, tiny_model):
        cfg = reference_lpips_config(tiny_model)
        n = len(tiny_model.injection_points)
        for l, a in zip(cfg.layers, cfg.weights):
            assert a == pytest.approx(1 / (tiny_model.point(l).dim * n))
        assert cfg.center

    @pytest.mark.parametrize("layers,weights", [((), ()), ((1,), (1.0, 2.0)), ((1, 1), (1.0, 1.0)),
                                                ((1,), (-1.0,)), ((1,), (0.0,)), ((7,), (1.0,))])
    def test_bad_config(self, tiny_model, layers, weights):
        with pytest.raises(ValueError):
            LpipsConfig(tiny_model, layers, weights)

    def test_shape_mismatch(self, tiny_model, rng):
        with pytest.raises(ValueError):
            lpips(reference_lpips_config(tiny_model), images(rng, 2), images(rng, 3))

    @pytest.mark.parametrize("center", [False, True])
    def test_grad_matches_finite_difference(self, tiny_model, rng, center):
        m = tiny_model.astype(np.float64)
        cfg = LpipsConfig(m, (1, 2, 4), (0.3, 0.02, 0.05), center=center)
        x = rng.uniform(0.2, 0.8, (2, 3, 8, 8))
        x2 = x + rng.normal(0, 0.05, x.shape)
        _, g = lpips_grad(cfg, x, x2)
        for _ in range(8):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            h = 1e-6
            up, dn = x2.copy(), x2.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (lpips(cfg, x, up) - lpips(cfg, x, dn))[idx[0]] / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestLpa:
    def test_zero_steps(self, tiny_model, tiny_batch):
        x, y = tiny_batch
        cfg = reference_lpips_config(tiny_model)
        assert not lpa_attack(tiny_model, cfg, x, y, LpaConfig(0.5, steps=0)).any()

    def test_infinite_eps_is_plain_ascent(self):
        x = np.array([[0.4, 0.6]])
        y = np.array([0])
        cfg = LpipsConfig(LIN, (1, 2), (1.0, 1.0))
        lpa = LpaConfig(np.inf, lambdas=(1.0,), steps=5, step_size=0.05)
        path = lpa_trajectory(LIN, cfg, x, y, 1.0, lpa)
        delta = np.zeros_like(x)
        for k in range(5):
            _, grads = LIN.loss_grad(perturb(x, delta), y)
            g = grads["input"]
            delta = perturb(x, delta + 0.05 * g / np.linalg.norm(g)) - x
            np.testing.assert_allclose(path[k + 1], delta, rtol=1e-12)

    @pytest.mark.parametrize("eps", [0.02, 0.05, 0.1])
    def test_brute_force_linear(self, eps):
        # exhaustive search over the feasible set at 1e-3 resolution
        x = np.array([[0.4, 0.7]])
        y = np.array([0])
        cfg = LpipsConfig(LIN, (1, 2), (0.5, 1.0))
        d = lpa_attack(LIN, cfg, x, y, LpaConfig(eps, steps=40, step_size=eps / 5))
        got = per_sample_loss(LIN.run(x + d, y)["logits"], y)[0]
        grid = np.arange(-2 * eps, 2 * eps + 1e-12, 1e-3)
        pts = x + np.stack(np.meshgrid(grid, grid), -1).reshape(-1, 2)
        ok = (pts >= 0).all(1) & (pts <= 1).all(1)
        ok &= lpips(cfg, np.repeat(x, len(pts), 0), pts) <= eps
        zeros = np.zeros(int(ok.sum()), int)
        best = per_sample_loss(LIN.run(pts[ok], zeros)["logits"], zeros).max()
        assert lpips(cfg, x, x + d)[0] <= eps
        assert got == pytest.approx(best, rel=0.05)

    def test_feasible_and_in_box(self, tiny_model, tiny_batch):
        x, y = tiny_batch
        cfg = reference_lpips_config(tiny_model)
        lpa = LpaConfig(0.05, lambdas=(0.1, 10.0), steps=5, step_size=0.5)
        d = lpa_attack(tiny_model, cfg, x, y, lpa)
        assert ((x + d) >= 0).all() and ((x + d) <= 1).all()
        assert (lpips(cfg, x, x + d) <= 0.05 + 1e-9).all()

    def test_identity_config_close_to_pgd(self, tiny_model, rng):
        ratios = []
        cfg = identity_lpips_config(tiny_model)
        for _ in range(5):
            x = rng.uniform(0.1, 0.9, (8, 3, 8, 8)).astype(np.float32)
            y = rng.integers(0, 3, 8)
            d_l = lpa_attack(tiny_model, cfg, x, y, LpaConfig(0.5, lambdas=(100.0,), steps=20, step_size=0.05))
            d_p = pgd(tiny_model, x, y, AttackConfig(ThreatModel(2, 0.5), steps=20, step_size=0.05))
            l_l = per_sample_loss(tiny_model.run(x + d_l)["logits"], y).mean()
            l_p = per_sample_loss(tiny_model.run(x + d_p)["logits"], y).mean()
            ratios.append(l_l / l_p)
        assert np.mean(ratios) == pytest.approx(1.0, abs=0.1)

    @pytest.mark.parametrize("kw", [{"lambdas": ()}, {"lambdas": (1.0, 0.1)}, {"lambdas": (0.0,)},
                                    {"eps": -1.0}, {"steps": -1}, {"step_size": 0.0}])
    def test_bad_config(self, kw):
        base = {"eps": 0.1}
        base.update(kw)
        with pytest.raises(ValueError):
            LpaConfig(**base)


class TestRobustAccuracy:
    def test_zero_eps_is_clean(self, tiny_model, rng):
        ds = Dataset(images(rng, 12), rng.integers(0, 3, 12), 3)
        curve = lpips_robust_accuracy(tiny_model, reference_lpips_config(tiny_model), ds, [0.0])
        clean = float(np.mean(tiny_model.run(ds.images)["logits"].argmax(1) == ds.labels))
        assert curve.accuracy == [clean]

    def test_monotone(self, tiny_model, rng):
        ds = Dataset(images(rng, 16), rng.integers(0, 3, 16), 3)
        lpa = LpaConfig(0.0, lambdas=(1.0, 10.0), steps=4, step_size=0.2)
        curve = lpips_robust_accuracy(tiny_model, reference_lpips_config(tiny_model), ds, [0.2, 0.0, 0.05], lpa)
        assert curve.eps == [0.0, 0.05, 0.2]
        assert all(b <= a for a, b in zip(curve.accuracy, curve.accuracy[1:]))

    def test_empty(self, tiny_model):
        with pytest.raises(ValueError):
            lpips_robust_accuracy(tiny_model, reference_lpips_config(tiny_model),
                                  Dataset(np.zeros((0, 3, 8, 8)), np.zeros(0), 3), [0.1])

    def test_csv(self, tmp_path):
        p = tmp_path / "curve.csv"
        RobustnessCurve([0.0, 0.1], [0.9, 0.5]).write_csv(p)
        assert p.read_text().splitlines() == ["eps,accuracy", "0,0.900000", "0.1,0.500000"]
