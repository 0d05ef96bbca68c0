import json

import numpy as np
import pytest

from corrobust.checkpoint import CheckpointMeta, encode_checkpoint
from corrobust.data import SyntheticSpec, gen_synthetic
from corrobust.training import METHODS, Trainer, TrainConfig, _adv_mask, lr_at_epoch, sgd_update, train

SMALL = dict(widths=[4, 8], batch_size=32, epochs=1)


@pytest.fixture(scope="module")
def desk_small():
    return gen_synthetic(SyntheticSpec(samples_per_class=40, size=8))


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(10, 0.1), (60, 0.01), (120, 0.001)])
    def test_step_decay(self, epoch, lr):
        cfg = TrainConfig(lr=0.1, decay_epochs=[50, 100], epochs=150)
        assert lr_at_epoch(cfg, epoch) == pytest.approx(lr)


class TestSgd:
    def test_zero_lr(self):
        p = {"w": np.array([1.0, 2.0])}
        sgd_update(p, {"w": np.array([5.0, 5.0])}, {}, 0.0, 0.9, 5e-4)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_plain_step(self):
        p = {"w": np.array([1.0, 2.0])}
        sgd_update(p, {"w": np.array([0.5, -1.0])}, {}, 0.1, 0.0, 0.0)
        np.testing.assert_allclose(p["w"], [0.95, 2.1])

    def test_two_steps_quadratic(self):
        # f(w) = 0.5*a*w^2, grad a*w; hand recursion with momentum m and decay wd
        a, lr, m, wd = 3.0, 0.05, 0.9, 0.01
        w = 2.0
        v1 = a * w + wd * w
        w1 = w - lr * v1
        v2 = m * v1 + a * w1 + wd * w1
        w2 = w1 - lr * v2
        p, vel = {"w": np.array([w])}, {}
        for _ in range(2):
            sgd_update(p, {"w": a * p["w"]}, vel, lr, m, wd)
        assert p["w"][0] == pytest.approx(w2, rel=1e-12)
        assert vel["w"][0] == pytest.approx(v2, rel=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"method": "mixup"}, {"adv_fraction": 0.3}, {"norm": "l1"}, {"eps": -1.0},
                                    {"epochs": 0}, {"batch_size": 0}, {"sigma": -0.1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 3, "learning_rate": 0.1})

    def test_roundtrip(self, tmp_path):
        cfg = TrainConfig(method="rlat", eps=0.2, rlat_layers=[1, 3], seed=5)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_json(p) == cfg

    def test_methods(self):
        assert set(METHODS) == {"standard", "gaussian", "fgm", "fgsm", "pgd", "rlat"}


class TestMask:
    @pytest.mark.parametrize("frac", [0.25, 0.5, 0.75, 1.0])
    def test_exact_count(self, frac, rng):
        for b in (1, 7, 32, 128):
            assert _adv_mask(b, frac, rng).sum() == int(np.floor(frac * b))


class TestTrain:
    def test_fgm_zero_matches_standard(self, desk_small):
        a = Trainer(TrainConfig(method="standard", **SMALL), desk_small)
        b = Trainer(TrainConfig(method="fgm", eps=0.0, **SMALL), desk_small)
        x, y = desk_small.images[:32], desk_small.labels[:32]
        _, ga = a.train_batch(x, y, 0.1)
        _, gb = b.train_batch(x, y, 0.1)
        for k in ga:
            assert np.array_equal(ga[k], gb[k])

    def test_rlat_zero_matches_standard(self, desk_small):
        a = Trainer(TrainConfig(method="standard", **SMALL), desk_small)
        b = Trainer(TrainConfig(method="rlat", eps=0.0, **SMALL), desk_small)
        x, y = desk_small.images[:32], desk_small.labels[:32]
        _, ga = a.train_batch(x, y, 0.1)
        _, gb = b.train_batch(x, y, 0.1)
        for k in ga:
            assert np.array_equal(ga[k], gb[k])

    @pytest.mark.parametrize("method,kw", [("standard", {}), ("gaussian", {"sigma": 0.1, "gaussian_mode": "half"}),
                                           ("fgsm", {"eps": 0.03, "norm": "linf"}), ("pgd", {"eps": 0.3, "pgd_steps": 2}),
                                           ("rlat", {"eps": 0.3, "adv_fraction": 0.5})])
    def test_same_seed_bit_identical(self, desk_small, method, kw):
        blobs = []
        for _ in range(2):
            m, _ = train(TrainConfig(method=method, seed=9, **SMALL, **kw), desk_small)
            blobs.append(encode_checkpoint(m, CheckpointMeta(method, 9, 1)))
        assert blobs[0] == blobs[1]

    def test_different_seed_differs(self, desk_small):
        a, _ = train(TrainConfig(seed=1, **SMALL), desk_small)
        b, _ = train(TrainConfig(seed=2, **SMALL), desk_small)
        assert not np.array_equal(a.params["fc.w"], b.params["fc.w"])

    def test_loss_decreases_first_epoch(self):
        ds = gen_synthetic(SyntheticSpec(samples_per_class=200, size=16, seed=4))
        wins = 0
        seeds = range(20)
        for s in seeds:
            _, tlog = train(TrainConfig(seed=s, widths=[8, 16], batch_size=32, epochs=1), ds)
            bl = tlog.batch_losses
            wins += np.mean(bl[-5:]) < np.mean(bl[:5])
        assert wins >= 19

    def test_dataset_too_small(self, desk_small):
        with pytest.raises(ValueError):
            train(TrainConfig(batch_size=1000), desk_small)

    def test_log_records(self, desk_small):
        _, tlog = train(TrainConfig(**{**SMALL, "epochs": 2}), desk_small, eval_set=desk_small)
        assert [r.epoch for r in tlog.records] == [1, 2]
        assert len(tlog.batch_losses) == 2 * (len(desk_small) // 32)
        assert 0.0 <= tlog.records[-1].clean_eval_acc <= 1.0
