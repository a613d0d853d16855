import math

import numpy as np
import pytest

from msgrad.estimator import Dataset
from msgrad.harness.tasks import gen_denoise
from msgrad.models import ModelConfig, build
from msgrad.tensor import NonFiniteError, Tensor
from msgrad.trainer import (AdamState, TrainConfig, adam_step, evaluate, lr_at, sgd_step, ssim,
                            train)
from msgrad.workunits import closed_form


def one(x):
    return {"t": Tensor(np.array(x, dtype=np.float64))}


class TestOptimizers:
    def test_sgd_quadratic_bowl(self):
        # gradient of 0.5 |theta|^2 is theta
        p = one([1.0])
        assert sgd_step(p, one([1.0]), 0.1)["t"].data[0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_lr(self):
        p = one([1.0, -2.0])
        np.testing.assert_array_equal(sgd_step(p, one([3.0, 4.0]), 0.0)["t"].data, [1.0, -2.0])
        _, q = adam_step(AdamState(), p, one([3.0, 4.0]), 0.0)
        np.testing.assert_array_equal(q["t"].data, [1.0, -2.0])

    def test_adam_first_step_is_sign(self):
        _, q = adam_step(AdamState(), one([0.0, 0.0, 0.0]), one([5.0, -0.01, 300.0]), 1e-3)
        np.testing.assert_allclose(q["t"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-5)

    def test_adam_matches_hand_recurrence(self):
        st = AdamState()
        p = one([1.0])
        m = v = 0.0
        theta = 1.0
        for t, g in enumerate([0.5, -0.2, 0.3], start=1):
            st, p = adam_step(st, p, one([g]), 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["t"].data[0] == pytest.approx(theta, abs=1e-15)

    def test_nan_aborts_with_step(self):
        with pytest.raises(NonFiniteError, match="step 7"):
            sgd_step(one([1.0]), one([np.nan]), 0.1, step=7)
        with pytest.raises(NonFiniteError, match="step 3"):
            adam_step(AdamState(), one([1.0]), one([np.inf]), 0.1, step=3)

    def test_cosine(self):
        assert lr_at(1.0, 0, 10, "cosine") == 1.0
        assert lr_at(1.0, 5, 10, "cosine") == pytest.approx(0.5)
        assert lr_at(1.0, 5, 10, "constant") == 1.0


class TestEvaluate:
    def test_mse_offset(self, rng):
        model, params = build(ModelConfig("convstack", (1, 1), zero_final=True), rng)
        y = rng.uniform(size=(3, 1, 8, 8))
        # zero model predicts 0, so targets of 0.1 give MSE 0.01
        assert evaluate(model, params, Dataset(y, np.full_like(y, 0.1))) == pytest.approx(0.01, abs=1e-15)

    def test_ssim_identity_and_symmetry(self, rng):
        a = rng.uniform(size=(2, 1, 16, 16))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
        assert ssim(a, b) < 1.0

    def test_ssim_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))

    def test_empty(self, rng):
        model, params = build(ModelConfig("convstack", (1, 1)), rng)
        with pytest.raises(ValueError, match="empty"):
            evaluate(model, params, Dataset(np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8))))


@pytest.fixture(scope="module")
def tiny():
    task = gen_denoise(16, 16, np.random.default_rng(0), n_eval=4, seed=0)
    model, params = build(ModelConfig("convstack", (2, 4, 1)), np.random.default_rng(1))
    return task, model, params


def tiny_config(strategy, **kw):
    iters = (4, 3, 2) if strategy == "full_multiscale" else (3,)
    return TrainConfig(strategy=strategy, L=3, N1=1, iters_per_level=iters, lr=1e-2, eval_every=2, **kw)


class TestTrain:
    @pytest.mark.parametrize("strategy", ["single", "multiscale", "full_multiscale"])
    def test_ledger_equals_closed_form(self, tiny, strategy):
        task, model, params = tiny
        cfg = tiny_config(strategy)
        hist = train(cfg, task, model, params)
        assert hist.total_wu == closed_form(strategy, 1, list(cfg.iters_per_level), 3)
        assert hist.ledger.recompute() == hist.total_wu
        dry = train(tiny_config(strategy, dry_run=True), None, None)
        assert dry.total_wu == hist.total_wu
        assert dry.ledger.entries == hist.ledger.entries

    def test_history_shape(self, tiny):
        task, model, params = tiny
        hist = train(tiny_config("full_multiscale"), task, model, params)
        assert [r.level for r in hist.records][0] == 3 and hist.records[-1].level == 1
        steps = [r.step for r in hist.records]
        assert steps == sorted(steps) and steps[-1] == 9
        wus = [r.wu for r in hist.records]
        assert wus == sorted(wus)
        assert len(hist.step_losses) == 9

    def test_reproducible(self, tiny):
        task, model, params = tiny
        a = train(tiny_config("multiscale"), task, model, params)
        b = train(tiny_config("multiscale"), task, model, params)
        assert a.rows() == b.rows()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_input_params_untouched(self, tiny):
        task, model, params = tiny
        before = {k: v.data.copy() for k, v in params.items()}
        train(tiny_config("single"), task, model, params)
        for k in params:
            np.testing.assert_array_equal(params[k].data, before[k])

    def test_training_reduces_loss(self, tiny):
        task, model, params = tiny
        cfg = TrainConfig(strategy="multiscale", L=3, N1=2, iters_per_level=(30,), lr=1e-2, eval_every=30)
        hist = train(cfg, task, model, params)
        assert hist.records[-1].loss < hist.records[0].loss

    def test_sgd_and_constant_schedule(self, tiny):
        task, model, params = tiny
        hist = train(tiny_config("single", optimizer="sgd", lr_schedule="constant"), task, model, params)
        assert np.isfinite(hist.final().loss)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="iteration count"):
            TrainConfig(strategy="full_multiscale", L=3, iters_per_level=(1,))
        with pytest.raises(ValueError):
            TrainConfig(strategy="annealed")
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")

    def test_task_mismatch_fails_before_training(self, tiny):
        task, model, params = tiny
        with pytest.raises(ValueError, match="cannot be coarsened"):
            train(TrainConfig(L=4, N1=1, iters_per_level=(1,)), task, model, params)
        with pytest.raises(ValueError, match="training set"):
            train(TrainConfig(strategy="single", L=3, N1=4, iters_per_level=(1,)), task, model, params)
        other, p2 = build(ModelConfig("convstack", (1, 4, 1)), np.random.default_rng(0))
        with pytest.raises(ValueError, match="channels"):
            train(tiny_config("single"), task, other, p2)
