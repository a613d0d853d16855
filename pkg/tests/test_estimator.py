import numpy as np
import pytest

from msgrad.estimator import (Dataset, LevelPlan, draw_terms, equivalent_fine_batch, error_budget,
                              estimate_term_variance, mge_gradient, mge_loss, plan_batches,
                              single_scale_gradient)
from msgrad.mesh import RnormFit
from msgrad.models import ModelConfig, build
from msgrad.tensor import ShapeError, Tape, backward, mse_loss
from msgrad.verify import telescopic_suite, unbiased_suite
from msgrad.workunits import WorkUnitLedger


@pytest.fixture
def setup(rng):
    model, params = build(ModelConfig("convstack", (2, 4, 1), zero_final=False), rng)
    data = Dataset(rng.uniform(size=(12, 2, 16, 16)), rng.uniform(size=(12, 1, 16, 16)))
    return model, params, data


class TestPlans:
    def test_doubling(self):
        assert plan_batches(4, 16).batch_sizes == (16, 32, 64, 128)

    def test_explicit(self):
        assert plan_batches(2, 3, "explicit", [3, 7]).batch_sizes == (3, 7)
        with pytest.raises(ValueError):
            plan_batches(2, 3, "explicit", [4, 7])
        with pytest.raises(ValueError):
            plan_batches(2, 3, "fancy")

    def test_stage(self):
        st = plan_batches(4, 2).stage(3)
        assert st.first_level == 3 and st.batch_sizes == (8, 16)
        with pytest.raises(ValueError):
            plan_batches(4, 2).stage(5)

    def test_invalid_batch(self):
        with pytest.raises(ValueError):
            LevelPlan((2, 0))

    def test_model_too_deep(self, setup):
        model, params, data = setup
        with pytest.raises(ShapeError):
            mge_gradient(model, params, data, LevelPlan((1,) * 4), full_batch=True)


class TestDraws:
    def test_order_and_levels(self, rng):
        terms = draw_terms(LevelPlan((2, 3, 4)), 10, rng)
        assert [t.kind for t in terms] == ["base", "diff", "diff"]
        assert terms[0].level_fine.index == 3
        assert [(t.level_fine.index, t.level_coarse.index) for t in terms[1:]] == [(1, 2), (2, 3)]
        assert [len(t.sample_ids) for t in terms] == [4, 2, 3]

    def test_without_replacement(self, rng):
        for t in draw_terms(LevelPlan((10,)), 10, rng):
            assert sorted(t.sample_ids) == list(range(10))

    def test_batch_too_large(self, rng):
        with pytest.raises(ValueError):
            draw_terms(LevelPlan((11,)), 10, rng)

    def test_seeded(self):
        a = draw_terms(LevelPlan((2, 4)), 10, np.random.default_rng(5))
        b = draw_terms(LevelPlan((2, 4)), 10, np.random.default_rng(5))
        assert a == b


class TestEstimator:
    def test_single_level_equals_plain_gradient(self, setup):
        model, params, data = setup
        ids = [0, 3, 5]
        est = single_scale_gradient(model, params, data, 3, ids=ids)
        u, y = data.batch(1, ids)
        with Tape() as tape:
            loss = mse_loss(model.forward(params, u), y)
        ref = backward(loss, tape, params)
        for k in params:
            np.testing.assert_allclose(est.grads[k].data, ref[k].data, rtol=1e-13, atol=1e-15)
        assert est.wu_cost == 3

    def test_loss_tape_gradient_matches_term_sum(self, setup):
        model, params, data = setup
        plan = LevelPlan((2, 4, 8))
        terms = draw_terms(plan, len(data), np.random.default_rng(0))
        with Tape() as tape:
            loss, _, cost = mge_loss(model, params, data, plan, terms=terms)
        g_tape = backward(loss, tape, params)
        est = mge_gradient(model, params, data, plan, terms=terms)
        for k in params:
            np.testing.assert_allclose(est.grads[k].data, g_tape[k].data, rtol=1e-12, atol=1e-15)
        assert cost == est.wu_cost == plan.cost()

    def test_workers_are_bitwise_identical(self, setup):
        model, params, data = setup
        plan = LevelPlan((2, 4, 8))
        a = mge_gradient(model, params, data, plan, np.random.default_rng(3))
        b = mge_gradient(model, params, data, plan, np.random.default_rng(3), workers=3)
        for k in params:
            np.testing.assert_array_equal(a.grads[k].data, b.grads[k].data)
        assert a.loss == b.loss

    def test_ledger_charges(self, setup):
        model, params, data = setup
        led = WorkUnitLedger()
        plan = LevelPlan((2, 4, 8))
        mge_gradient(model, params, data, plan, np.random.default_rng(0), ledger=led)
        assert led.total == plan.cost()
        assert led.entries == [(3, 8), (1, 2), (2, 2), (2, 4), (3, 4)]

    def test_term_stats(self, setup):
        model, params, data = setup
        est = mge_gradient(model, params, data, LevelPlan((3, 3)), np.random.default_rng(0), term_stats=True)
        assert [s.kind for s in est.term_stats] == ["base", "diff"]

    def test_telescopic_collapse(self):
        assert all(c.ok for c in telescopic_suite(levels=(1, 2, 3)))

    def test_unbiased_over_all_draws(self):
        assert all(c.ok for c in unbiased_suite())


class TestVariance:
    def test_full_batch_variance_is_zero(self, setup):
        model, params, data = setup
        tv = estimate_term_variance(model, params, data, LevelPlan((12, 12)), 3, full_batch=True)
        assert all(t.variance < 1e-28 for t in tv)

    def test_repeats(self, setup):
        model, params, data = setup
        with pytest.raises(ValueError):
            estimate_term_variance(model, params, data, LevelPlan((2,)), 1, np.random.default_rng(0))


class TestErrorBudget:
    def test_two_level(self):
        eb = error_budget(2.0, RnormFit(1.0, 1.0, ()), LevelPlan((4, 16)), h1=1 / 32)
        assert eb.base_term == pytest.approx(2.0 / 4)
        assert eb.diff_terms == [pytest.approx(2.0 * (1 / 32) / 2)]
        assert eb.e == pytest.approx(eb.base_term + eb.diff_terms[0])
        assert eb.equivalent_n1 == pytest.approx(equivalent_fine_batch(16, 1.0, 1.0, 1 / 32))

    def test_equivalent_batch_limit(self):
        # as h -> 0 the coarse-batch equivalent tends to a quarter of the fine batch
        assert equivalent_fine_batch(64, 1.0, 1.0, 0.0) == 16

    def test_invalid(self):
        with pytest.raises(ValueError):
            error_budget(1.0, (1.0, 0.0), LevelPlan((1, 1)), 0.1)
