import numpy as np
import pytest

from msgrad.mesh import (MeshLevel, crop, fit_rnorm, grad_residual, per_sample_grads, restrict,
                         restrict1d)
from msgrad.models import ModelConfig, build
from msgrad.tensor import ShapeError, Tape, Tensor, backward, mse_loss, params_flat


class TestMeshLevel:
    def test_scale_and_spatial(self):
        assert MeshLevel(1).scale == 1
        assert MeshLevel(3).scale == 4
        assert MeshLevel(3).spatial(32) == 8

    def test_invalid(self):
        with pytest.raises(ValueError):
            MeshLevel(0)
        with pytest.raises(ShapeError):
            MeshLevel(3).spatial(6)


class TestRestrict:
    def test_constant_is_preserved(self):
        x = np.full((2, 3, 8, 8), 0.37)
        np.testing.assert_array_equal(restrict(x, 3).data, np.full((2, 3, 1, 1), 0.37))

    def test_block_means(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))
        expected = x.reshape(1, 1, 2, 4, 2, 4).mean(axis=(3, 5))
        np.testing.assert_allclose(restrict(x, 2).data, expected, rtol=1e-14, atol=1e-14)

    def test_zero_levels_is_identity(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        np.testing.assert_array_equal(restrict(x, 0).data, x)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            restrict(np.zeros((1, 1, 12, 12)), 3)

    def test_restrict1d(self):
        np.testing.assert_array_equal(restrict1d(np.arange(8.0), 2), [1.5, 5.5])
        with pytest.raises(ShapeError):
            restrict1d(np.zeros(6), 2)


class TestCrop:
    def test_offsets_and_content(self, rng):
        x = rng.standard_normal((3, 2, 10, 10))
        patch, offsets = crop(x, 4, rng)
        assert patch.shape == (3, 2, 4, 4)
        for i, (r, c) in enumerate(offsets):
            assert 0 <= r <= 6 and 0 <= c <= 6
            np.testing.assert_array_equal(patch.data[i], x[i, :, r : r + 4, c : c + 4])

    def test_full_size_crop_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 6, 6))
        patch, offsets = crop(x, 6, rng)
        np.testing.assert_array_equal(patch.data, x)
        assert not offsets.any()

    def test_too_large(self, rng):
        with pytest.raises(ShapeError):
            crop(np.zeros((1, 1, 4, 4)), 5, rng)


class TestResiduals:
    @pytest.fixture
    def model(self, rng):
        return build(ModelConfig("convstack", (1, 4, 1), zero_final=False), rng)

    def test_per_sample_grads_match_single_tapes(self, model, rng):
        m, params = model
        u = rng.uniform(size=(3, 1, 8, 8))
        y = rng.uniform(size=(3, 1, 8, 8))
        g = per_sample_grads(m.forward, params, u, y)
        for i in range(3):
            with Tape() as tape:
                loss = mse_loss(m.forward(params, Tensor(u[i : i + 1])), Tensor(y[i : i + 1]))
            np.testing.assert_allclose(g[i], params_flat(backward(loss, tape, params)), rtol=1e-13)

    def test_same_level_is_zero(self, model, rng):
        m, params = model
        u = rng.uniform(size=(2, 1, 8, 8))
        r = grad_residual(m, params, u, u[:, :1], MeshLevel(2), MeshLevel(2))
        assert r.mean_norm == 0.0
        np.testing.assert_array_equal(r.per_sample, [0.0, 0.0])

    def test_constant_images_have_small_residual_away_from_boundary(self, model, rng):
        # constant inputs are represented exactly on every mesh, so only boundary
        # effects separate the gradients and they shrink with resolution
        m, params = model
        u = np.full((1, 1, 32, 32), 0.5)
        y = np.full((1, 1, 32, 32), 0.2)
        r_fine = grad_residual(m, params, u, y, MeshLevel(1), MeshLevel(2)).mean_norm
        r_coarse = grad_residual(m, params, u, y, MeshLevel(2), MeshLevel(3)).mean_norm
        assert r_fine < r_coarse

    def test_below_min_spatial(self, model):
        m, params = model
        with pytest.raises(ShapeError):
            grad_residual(m, params, np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), MeshLevel(1), MeshLevel(3))


class TestFitRnorm:
    def test_recovers_power_law(self):
        fit = fit_rnorm([(h, 3.0 * h ** 1.5) for h in (1 / 8, 1 / 16, 1 / 32)])
        assert fit.p == pytest.approx(1.5, abs=1e-12)
        assert fit.B == pytest.approx(3.0, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least 3"):
            fit_rnorm([(0.1, 1.0), (0.05, 0.5)])
        with pytest.raises(ValueError, match="positive"):
            fit_rnorm([(0.1, 1.0), (0.05, 0.0), (0.025, 0.1)])
        with pytest.raises(ValueError, match="not positive"):
            fit_rnorm([(0.1, 1.0), (0.05, 2.0), (0.025, 4.0)])
