import numpy as np
import pytest

from msgrad.models import (ModelConfig, build, count_params, default_config, load_checkpoint,
                           save_checkpoint)
from msgrad.tensor import ShapeError, Tensor


KINDS = ["convstack", "resnet", "unet"]


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig("mlp", (1, 1))
        with pytest.raises(ValueError):
            ModelConfig("convstack", (1, 4, 1), kernel_size=4)
        with pytest.raises(ValueError):
            ModelConfig("resnet", (1, 4, 4, 1))
        with pytest.raises(ValueError):
            ModelConfig("unet", (1, 4, 1), depth=2)

    def test_min_spatial(self):
        assert ModelConfig("convstack", (1, 1)).min_spatial == 3
        assert ModelConfig("unet", (1, 4, 8, 16, 1), depth=3).min_spatial == 8


class TestForward:
    @pytest.mark.parametrize("kind", KINDS)
    def test_output_shape(self, kind, rng):
        model, params = build(default_config(kind, 2, 1), rng)
        out = model.forward(params, Tensor(rng.uniform(size=(3, 2, 16, 16))))
        assert out.shape == (3, 1, 16, 16)

    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_final_layer_gives_zero_output(self, kind, rng):
        model, params = build(default_config(kind, 2, 1), rng)
        out = model.forward(params, Tensor(rng.uniform(size=(1, 2, 8, 8))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_init_scale(self, rng):
        model, params = build(ModelConfig("convstack", (2, 8, 1)), rng)
        w = params["conv0.w"].data
        assert np.abs(w).max() <= 1 / np.sqrt(2 * 9)
        np.testing.assert_array_equal(params["conv0.b"].data, 0.0)

    @pytest.mark.parametrize("kind", KINDS)
    def test_input_checks(self, kind, rng):
        model, params = build(default_config(kind, 2, 1), rng)
        with pytest.raises(ShapeError):
            model.forward(params, Tensor(np.zeros((1, 3, 8, 8))))
        with pytest.raises(ShapeError):
            model.forward(params, Tensor(np.zeros((1, 2, 2, 2))))

    def test_unet_divisibility(self, rng):
        model, params = build(ModelConfig("unet", (1, 2, 2, 2, 1), depth=3), rng)
        with pytest.raises(ShapeError):
            model.forward(params, Tensor(np.zeros((1, 1, 10, 10))))

    def test_unet_skip_is_wired(self, rng):
        model, params = build(ModelConfig("unet", (1, 3, 4, 1), depth=2, zero_final=False), rng)
        x = Tensor(rng.uniform(size=(1, 1, 8, 8)))
        assert not np.allclose(model.forward(params, x).data, model.forward_without_skip(params, x).data)

    def test_resnet_depth_zero_is_lift_then_project(self, rng):
        model, params = build(ModelConfig("resnet", (1, 4, 1), depth=0, zero_final=False), rng)
        assert list(params) == ["lift.w", "lift.b", "proj.w", "proj.b"]

    def test_count_params(self, rng):
        _, params = build(ModelConfig("convstack", (2, 4, 1)), rng)
        assert count_params(params) == 4 * 2 * 9 + 4 + 1 * 4 * 9 + 1


class TestCheckpoint:
    @pytest.mark.parametrize("kind", KINDS)
    def test_round_trip(self, kind, rng, tmp_path):
        model, params = build(ModelConfig(kind, *{
            "convstack": ((2, 3, 1),), "resnet": ((2, 3, 1),), "unet": ((2, 3, 4, 1),)}[kind],
            zero_final=False), rng)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, model, params)
        m2, p2 = load_checkpoint(path)
        assert m2.config == model.config
        assert list(p2) == list(params)
        for k in params:
            np.testing.assert_array_equal(p2[k].data, params[k].data)
        x = Tensor(rng.uniform(size=(1, 2, 8, 8)))
        np.testing.assert_array_equal(m2.forward(p2, x).data, model.forward(params, x).data)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.npz"
        np.savez(path, __meta__=np.array('{"format": "other"}'))
        with pytest.raises(ValueError, match="not a msgrad checkpoint"):
            load_checkpoint(path)
