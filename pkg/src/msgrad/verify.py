"""Self-checks behind ``msgrad verify``.

Each suite returns a list of :class:`Check` results and never raises on a
failed comparison, so a caller can report every failure at once.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .estimator import Dataset, LevelPlan, TelescopicTerm, mge_gradient, mge_loss
from .mesh import MeshLevel
from .models import ModelConfig, build
from .tensor import (Tape, Tensor, add, avgpool2, backward, concat_channels, conv1d, conv2d,
                     finite_diff_grad, mse_loss, mul, relu, scale, sub, tensor_sum,
                     upsample_nearest2)
from .trainer import TrainConfig, train
from .workunits import WorkUnitLedger, closed_form, mge_step_cost

__all__ = ["Check", "SUITES", "run_suites", "rel_error", "gradient_suite", "telescopic_suite",
           "unbiased_suite", "wu_suite", "verify_models"]


@dataclass
class Check:
    suite: str
    name: str
    ok: bool
    detail: str = ""


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the reference's max abs entry."""
    scale_ = max(float(np.max(np.abs(b))), 1e-12) if b.size else 1.0
    return float(np.max(np.abs(a - b))) / scale_ if a.size else 0.0


def _grad_check(name, fn, params, tol=1e-5) -> Check:
    with Tape() as tape:
        loss = fn(params)
    auto = backward(loss, tape, params)
    fd = finite_diff_grad(fn, params, step=1e-5)
    err = max(rel_error(auto[k].data, fd[k].data) for k in params)
    return Check("gradient", name, err < tol, f"rel err {err:.2e}")


def _var(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _primitive_cases(rng):
    r4 = rng.standard_normal((2, 3, 6, 6))

    def weighted(t, w):
        return tensor_sum(mul(t, Tensor(w)))

    yield "conv2d", {"x": _var(rng, 2, 2, 6, 6), "w": _var(rng, 3, 2, 3, 3), "b": _var(rng, 3)}, \
        lambda p: weighted(conv2d(p["x"], p["w"], p["b"]), r4)
    yield "conv2d_k5", {"x": _var(rng, 1, 2, 6, 6), "w": _var(rng, 3, 2, 5, 5), "b": _var(rng, 3)}, \
        lambda p: weighted(conv2d(p["x"], p["w"], p["b"]), r4[:1])
    r1 = rng.standard_normal(16)
    yield "conv1d", {"x": _var(rng, 16), "k": _var(rng, 3)}, lambda p: weighted(conv1d(p["x"], p["k"]), r1)
    r_pool = rng.standard_normal((2, 3, 3, 3))
    yield "avgpool2", {"x": _var(rng, 2, 3, 6, 6)}, lambda p: weighted(avgpool2(p["x"]), r_pool)
    r_up = rng.standard_normal((2, 3, 6, 6))
    yield "upsample_nearest2", {"x": _var(rng, 2, 3, 3, 3)}, lambda p: weighted(upsample_nearest2(p["x"]), r_up)
    yield "relu", {"x": _var(rng, 2, 3, 6, 6, away_from_zero=True)}, lambda p: weighted(relu(p["x"]), r4)
    yield "add", {"a": _var(rng, 2, 3, 6, 6), "b": _var(rng, 2, 3, 6, 6)}, \
        lambda p: weighted(add(p["a"], p["b"]), r4)
    yield "sub", {"a": _var(rng, 2, 3, 6, 6), "b": _var(rng, 2, 3, 6, 6)}, \
        lambda p: weighted(sub(p["a"], p["b"]), r4)
    yield "mul", {"a": _var(rng, 2, 3, 6, 6), "b": _var(rng, 2, 3, 6, 6)}, \
        lambda p: weighted(mul(p["a"], p["b"]), r4)
    yield "scale", {"a": _var(rng, 2, 3, 6, 6)}, lambda p: weighted(scale(p["a"], -1.7), r4)
    r_cat = rng.standard_normal((2, 5, 6, 6))
    yield "concat_channels", {"a": _var(rng, 2, 2, 6, 6), "b": _var(rng, 2, 3, 6, 6)}, \
        lambda p: weighted(concat_channels(p["a"], p["b"]), r_cat)
    target = Tensor(rng.standard_normal((2, 3, 6, 6)))
    yield "mse_loss", {"x": _var(rng, 2, 3, 6, 6)}, lambda p: mse_loss(p["x"], target)


def verify_models(rng: np.random.Generator, size: int = 8):
    """``(kind, model, params, u, y)`` for every architecture with all layers random."""
    configs = [
        ModelConfig("convstack", (2, 4, 4, 1), zero_final=False),
        ModelConfig("resnet", (2, 4, 1), depth=1, zero_final=False),
        ModelConfig("unet", (2, 3, 4, 1), depth=2, zero_final=False),
    ]
    for cfg in configs:
        model, params = build(cfg, rng)
        u = Tensor(rng.uniform(0, 1, (2, 2, size, size)))
        y = Tensor(rng.uniform(0, 1, (2, 1, size, size)))
        yield cfg.kind, model, params, u, y


def gradient_suite(seed: int = 0) -> list[Check]:
    """Autodiff vs central differences for every primitive and every model at 8x8."""
    rng = np.random.default_rng(seed)
    checks = [_grad_check(name, fn, params) for name, params, fn in _primitive_cases(rng)]
    for kind, model, params, u, y in verify_models(rng):
        checks.append(_grad_check(f"model_{kind}", lambda p, m=model, u=u, y=y: mse_loss(m.forward(p, u), y),
                                  params))
    return checks


def _random_dataset(rng, n, size, c_in=2, c_out=1) -> Dataset:
    return Dataset(rng.uniform(0, 1, (n, c_in, size, size)), rng.uniform(0, 1, (n, c_out, size, size)))


def telescopic_suite(seed: int = 0, levels=(1, 2, 3, 4)) -> list[Check]:
    """Full-batch telescopic loss equals the fine-mesh loss."""
    rng = np.random.default_rng(seed)
    checks = []
    for kind, model, params, _, _ in verify_models(rng):
        size = model.min_spatial * 2 ** (max(levels) - 1)
        data = _random_dataset(rng, 3, size)
        u, y = data.batch(1, range(3))
        fine = mse_loss(model.forward(params, u), y).item()
        for L in levels:
            loss, _, _ = mge_loss(model, params, data, LevelPlan((3,) * L), full_batch=True)
            err = abs(loss.item() - fine)
            checks.append(Check("telescopic", f"{kind}_L{L}", err <= 1e-12, f"abs err {err:.2e}"))
    return checks


def unbiased_suite(seed: int = 0, batch_sizes=(2, 1)) -> list[Check]:
    """Average of the two-level estimate over every equally likely draw equals the fine gradient."""
    rng = np.random.default_rng(seed)
    checks = []
    n_data = 4
    plan = LevelPlan(batch_sizes)
    for kind, model, params, _, _ in verify_models(rng):
        data = _random_dataset(rng, n_data, model.min_spatial * 2)
        full = mge_gradient(model, params, data, LevelPlan((n_data,)), full_batch=True).grads
        total = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        count = 0
        for base in itertools.combinations(range(n_data), plan.batch_sizes[1]):
            for diff in itertools.combinations(range(n_data), plan.batch_sizes[0]):
                terms = [TelescopicTerm("base", MeshLevel(2), None, base),
                         TelescopicTerm("diff", MeshLevel(1), MeshLevel(2), diff)]
                g = mge_gradient(model, params, data, plan, terms=terms).grads
                for k in total:
                    total[k] += g[k].data
                count += 1
        err = max(float(np.max(np.abs(total[k] / count - full[k].data))) for k in total)
        checks.append(Check("unbiased", kind, err <= 1e-10, f"max abs err {err:.2e} over {count} draws"))
    return checks


def wu_suite() -> list[Check]:
    """Closed forms, their ledger counterparts and the two-level identity."""
    checks = []

    def eq(name, got, want):
        checks.append(Check("wu", name, got == want, f"{got} vs {want}"))

    eq("single_480000", closed_form("single", 16, 2000, 4), Fraction(480000))
    eq("multiscale_74000", closed_form("multiscale", 16, 2000, 4), Fraction(74000))
    eq("full_multiscale_28750", closed_form("full_multiscale", 16, [2000, 1000, 500, 250], 4), Fraction(28750))
    eq("full_multiscale_equal_126000", closed_form("full_multiscale", 16, 2000, 4), Fraction(126000))
    for n in (4, 16, 64):
        eq(f"two_level_{n}", mge_step_cost([n // 4, n]), Fraction(9 * n, 16))
    runs = [("single", (2000,)), ("multiscale", (2000,)), ("full_multiscale", (2000, 1000, 500, 250)),
            ("full_multiscale", (2000,) * 4)]
    for strategy, iters in runs:
        hist = train(TrainConfig(strategy=strategy, L=4, N1=16, iters_per_level=iters, dry_run=True), None, None)
        want = closed_form(strategy, 16, list(iters), 4)
        eq(f"ledger_{strategy}_{'_'.join(map(str, iters[:2]))}", hist.total_wu, want)
    a = WorkUnitLedger().charge(1, 3).charge(2, 5)
    b = WorkUnitLedger().charge(3, 7)
    eq("additivity", (a + b).total, a.total + b.total)
    return checks


SUITES = {
    "gradient": gradient_suite,
    "telescopic": telescopic_suite,
    "unbiased": unbiased_suite,
    "wu": wu_suite,
}


def run_suites(names=None) -> list[Check]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; expected {list(SUITES)}")
    out = []
    for n in names:
        out.extend(SUITES[n]())
    return out
