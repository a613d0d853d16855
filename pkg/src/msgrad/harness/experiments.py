"""Numerical experiments on cross-resolution gradient behaviour.

* :func:`example1` - 1-D convolution with a linear loss; gradient
  differences between adjacent meshes, autodiff checked against the
  closed-form gradient.
* :func:`coarsen_vs_crop` - coarsening residual vs cropping residual over a
  sequence of resolutions of the same smooth images.
* :func:`residual_order` - observed order of the coarsening residual.
* :func:`variance_scaling` - batch-mean variance vs batch size and
  diff-term vs base-term variance.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..estimator import Dataset, LevelPlan, estimate_term_variance
from ..mesh import crop, fit_rnorm, per_sample_grads, restrict, restrict1d
from ..models import ModelConfig, build
from ..tensor import Tape, Tensor, backward, conv1d, mul, scale, tensor_sum
from .tasks import random_fields, render_batch

__all__ = [
    "Example1Row",
    "example1",
    "example1_gradient",
    "example1_oracle",
    "smooth_signal",
    "CoarsenCropRow",
    "coarsen_vs_crop",
    "residual_order",
    "variance_scaling",
    "experiment_model",
    "variance_records",
]


# ---------------------------------------------------------------------------
# Example 1: 1-D convolution, linear loss


def smooth_signal(n: int, rng: np.random.Generator, n_waves: int = 3, max_cycles: float = 3.0) -> np.ndarray:
    """Random sum of low-frequency sinusoids sampled at ``n`` cell centres of [0, 1]."""
    x = (np.arange(n) + 0.5) / n
    v = np.zeros(n)
    for _ in range(n_waves):
        f = rng.uniform(0.5, max_cycles)
        v += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * x + rng.uniform(0, 2 * np.pi))
    return v


def example1_gradient(u: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Autodiff gradient of ``(1/n) (u * theta)^T y``."""
    th = Tensor(theta, requires_grad=True)
    with Tape() as tape:
        loss = scale(tensor_sum(mul(conv1d(Tensor(u), th), Tensor(y))), 1.0 / u.shape[0])
    return backward(loss, tape, {"theta": th})["theta"].data


def example1_oracle(u: np.ndarray, y: np.ndarray, k: int = 3) -> np.ndarray:
    """Closed form: component ``j`` is ``(1/n) sum_m u[m + j - (k-1)/2] y[m]`` with zero padding."""
    n = u.shape[0]
    pad = (k - 1) // 2
    up = np.concatenate([np.zeros(pad), u, np.zeros(pad)])
    return np.array([sum(up[m + j] * y[m] for m in range(n)) / n for j in range(k)])


@dataclass
class Example1Row:
    sigma: float
    level_pair: int
    delta_g: float
    oracle_delta_g: float


def example1(n: int, sigmas: Sequence[float], levels: int, rng: np.random.Generator) -> list[Example1Row]:
    """Gradient differences between meshes ``2^i h`` and ``2^(i+1) h``, ``i < levels - 1``.

    The clean signals and the unit noise are drawn once; each ``sigma``
    scales the same noise added to the input.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    if n % 2 ** levels:
        raise ValueError(f"n={n} is not divisible by 2^{levels}")
    u0 = smooth_signal(n, rng)
    y = smooth_signal(n, rng)
    z = rng.standard_normal(n)
    theta = rng.standard_normal(3)
    rows = []
    for sigma in sigmas:
        u = u0 + float(sigma) * z
        auto = [example1_gradient(restrict1d(u, i), restrict1d(y, i), theta) for i in range(levels)]
        orac = [example1_oracle(restrict1d(u, i), restrict1d(y, i)) for i in range(levels)]
        for i in range(levels - 1):
            rows.append(Example1Row(float(sigma), i, float(np.linalg.norm(auto[i] - auto[i + 1])),
                                    float(np.linalg.norm(orac[i] - orac[i + 1]))))
    return rows


# ---------------------------------------------------------------------------
# 2-D residual experiments


def experiment_model(rng: np.random.Generator, channels=(1, 16, 1)):
    """One-hidden-layer conv stack with every layer randomly initialised."""
    return build(ModelConfig("convstack", channels, zero_final=False), rng)


def _smooth_pairs(n: int, rng: np.random.Generator):
    return random_fields(n, rng), random_fields(n, rng)


@dataclass
class CoarsenCropRow:
    size: int
    h: float
    r_coarsen: float
    r_crop: float
    n_samples: int


def coarsen_vs_crop(n: int, sizes: Sequence[int], crop_fraction: float, rng: np.random.Generator,
                    n_crops: int = 4, model=None, params=None) -> list[CoarsenCropRow]:
    """Coarsening and cropping residuals of the same smooth images at several resolutions.

    ``crop_fraction`` is the fraction of pixels kept by a crop, so the patch
    side is ``round(sqrt(crop_fraction) * size)``. Both residuals are
    averaged over samples (and, for crops, over ``n_crops`` draws).
    """
    if not 0 < crop_fraction <= 1:
        raise ValueError("crop_fraction must lie in (0, 1]")
    if model is None:
        model, params = experiment_model(rng)
    fu, fy = _smooth_pairs(n, rng)
    rows = []
    for size in sizes:
        u = render_batch(fu, size)
        y = render_batch(fy, size)
        g = per_sample_grads(model.forward, params, u, y)
        gc = per_sample_grads(model.forward, params, restrict(u, 1).data, restrict(y, 1).data)
        r_coarsen = float(np.linalg.norm(g - gc, axis=1).mean())
        side = max(model.min_spatial, int(round(math.sqrt(crop_fraction) * size)))
        both = np.concatenate([u, y], axis=1)
        crops = []
        for _ in range(n_crops):
            patch, _ = crop(both, side, rng)
            pu, py = patch.data[:, : u.shape[1]], patch.data[:, u.shape[1] :]
            crops.append(np.linalg.norm(g - per_sample_grads(model.forward, params, pu, py), axis=1).mean())
        rows.append(CoarsenCropRow(size, 1.0 / size, r_coarsen, float(np.mean(crops)), n))
    return rows


def residual_order(n: int, sizes: Sequence[int], rng: np.random.Generator):
    """Fit ``residual = B h^p`` to the coarsening residuals at ``sizes``.

    Returns the fit and the ``(size, h, residual)`` triples.
    """
    model, params = experiment_model(rng)
    fu, fy = _smooth_pairs(n, rng)
    data = []
    for size in sizes:
        u = render_batch(fu, size)
        y = render_batch(fy, size)
        g = per_sample_grads(model.forward, params, u, y)
        gc = per_sample_grads(model.forward, params, restrict(u, 1).data, restrict(y, 1).data)
        data.append((size, 1.0 / size, float(np.linalg.norm(g - gc, axis=1).mean())))
    return fit_rnorm([(h, r) for _, h, r in data]), data


def variance_scaling(data: Dataset, model, params, n: int, repeats: int, rng: np.random.Generator,
                     levels: int = 2):
    """Term variances for batch ``n`` and ``4n`` at the finest level, and for an equal-batch plan.

    Returns ``(var_n, var_4n, equal_plan_terms)``.
    """
    v_n = estimate_term_variance(model, params, data, LevelPlan((n,)), repeats, rng)[0].variance
    v_4n = estimate_term_variance(model, params, data, LevelPlan((4 * n,)), repeats, rng)[0].variance
    equal = estimate_term_variance(model, params, data, LevelPlan((n,) * levels), repeats, rng)
    return v_n, v_4n, equal


def variance_records(seed: int, n_data: int, size: int, batch: int, repeats: int,
                     levels: int = 2) -> list[dict]:
    """Rows for ``variance.csv`` from :func:`variance_scaling` on smooth image pairs.

    The dataset holds at least ``64 * batch`` pairs so that sampling without
    replacement stays close to the infinite-population scaling.
    """
    rng = np.random.default_rng(seed)
    n_data = max(n_data, 64 * batch)
    model, params = experiment_model(rng)
    fu, fy = _smooth_pairs(n_data, rng)
    data = Dataset(render_batch(fu, size), render_batch(fy, size))
    v_n, v_4n, equal = variance_scaling(data, model, params, batch, repeats, rng, levels)
    rows = [
        {"seed": seed, "term": "single", "level": 1, "batch": batch, "variance": v_n, "mean_norm": math.nan},
        {"seed": seed, "term": "single", "level": 1, "batch": 4 * batch, "variance": v_4n,
         "mean_norm": math.nan},
    ]
    rows += [{"seed": seed, "term": t.kind, "level": t.level, "batch": t.batch, "variance": t.variance,
              "mean_norm": t.mean_norm} for t in equal]
    return rows
