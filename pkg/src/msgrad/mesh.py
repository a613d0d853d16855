"""Mesh hierarchy: restriction, cropping and cross-resolution gradient residuals."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tape, Tensor, avgpool2, backward, mse_loss, params_flat

__all__ = [
    "MeshLevel",
    "RnormFit",
    "restrict",
    "restrict1d",
    "crop",
    "per_sample_grads",
    "grad_residual",
    "ResidualResult",
    "fit_rnorm",
]


@dataclass(frozen=True)
class MeshLevel:
    """Level ``index`` of the hierarchy; 1 is the finest mesh."""

    index: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"mesh level must be >= 1, got {self.index}")

    @property
    def scale(self) -> int:
        """Pixel size relative to the finest mesh."""
        return 2 ** (self.index - 1)

    def spatial(self, size: int) -> int:
        if size % self.scale:
            raise ShapeError(f"size {size} is not divisible by 2^{self.index - 1}")
        return size // self.scale


@dataclass(frozen=True)
class RnormFit:
    B: float
    p: float
    residuals: tuple[tuple[float, float], ...]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def restrict(image, levels: int) -> Tensor:
    """Apply 2x2 mean pooling ``levels`` times to an ``(N, C, H, W)`` batch."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if levels < 0:
        raise ValueError("levels must be >= 0")
    h, w = x.shape[2], x.shape[3]
    f = 2 ** levels
    if h % f or w % f:
        raise ShapeError(f"{h}x{w} image cannot be restricted {levels} times")
    for _ in range(levels):
        x = avgpool2(x)
    return x


def restrict1d(signal, levels: int) -> np.ndarray:
    """Pairwise averaging of a 1-D signal, repeated ``levels`` times."""
    s = _as_array(signal)
    if s.ndim != 1:
        raise ShapeError(f"restrict1d expects a 1-D signal, got shape {s.shape}")
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if s.shape[0] % (2 ** levels):
        raise ShapeError(f"length {s.shape[0]} is not divisible by 2^{levels}")
    for _ in range(levels):
        s = (s[0::2] + s[1::2]) * 0.5
    return s


def crop(image, size: int, rng: np.random.Generator):
    """Random ``size x size`` patch per batch element.

    Returns the cropped batch and an ``(N, 2)`` array of top-left offsets.
    """
    x = _as_array(image)
    n, _, h, w = x.shape
    if size < 1 or size > min(h, w):
        raise ShapeError(f"crop size {size} does not fit a {h}x{w} image")
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    out = np.stack([x[i, :, r : r + size, c : c + size] for i, (r, c) in enumerate(zip(rows, cols))])
    return Tensor(out), np.stack([rows, cols], axis=1)


def per_sample_grads(forward: Callable, params, u, y) -> np.ndarray:
    """Flattened gradient of the per-image MSE for every sample, ``(N, P)``."""
    u = _as_array(u)
    y = _as_array(y)
    rows = []
    for i in range(u.shape[0]):
        with Tape() as tape:
            loss = mse_loss(forward(params, Tensor(u[i : i + 1])), Tensor(y[i : i + 1]))
        rows.append(params_flat(backward(loss, tape, params)))
    return np.stack(rows)


@dataclass
class ResidualResult:
    per_sample: np.ndarray
    mean_norm: float
    """Norm of the batch-mean difference vector."""


def grad_residual(model, params, u, y, level_fine: MeshLevel, level_coarse: MeshLevel) -> ResidualResult:
    """Per-sample ``||g_fine - g_coarse||`` for the same samples at two mesh levels.

    ``u`` and ``y`` are finest-mesh batches; both are restricted identically.
    """
    u = _as_array(u)
    y = _as_array(y)
    size = u.shape[2]
    for lvl in (level_fine, level_coarse):
        s = lvl.spatial(size)
        if s < model.min_spatial:
            raise ShapeError(f"level {lvl.index} gives {s}x{s}, below the model minimum {model.min_spatial}")
    if level_fine == level_coarse:
        n = u.shape[0]
        return ResidualResult(np.zeros(n), 0.0)

    def at(level):
        k = level.index - 1
        return restrict(u, k).data, restrict(y, k).data

    gf = per_sample_grads(model.forward, params, *at(level_fine))
    gc = per_sample_grads(model.forward, params, *at(level_coarse))
    d = gf - gc
    return ResidualResult(np.linalg.norm(d, axis=1), float(np.linalg.norm(d.mean(axis=0))))


def fit_rnorm(residuals: Sequence[tuple[float, float]]) -> RnormFit:
    """Least-squares fit of ``log(norm) = log(B) + p log(h)``."""
    pairs = [(float(h), float(r)) for h, r in residuals]
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 (h, norm) pairs, got {len(pairs)}")
    if any(h <= 0 or r <= 0 for h, r in pairs):
        raise ValueError("h and norm values must be positive")
    lh = np.log([h for h, _ in pairs])
    lr = np.log([r for _, r in pairs])
    p, logb = np.polyfit(lh, lr, 1)
    if not (np.isfinite(p) and p > 0):
        raise ValueError(f"fitted order p={p:.3g} is not positive")
    return RnormFit(B=float(np.exp(logb)), p=float(p), residuals=tuple(pairs))
