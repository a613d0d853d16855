"""Synthetic smooth images and the denoising / deblurring tasks built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from ..estimator import Dataset

__all__ = ["SmoothField", "random_fields", "Task", "gen_denoise", "gen_deblur",
           "gaussian_kernel", "blur", "task_from_images"]

_REFERENCE_GRID = 256


@dataclass(frozen=True)
class SmoothField:
    """A fixed smooth function on the unit square, sampled at any resolution.

    Sum of low-frequency sinusoids and Gaussian blobs, affinely mapped to
    [0, 1] using its range on a fixed reference grid so every resolution
    sees the same function.
    """

    freqs: np.ndarray  # (k, 2) cycles per unit length
    phases: np.ndarray  # (k,)
    amps: np.ndarray  # (k,)
    centers: np.ndarray  # (b, 2)
    widths: np.ndarray  # (b,)
    heights: np.ndarray  # (b,)
    lo: float = 0.0
    hi: float = 1.0

    def _raw(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        v = np.zeros(np.broadcast(x, y).shape)
        for (fx, fy), ph, a in zip(self.freqs, self.phases, self.amps):
            v += a * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
        for (cx, cy), w, hgt in zip(self.centers, self.widths, self.heights):
            v += hgt * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
        return v

    def render(self, size: int) -> np.ndarray:
        """``(size, size)`` samples at pixel centres, values in [0, 1] on the reference grid."""
        c = (np.arange(size) + 0.5) / size
        x, y = np.meshgrid(c, c, indexing="xy")
        return (self._raw(x, y) - self.lo) / (self.hi - self.lo)

    @classmethod
    def random(cls, rng: np.random.Generator, n_waves: int = 4, n_blobs: int = 3,
               max_cycles: float = 4.0, blob_width: tuple[float, float] = (0.15, 0.3)) -> SmoothField:
        # frequency vectors with norm <= max_cycles cycles across the unit square
        radius = max_cycles * np.sqrt(rng.uniform(0.0, 1.0, size=n_waves))
        angle = rng.uniform(0.0, 2 * np.pi, size=n_waves)
        freqs = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        phases = rng.uniform(0, 2 * np.pi, size=n_waves)
        amps = rng.uniform(0.3, 1.0, size=n_waves)
        centers = rng.uniform(0.15, 0.85, size=(n_blobs, 2))
        widths = rng.uniform(*blob_width, size=n_blobs)
        heights = rng.uniform(-1.5, 1.5, size=n_blobs)
        f = cls(freqs, phases, amps, centers, widths, heights)
        ref = f.render(_REFERENCE_GRID)
        lo, hi = float(ref.min()), float(ref.max())
        return cls(freqs, phases, amps, centers, widths, heights, lo, hi)


def random_fields(n: int, rng: np.random.Generator) -> list[SmoothField]:
    return [SmoothField.random(rng) for _ in range(n)]


def render_batch(fields, size: int) -> np.ndarray:
    """``(n, 1, size, size)`` clipped to [0, 1]."""
    return np.clip(np.stack([f.render(size) for f in fields])[:, None], 0.0, 1.0)


@dataclass
class Task:
    """Train and eval data for one image-restoration problem.

    For denoising the model input carries an extra constant channel holding
    the noise level ``t``; ``noise_levels`` keeps the raw values.
    """

    kind: str
    size: int
    train: Dataset
    eval: Dataset
    seed: int | None = None
    train_noise_levels: np.ndarray | None = None
    eval_noise_levels: np.ndarray | None = None

    @property
    def in_channels(self) -> int:
        return self.train.inputs.shape[1]

    @property
    def out_channels(self) -> int:
        return self.train.targets.shape[1]

    def check_levels(self, levels: int, min_spatial: int) -> None:
        coarse = self.size // 2 ** (levels - 1)
        if self.size % 2 ** (levels - 1) or coarse < min_spatial:
            raise ValueError(f"a {self.size}x{self.size} task cannot be coarsened {levels - 1} times "
                             f"for a model needing {min_spatial}x{min_spatial}")


def _check_size(size: int) -> None:
    if size < 1 or size & (size - 1):
        raise ValueError(f"image size must be a power of two, got {size}")


def noisy_inputs(y: np.ndarray, t: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``u = t y + (1 - t) z`` with a constant ``t`` channel appended."""
    tt = t[:, None, None, None]
    u = tt * y + (1.0 - tt) * z
    tch = np.broadcast_to(tt, (y.shape[0], 1) + y.shape[2:])
    return np.concatenate([u, tch], axis=1)


def _denoise_split(targets: np.ndarray, rng: np.random.Generator):
    n = targets.shape[0]
    t = rng.uniform(0.0, 1.0, size=n)
    z = rng.standard_normal(targets.shape)
    return noisy_inputs(targets, t, z), t


def task_from_images(kind: str, train_targets: np.ndarray, eval_targets: np.ndarray,
                     rng: np.random.Generator, sigma: float = 3.0, eps: float = 0.01,
                     seed: int | None = None) -> Task:
    """Build a task from clean ``(n, C, S, S)`` image stacks in [0, 1]."""
    size = train_targets.shape[-1]
    if train_targets.shape[-2] != size or eval_targets.shape[-2:] != train_targets.shape[-2:]:
        raise ValueError("task images must be square and share one size")
    if size & (size - 1):
        raise ValueError(f"task images must have a power-of-two size, got {size}x{size}")
    if kind == "denoise":
        u_tr, t_tr = _denoise_split(train_targets, rng)
        u_ev, t_ev = _denoise_split(eval_targets, rng)
        return Task(kind, size, Dataset(u_tr, train_targets), Dataset(u_ev, eval_targets), seed, t_tr, t_ev)
    if kind == "deblur":
        k = gaussian_kernel(sigma)
        u_tr = blur(train_targets, k) + eps * rng.standard_normal(train_targets.shape)
        u_ev = blur(eval_targets, k) + eps * rng.standard_normal(eval_targets.shape)
        return Task(kind, size, Dataset(u_tr, train_targets), Dataset(u_ev, eval_targets), seed)
    raise ValueError(f"unknown task kind {kind!r}")


def gen_denoise(n: int, size: int, rng: np.random.Generator, n_eval: int = 0,
                seed: int | None = None) -> Task:
    """``u = t y + (1 - t) z`` with ``z ~ N(0, I)`` and ``t ~ U[0, 1]`` per image."""
    _check_size(size)
    y_tr = render_batch(random_fields(n, rng), size)
    y_ev = render_batch(random_fields(n_eval, rng), size) if n_eval else y_tr[:0]
    return task_from_images("denoise", y_tr, y_ev, rng, seed=seed)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """``exp(-(x^2 + y^2) / sigma^2)`` truncated at radius ``ceil(3 sigma)`` and normalised to sum 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = max(1, math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    k = np.exp(-(xx ** 2 + yy ** 2) / sigma ** 2)
    return k / k.sum()


def blur(images: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel with ``kernel`` using reflecting boundaries."""
    s = images.shape[-1]
    if kernel.shape[0] > s:
        raise ValueError(f"blur kernel of width {kernel.shape[0]} is larger than the {s}x{s} image")
    return correlate(images, kernel[None, None], mode="reflect")


def gen_deblur(n: int, size: int, sigma: float, rng: np.random.Generator, n_eval: int = 0,
               eps: float = 0.01, seed: int | None = None) -> Task:
    """``u = K y + eps z`` with a normalised truncated Gaussian ``K``."""
    _check_size(size)
    k = gaussian_kernel(sigma)
    if k.shape[0] > size:
        raise ValueError(f"blur kernel of width {k.shape[0]} is larger than the {size}x{size} image")
    y_tr = render_batch(random_fields(n, rng), size)
    y_ev = render_batch(random_fields(n_eval, rng), size) if n_eval else y_tr[:0]
    return task_from_images("deblur", y_tr, y_ev, rng, sigma=sigma, eps=eps, seed=seed)
