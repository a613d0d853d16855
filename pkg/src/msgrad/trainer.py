"""Optimizers and the three training strategies.

* ``single`` - every step draws ``sum(batch_sizes)`` images at the finest
  mesh, the same data stream the multiscale plan consumes.
* ``multiscale`` - every step uses the telescopic estimator over all levels.
* ``full_multiscale`` - coarse-to-fine stages. The stage at level ``s``
  trains with the estimator truncated to levels ``s .. L`` and hot-starts
  from the parameters left by the coarser stage.

``iters_per_level`` for ``full_multiscale`` is listed coarse to fine, so
``(2000, 1000, 500, 250)`` spends 2000 steps on the coarsest stage.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .estimator import Dataset, LevelPlan, mge_gradient, plan_batches, single_scale_gradient
from .tensor import NonFiniteError, Tensor, params_copy
from .workunits import STRATEGIES, WorkUnitLedger, charge_mge_step

__all__ = [
    "TrainConfig",
    "HistoryRecord",
    "TrainHistory",
    "AdamState",
    "sgd_step",
    "adam_step",
    "lr_at",
    "train",
    "evaluate",
    "ssim",
]

OPTIMIZERS = ("sgd", "adam")
LR_SCHEDULES = ("constant", "cosine")
METRICS = ("mse", "ssim")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "multiscale"
    L: int = 4
    N1: int = 16
    iters_per_level: tuple[int, ...] = (2000,)
    optimizer: str = "adam"
    lr: float = 5e-4
    lr_schedule: str = "cosine"
    seed: int = 0
    task: str = "denoise"
    eval_every: int = 100
    metric: str = "mse"
    reset_optimizer: bool = True
    monitor_size: int = 64  # training images used for the fine-mesh train loss
    workers: int = 1
    dry_run: bool = False  # charge the ledger only, no model evaluations

    def __post_init__(self):
        object.__setattr__(self, "iters_per_level", tuple(int(i) for i in self.iters_per_level))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.L < 1 or self.N1 < 1:
            raise ValueError("L and N1 must be >= 1")
        want = self.L if self.strategy == "full_multiscale" else 1
        if len(self.iters_per_level) != want:
            raise ValueError(f"{self.strategy} needs {want} iteration count(s), "
                             f"got {list(self.iters_per_level)}")
        if any(i < 0 for i in self.iters_per_level):
            raise ValueError("iteration counts must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def plan(self) -> LevelPlan:
        return plan_batches(self.L, self.N1)

    def stages(self) -> list[tuple[int, int]]:
        """``(level, iterations)`` in the order they run."""
        if self.strategy == "full_multiscale":
            return list(zip(range(self.L, 0, -1), self.iters_per_level))
        return [(1, self.iters_per_level[0])]


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(grads: Mapping[str, Tensor], step: int) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteError(f"non-finite gradient for {k!r} at step {step}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float,
             step: int = 0) -> OrderedDict:
    """``theta - lr * g``; returns new parameter tensors."""
    _check_grads(grads, step)
    out = OrderedDict()
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {grads[k].shape}, parameter {p.shape}")
        out[k] = Tensor(p.data - lr * grads[k].data, requires_grad=True, name=k)
    return out


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, Tensor],
              lr: float, step: int = 0) -> tuple[AdamState, OrderedDict]:
    """Adam with bias-corrected moments. ``state`` is updated in place and returned."""
    _check_grads(grads, step)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = OrderedDict()
    for k, p in params.items():
        g = grads[k].data
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(k, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = Tensor(p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps), requires_grad=True, name=k)
    return state, out


def lr_at(base: float, k: int, n: int, schedule: str) -> float:
    """Learning rate for step ``k`` of an ``n``-step run (cosine anneals to 0 at step ``n``)."""
    if schedule == "constant" or n <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * k / n))


# ---------------------------------------------------------------------------
# evaluation


def _predict(model, params, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([model.forward(params, Tensor(inputs[i : i + chunk])).data
                           for i in range(0, inputs.shape[0], chunk)])


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over ``(N, C, H, W)`` stacks, 11x11 Gaussian window (sigma 1.5), valid region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    w = _gaussian_window()
    if a.shape[-1] < w.shape[0] or a.shape[-2] < w.shape[0]:
        raise ValueError(f"images of size {a.shape[-2:]} are smaller than the 11x11 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return np.einsum("...ij,ij->...", sliding_window_view(x, w.shape, axis=(-2, -1)), w)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s.mean())


def evaluate(model, params, eval_set: Dataset, metric: str = "mse") -> float:
    """Mean MSE or SSIM of the model's finest-mesh predictions over ``eval_set``."""
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    pred = _predict(model, params, eval_set.inputs)
    if metric == "mse":
        return float(np.mean((pred - eval_set.targets) ** 2))
    if metric == "ssim":
        return ssim(pred, eval_set.targets)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class HistoryRecord:
    step: int
    level: int
    loss: float  # fine-mesh training loss on the monitor subset
    metric: float  # eval metric (nan without an eval set)
    wu: Fraction
    seconds: float

    def row(self, with_time: bool = False) -> dict:
        return {"step": self.step, "level": self.level, "loss": self.loss, "metric": self.metric,
                "wu_num": self.wu.numerator, "wu_den": self.wu.denominator,
                "seconds": self.seconds if with_time else 0.0}


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)
    step_losses: list[tuple[int, float]] = field(default_factory=list)  # (level, estimator loss)
    ledger: WorkUnitLedger = field(default_factory=WorkUnitLedger)
    params: OrderedDict | None = None

    @property
    def total_wu(self) -> Fraction:
        return self.ledger.total

    def rows(self, with_time: bool = False) -> list[dict]:
        """CSV rows; wall time is zeroed unless ``with_time`` so reruns stay byte-identical."""
        return [r.row(with_time) for r in self.records]

    def final(self) -> HistoryRecord:
        return self.records[-1]


def _validate(config: TrainConfig, task, model) -> None:
    if task.in_channels != model.config.channels[0] or task.out_channels != model.config.channels[-1]:
        raise ValueError(f"model channels {model.config.channels[0]}->{model.config.channels[-1]} do not "
                         f"match task channels {task.in_channels}->{task.out_channels}")
    task.check_levels(config.L, model.min_spatial)
    plan = config.plan()
    need = sum(plan.batch_sizes) if config.strategy == "single" else max(plan.batch_sizes)
    if need > len(task.train):
        raise ValueError(f"{config.strategy} with N1={config.N1}, L={config.L} draws {need} images "
                         f"per term but the training set has {len(task.train)}")


def _dry_run(config: TrainConfig) -> TrainHistory:
    hist = TrainHistory()
    plan = config.plan()
    step = 0
    for level, iters in config.stages():
        for _ in range(iters):
            if config.strategy == "single":
                hist.ledger.charge(1, sum(plan.batch_sizes))
            else:
                stage = plan.stage(level)
                charge_mge_step(hist.ledger, stage.batch_sizes, stage.first_level)
            step += 1
        hist.records.append(HistoryRecord(step, level, math.nan, math.nan, hist.ledger.total, 0.0))
    return hist


def train(config: TrainConfig, task, model, params=None) -> TrainHistory:
    """Run ``config.strategy`` on ``task`` and return the history with the final parameters.

    Minibatches are drawn from a generator seeded with ``config.seed``; the
    monitor loss and eval metric do not consume it and are not charged to
    the ledger.
    """
    if config.dry_run:
        return _dry_run(config)
    if params is None:
        raise ValueError("params are required unless dry_run is set")
    _validate(config, task, model)
    rng = np.random.default_rng(config.seed)
    plan = config.plan()
    params = params_copy(params)
    hist = TrainHistory()
    monitor = Dataset(task.train.inputs[: config.monitor_size], task.train.targets[: config.monitor_size])
    has_eval = len(task.eval) > 0
    t0 = time.perf_counter()

    def record(step, level):
        loss = evaluate(model, params, monitor, "mse")
        metric = evaluate(model, params, task.eval, config.metric) if has_eval else math.nan
        hist.records.append(HistoryRecord(step, level, loss, metric, hist.ledger.total,
                                          time.perf_counter() - t0))

    state = AdamState()
    step = 0
    for level, iters in config.stages():
        if config.reset_optimizer:
            state = AdamState()
        stage = plan.stage(level)
        record(step, level)
        for k in range(iters):
            if config.strategy == "single":
                est = single_scale_gradient(model, params, task.train, sum(plan.batch_sizes), 1, rng,
                                            ledger=hist.ledger)
            else:
                est = mge_gradient(model, params, task.train, stage, rng, ledger=hist.ledger,
                                   workers=config.workers)
            lr = lr_at(config.lr, k, iters, config.lr_schedule)
            if config.optimizer == "adam":
                state, params = adam_step(state, params, est.grads, lr, step)
            else:
                params = sgd_step(params, est.grads, lr, step)
            hist.step_losses.append((level, est.loss))
            step += 1
            if (k + 1) % config.eval_every == 0 and k + 1 < iters:
                record(step, level)
        if iters:
            record(step, level)
    hist.params = params
    return hist
