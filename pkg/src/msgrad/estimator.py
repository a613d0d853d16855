"""Multiscale gradient estimation.

The fine-mesh expected gradient is written as a coarsest-level term plus
consecutive-level differences,

    E[g(h_1)] = E[g(h_L)] + sum_{j=2..L} E[g(h_{j-1}) - g(h_j)],

and each term is estimated with its own independently drawn batch. The
difference terms evaluate the *same* samples at both resolutions, which is
what keeps their variance small.

Sampling order is fixed: the base term draws first, then the difference
terms from the finest pair to the coarsest.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mesh import MeshLevel, RnormFit, per_sample_grads, restrict
from .tensor import ShapeError, Tape, Tensor, add, backward, mse_loss, params_flat, sub
from .workunits import WorkUnitLedger, mge_step_cost

__all__ = [
    "Dataset",
    "LevelPlan",
    "TelescopicTerm",
    "GradEstimate",
    "ErrorBudget",
    "plan_batches",
    "draw_terms",
    "mge_loss",
    "mge_gradient",
    "single_scale_gradient",
    "estimate_term_variance",
    "equivalent_fine_batch",
    "error_budget",
]


class Dataset:
    """Paired finest-mesh inputs and targets with a cached restriction pyramid."""

    def __init__(self, inputs, targets):
        u = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, dtype=np.float64)
        y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
        if u.ndim != 4 or y.ndim != 4:
            raise ShapeError("inputs and targets must be (M, C, H, W)")
        if u.shape[0] != y.shape[0] or u.shape[2:] != y.shape[2:]:
            raise ShapeError(f"inputs {u.shape} and targets {y.shape} disagree")
        self.inputs = u
        self.targets = y
        self._pyramid: dict[int, tuple[np.ndarray, np.ndarray]] = {1: (u, y)}

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[2]

    def level(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Inputs and targets restricted to mesh level ``j``."""
        if j not in self._pyramid:
            u, y = self.level(j - 1) if j > 1 else (self.inputs, self.targets)
            self._pyramid[j] = (restrict(u, 1).data, restrict(y, 1).data)
        return self._pyramid[j]

    def batch(self, j: int, ids) -> tuple[Tensor, Tensor]:
        u, y = self.level(j)
        ids = np.asarray(ids)
        return Tensor(u[ids]), Tensor(y[ids])


@dataclass(frozen=True)
class LevelPlan:
    """Batch sizes for the telescopic levels ``first_level .. first_level + L - 1``.

    ``batch_sizes[i]`` is the batch of the diff term whose fine side is level
    ``first_level + i``; the last entry is the base-term batch.
    """

    batch_sizes: tuple[int, ...]
    rule: str = "explicit"
    first_level: int = 1

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        if not self.batch_sizes:
            raise ValueError("a plan needs at least one level")
        if any(b < 1 for b in self.batch_sizes):
            raise ValueError(f"batch sizes must be positive, got {list(self.batch_sizes)}")
        if self.first_level < 1:
            raise ValueError("first_level must be >= 1")

    @property
    def L(self) -> int:
        return len(self.batch_sizes)

    @property
    def last_level(self) -> int:
        return self.first_level + self.L - 1

    def stage(self, level: int) -> LevelPlan:
        """The plan truncated to levels ``level .. last_level``."""
        if not self.first_level <= level <= self.last_level:
            raise ValueError(f"level {level} outside plan levels {self.first_level}..{self.last_level}")
        return LevelPlan(self.batch_sizes[level - self.first_level :], self.rule, level)

    def cost(self) -> Fraction:
        return mge_step_cost(self.batch_sizes, self.first_level)

    def check_model(self, model, size: int) -> None:
        s = MeshLevel(self.last_level).spatial(size)
        if s < model.min_spatial:
            raise ShapeError(f"level {self.last_level} of a {size}x{size} image is {s}x{s}, "
                             f"below the model minimum {model.min_spatial}")


def plan_batches(L: int, n1: int, rule: str = "paper_doubling",
                 batch_sizes: Sequence[int] | None = None) -> LevelPlan:
    if L < 1 or n1 < 1:
        raise ValueError("L and n1 must be >= 1")
    if rule == "paper_doubling":
        return LevelPlan(tuple(n1 * 2 ** j for j in range(L)), rule)
    if rule == "explicit":
        if batch_sizes is None or len(batch_sizes) != L or batch_sizes[0] != n1:
            raise ValueError("explicit plans need L batch sizes starting with n1")
        return LevelPlan(tuple(batch_sizes), rule)
    raise ValueError(f"unknown batch rule {rule!r}")


@dataclass(frozen=True)
class TelescopicTerm:
    kind: str  # "base" or "diff"
    level_fine: MeshLevel
    level_coarse: MeshLevel | None
    sample_ids: tuple[int, ...]


def draw_terms(plan: LevelPlan, n_data: int, rng: np.random.Generator | None = None,
               full_batch: bool = False) -> list[TelescopicTerm]:
    """Sample ids for every term, without replacement inside a term."""
    if full_batch:
        pick = lambda n: tuple(range(n_data))  # noqa: E731
    else:
        if rng is None:
            raise ValueError("a generator is required unless full_batch is set")

        def pick(n):
            if n > n_data:
                raise ValueError(f"batch of {n} exceeds dataset of {n_data}")
            return tuple(int(i) for i in rng.choice(n_data, size=n, replace=False))

    last = plan.last_level
    terms = [TelescopicTerm("base", MeshLevel(last), None, pick(plan.batch_sizes[-1]))]
    for i in range(plan.L - 1):
        lv = plan.first_level + i
        terms.append(TelescopicTerm("diff", MeshLevel(lv), MeshLevel(lv + 1), pick(plan.batch_sizes[i])))
    return terms


def _level_loss(model, params, data: Dataset, level: MeshLevel, ids) -> Tensor:
    if not ids:
        raise ValueError("empty batch")
    u, y = data.batch(level.index, ids)
    return mse_loss(model.forward(params, u), y)


def _term_loss(model, params, data, term: TelescopicTerm) -> Tensor:
    fine = _level_loss(model, params, data, term.level_fine, term.sample_ids)
    if term.kind == "base":
        return fine
    return sub(fine, _level_loss(model, params, data, term.level_coarse, term.sample_ids))


def _term_cost(term: TelescopicTerm) -> list[tuple[int, int]]:
    n = len(term.sample_ids)
    if term.kind == "base":
        return [(term.level_fine.index, n)]
    return [(term.level_fine.index, n), (term.level_coarse.index, n)]


def mge_loss(model, params, data: Dataset, plan: LevelPlan, rng: np.random.Generator | None = None,
             terms: list[TelescopicTerm] | None = None, full_batch: bool = False):
    """Telescopic loss recorded on the caller's active tape.

    Returns ``(loss, terms, wu_cost)``. Differentiating ``loss`` gives the
    multiscale gradient estimate because gradients are linear.
    """
    plan.check_model(model, data.size)
    if terms is None:
        terms = draw_terms(plan, len(data), rng, full_batch)
    loss = None
    cost = Fraction(0)
    for term in terms:
        t = _term_loss(model, params, data, term)
        loss = t if loss is None else add(loss, t)
        cost += sum((n * Fraction(1, 4 ** (lv - 1)) for lv, n in _term_cost(term)), Fraction(0))
    return loss, terms, cost


@dataclass
class TermStat:
    kind: str
    level: int
    mean_norm: float
    variance: float


@dataclass
class GradEstimate:
    grads: OrderedDict
    wu_cost: Fraction
    terms: list[TelescopicTerm] = field(default_factory=list)
    term_stats: list[TermStat] | None = None
    loss: float = float("nan")


def _term_grad(model, params, data, term):
    with Tape() as tape:
        loss = _term_loss(model, params, data, term)
    return loss.item(), backward(loss, tape, params)


def _term_stat(model, params, data, term) -> TermStat:
    u, y = data.level(term.level_fine.index)
    ids = np.asarray(term.sample_ids)
    g = per_sample_grads(model.forward, params, u[ids], y[ids])
    if term.kind == "diff":
        uc, yc = data.level(term.level_coarse.index)
        g = g - per_sample_grads(model.forward, params, uc[ids], yc[ids])
    norms = np.linalg.norm(g, axis=1)
    var = float(np.sum((g - g.mean(axis=0)) ** 2) / max(len(ids) - 1, 1))
    return TermStat(term.kind, term.level_fine.index, float(norms.mean()), var)


def mge_gradient(model, params, data: Dataset, plan: LevelPlan, rng: np.random.Generator | None = None,
                 terms: list[TelescopicTerm] | None = None, full_batch: bool = False,
                 ledger: WorkUnitLedger | None = None, workers: int = 1,
                 term_stats: bool = False) -> GradEstimate:
    """Multiscale gradient estimate; one tape per term, summed in term order.

    With ``workers > 1`` the terms run concurrently; the reduction order and
    therefore the result are the same as for ``workers == 1``.
    """
    plan.check_model(model, data.size)
    if terms is None:
        terms = draw_terms(plan, len(data), rng, full_batch)
    if workers > 1 and len(terms) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _term_grad(model, params, data, t), terms))
    else:
        results = [_term_grad(model, params, data, t) for t in terms]

    grads = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
    loss = 0.0
    for term_loss, g in results:
        loss += term_loss
        for k in grads:
            grads[k] = grads[k] + g[k].data
    local = WorkUnitLedger()
    for term in terms:
        for lv, n in _term_cost(term):
            local.charge(lv, n)
    if ledger is not None:
        ledger.extend(local)
    stats = [_term_stat(model, params, data, t) for t in terms] if term_stats else None
    return GradEstimate(OrderedDict((k, Tensor(v)) for k, v in grads.items()), local.total,
                        terms, stats, loss)


def single_scale_gradient(model, params, data: Dataset, n: int, level: MeshLevel | int = 1,
                          rng: np.random.Generator | None = None, ids: Sequence[int] | None = None,
                          ledger: WorkUnitLedger | None = None) -> GradEstimate:
    """Batch-mean gradient of ``n`` samples at one mesh level."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lv = level.index if isinstance(level, MeshLevel) else int(level)
    plan = LevelPlan((n,), "explicit", lv)
    terms = None
    if ids is not None:
        terms = [TelescopicTerm("base", MeshLevel(lv), None, tuple(int(i) for i in ids))]
    return mge_gradient(model, params, data, plan, rng, terms=terms, ledger=ledger)


@dataclass
class TermVariance:
    kind: str
    level: int
    batch: int
    variance: float
    mean_norm: float


def estimate_term_variance(model, params, data: Dataset, plan: LevelPlan, repeats: int,
                           rng: np.random.Generator | None = None,
                           full_batch: bool = False) -> list[TermVariance]:
    """Sample variance (trace of the covariance) of each term's batch estimate.

    Every repeat redraws all terms independently; each term's gradient is
    taken on its own tape.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    samples: list[list[np.ndarray]] = []
    template = None
    for _ in range(repeats):
        terms = draw_terms(plan, len(data), rng, full_batch)
        template = terms
        samples.append([params_flat(_term_grad(model, params, data, t)[1]) for t in terms])
    out = []
    for i, term in enumerate(template):
        g = np.stack([s[i] for s in samples])
        dev = g - g.mean(axis=0)
        out.append(TermVariance(term.kind, term.level_fine.index, len(term.sample_ids),
                                float(np.sum(dev * dev) / (repeats - 1)),
                                float(np.linalg.norm(g, axis=1).mean())))
    return out


def equivalent_fine_batch(n: float, B: float, p: float, h: float) -> float:
    """Fine batch of a two-level estimator (coarse batch 4x) matching a single-scale batch ``n``."""
    return 0.25 * (1.0 + 2.0 * B * h ** p) ** 2 * n


@dataclass
class ErrorBudget:
    C_hat: float
    B: float
    p: float
    base_term: float
    diff_terms: list[float]
    e: float
    equivalent_n1: float | None


def error_budget(C_hat: float, fit: RnormFit | tuple[float, float], plan: LevelPlan, h1: float) -> ErrorBudget:
    """Compose ``C (1/sqrt(N_L) + B sum_j h_{j-1}^p / sqrt(N_{j-1}))``."""
    B, p = (fit.B, fit.p) if isinstance(fit, RnormFit) else fit
    if C_hat < 0 or B < 0 or p <= 0 or h1 <= 0:
        raise ValueError("error_budget needs C_hat, B >= 0 and p, h1 > 0")
    sizes = plan.batch_sizes
    base = 1.0 / math.sqrt(sizes[-1])
    diffs = []
    for i in range(plan.L - 1):
        h = h1 * 2 ** (plan.first_level - 1 + i)
        diffs.append(B * h ** p / math.sqrt(sizes[i]))
    e = C_hat * (base + sum(diffs))
    eq = equivalent_fine_batch(sizes[-1], B, p, h1) if plan.L == 2 else None
    return ErrorBudget(C_hat, B, p, C_hat * base, [C_hat * d for d in diffs], e, eq)
