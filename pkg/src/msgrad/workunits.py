"""Exact work-unit accounting.

One work unit (WU) is one model application to one image at the finest
resolution. An application at level ``j`` costs ``4 ** -(j - 1)`` WU.

Batch-size convention: ``n1`` is always the batch of the finest telescopic
term, and level ``j`` of a doubling plan uses ``2 ** (j - 1) * n1`` samples.
Under that convention the per-iteration constants for four levels are 37/16
(multiscale) and 15 (single scale, same data stream) times ``n1``.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

__all__ = [
    "WorkUnitLedger",
    "level_weight",
    "mge_step_cost",
    "doubling_batches",
    "closed_form",
    "STRATEGIES",
    "charge_mge_step",
]

STRATEGIES = ("single", "multiscale", "full_multiscale")


def level_weight(level: int) -> Fraction:
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    return Fraction(1, 4 ** (level - 1))


@dataclass
class WorkUnitLedger:
    """Append-only record of ``(level, images)`` charges with an exact total."""

    entries: list[tuple[int, int]] = field(default_factory=list)
    total: Fraction = Fraction(0)

    def charge(self, level: int, n_images: int) -> WorkUnitLedger:
        if n_images < 0:
            raise ValueError(f"image count must be >= 0, got {n_images}")
        self.total += n_images * level_weight(level)
        self.entries.append((int(level), int(n_images)))
        return self

    def recompute(self) -> Fraction:
        return sum((n * level_weight(lv) for lv, n in self.entries), Fraction(0))

    def extend(self, other: WorkUnitLedger) -> WorkUnitLedger:
        for lv, n in other.entries:
            self.charge(lv, n)
        return self

    def __add__(self, other: WorkUnitLedger) -> WorkUnitLedger:
        return WorkUnitLedger().extend(self).extend(other)

    def by_level(self) -> list[tuple[int, int, Fraction]]:
        """Images and WU aggregated per level, sorted by level."""
        agg: dict[int, int] = {}
        for lv, n in self.entries:
            agg[lv] = agg.get(lv, 0) + n
        return [(lv, agg[lv], agg[lv] * level_weight(lv)) for lv in sorted(agg)]

    def dump_csv(self, path) -> None:
        """Write ``level,images,wu_numerator,wu_denominator`` rows plus a ``total`` row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "images", "wu_numerator", "wu_denominator"])
            images = 0
            for lv, n, wu in self.by_level():
                w.writerow([lv, n, wu.numerator, wu.denominator])
                images += n
            w.writerow(["total", images, self.total.numerator, self.total.denominator])

    @staticmethod
    def read_total(path) -> Fraction:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["level"] == "total":
                    return Fraction(int(row["wu_numerator"]), int(row["wu_denominator"]))
        raise ValueError(f"{path}: no total row")


def doubling_batches(n1: int, levels: int) -> list[int]:
    return [n1 * 2 ** j for j in range(levels)]


def mge_step_cost(batch_sizes: Sequence[int], first_level: int = 1) -> Fraction:
    """WU of one telescopic estimate over levels ``first_level .. first_level+len-1``.

    ``batch_sizes[i]`` belongs to level ``first_level + i``: the diff term
    pairing that level with the next coarser one, or the base term for the
    last entry.
    """
    n = len(batch_sizes)
    if n < 1:
        raise ValueError("need at least one level")
    cost = Fraction(0)
    for i in range(n - 1):
        lv = first_level + i
        cost += batch_sizes[i] * (level_weight(lv) + level_weight(lv + 1))
    cost += batch_sizes[-1] * level_weight(first_level + n - 1)
    return cost


def closed_form(strategy: str, n1: int, iters: int | Sequence[int], levels: int) -> Fraction:
    """Total WU of a training run.

    ``iters`` is a single count for ``single`` and ``multiscale``; for
    ``full_multiscale`` it is either one count (every stage runs that many
    steps) or a coarse-to-fine schedule of ``levels`` counts.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if n1 < 1 or levels < 1:
        raise ValueError("n1 and levels must be >= 1")
    batches = doubling_batches(n1, levels)
    if strategy in ("single", "multiscale"):
        if not isinstance(iters, int):
            if len(iters) != 1:
                raise ValueError(f"{strategy} takes a single iteration count, got {list(iters)}")
            iters = iters[0]
        if strategy == "single":
            return Fraction(sum(batches) * iters)
        return mge_step_cost(batches) * iters
    schedule = [iters] * levels if isinstance(iters, int) else list(iters)
    if len(schedule) != levels:
        raise ValueError(f"full_multiscale schedule needs {levels} entries, got {len(schedule)}")
    total = Fraction(0)
    for stage_iters, level in zip(schedule, range(levels, 0, -1)):
        total += stage_iters * mge_step_cost(batches[level - 1 :], first_level=level)
    return total


def charge_mge_step(ledger: WorkUnitLedger, batch_sizes: Iterable[int], first_level: int = 1) -> None:
    """Charge exactly what one telescopic estimate charges, without computing it.

    Order matches the estimator: base term first, then diff terms fine to coarse.
    """
    b = list(batch_sizes)
    last = first_level + len(b) - 1
    ledger.charge(last, b[-1])
    for i in range(len(b) - 1):
        lv = first_level + i
        ledger.charge(lv, b[i])
        ledger.charge(lv + 1, b[i])
