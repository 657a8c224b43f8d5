"""Multi-seed aggregation and the exact Wilcoxon-Mann-Whitney rank-sum test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import relative_gain

MAX_GROUP_SIZE = 12


@dataclass(frozen=True)
class RunResult:
    experiment: str
    seed: int
    metrics: dict[str, float]
    config_hash: str
    method: str = ""

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k!r} is not finite: {v}")


@dataclass(frozen=True)
class WmwReport:
    u: float
    p_value: float
    alpha: float
    n: int
    m: int
    sided: str = "two-sided"

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _subset_sum_counts(weights: Sequence[int], k: int) -> dict[int, int]:
    """Number of size-``k`` subsets of ``weights`` reaching each total."""
    # table[j] maps a running total to the number of j-element subsets
    table: list[dict[int, int]] = [dict() for _ in range(k + 1)]
    table[0][0] = 1
    for w in weights:
        for j in range(k, 0, -1):
            prev = table[j - 1]
            if not prev:
                continue
            cur = table[j]
            for s, c in prev.items():
                cur[s + w] = cur.get(s + w, 0) + c
    return table[k]


def wmw_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> WmwReport:
    """Exact two-sided rank-sum test with mid-ranks for ties.

    The null distribution is the exact count over all C(n+m, n) ways of
    assigning the pooled mid-ranks to the first group. The p-value is the
    share of assignments whose U is at least as far from n*m/2 as observed.
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    if n > MAX_GROUP_SIZE or m > MAX_GROUP_SIZE:
        raise ValueError(f"exact enumeration is limited to groups of at most {MAX_GROUP_SIZE}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    pooled = list(a) + list(b)
    if not all(math.isfinite(v) for v in pooled):
        raise ValueError("samples must be finite")
    # doubled mid-ranks are integers, so all comparisons below are exact
    ranks2 = [int(round(2 * r)) for r in midranks(pooled)]
    offset2 = n * (n + 1)
    center2 = n * m
    obs_u2 = sum(ranks2[:n]) - offset2
    obs_dev = abs(2 * obs_u2 - 2 * center2)
    counts = _subset_sum_counts(ranks2, n)
    total = math.comb(n + m, n)
    extreme = sum(c for s, c in counts.items() if abs(2 * (s - offset2) - 2 * center2) >= obs_dev)
    return WmwReport(u=obs_u2 / 2.0, p_value=extreme / total, alpha=alpha, n=n, m=m)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int
    values: tuple[float, ...]
    seeds: tuple[int, ...] = field(default_factory=tuple)

    @property
    def single_run(self) -> bool:
        return self.n == 1


def aggregate_runs(results: Sequence[RunResult], metric: str) -> Aggregate:
    """Mean and sample standard deviation of one metric over seeds.

    Values are ordered by seed so the output does not depend on the order
    of ``results``. A single run reports ``std = 0``.
    """
    if not results:
        raise ValueError("no results to aggregate")
    ids = {r.experiment for r in results}
    if len(ids) > 1:
        raise ValueError(f"cannot aggregate across experiments {sorted(ids)}")
    seeds = [r.seed for r in results]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds in results")
    for r in results:
        if metric not in r.metrics:
            raise KeyError(f"metric {metric!r} missing from run with seed {r.seed}")
    ordered = sorted(results, key=lambda r: r.seed)
    values = np.array([r.metrics[metric] for r in ordered], dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return Aggregate(
        mean=float(math.fsum(values) / len(values)),
        std=std,
        n=len(values),
        values=tuple(float(v) for v in values),
        seeds=tuple(r.seed for r in ordered),
    )


@dataclass(frozen=True)
class Comparison:
    metric: str
    baseline: Aggregate
    treated: Aggregate
    gain_percent: float
    wmw: WmwReport
    lower_is_better: bool = False

    @property
    def significant(self) -> bool:
        return self.wmw.significant


def compare_methods(
    baseline: Sequence[RunResult],
    treated: Sequence[RunResult],
    metric: str,
    alpha: float = 0.05,
    lower_is_better: bool = False,
) -> Comparison:
    base = aggregate_runs(baseline, metric)
    treat = aggregate_runs(treated, metric)
    return Comparison(
        metric=metric,
        baseline=base,
        treated=treat,
        gain_percent=relative_gain(base.mean, treat.mean, lower_is_better),
        wmw=wmw_test(treat.values, base.values, alpha),
        lower_is_better=lower_is_better,
    )
