"""Effect-estimation error metrics, trial aggregation, and the paired t-test."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

__all__ = [
    "eps_ate",
    "eps_cate",
    "TrialResult",
    "MetricSummary",
    "AggregateResult",
    "aggregate",
    "TTestResult",
    "paired_t_test",
    "student_t_sf2",
]

METRICS = ("eps_cate", "eps_ate")


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def eps_ate(cate_hat, ite) -> float:
    """``|mean(cate_hat) - mean(Y(1) - Y(0))|`` over the same units."""
    cate_hat, ite = _pair(cate_hat, ite)
    return float(abs(cate_hat.mean() - ite.mean()))


def eps_cate(cate_hat, tau_x) -> float:
    """Root mean squared error of per-unit CATE predictions."""
    cate_hat, tau_x = _pair(cate_hat, tau_x)
    return float(math.sqrt(np.mean((cate_hat - tau_x) ** 2)))


@dataclass(frozen=True)
class TrialResult:
    method: str
    eps_ate: float
    eps_cate: float
    trial: int
    seed: int = 0
    sweep_value: float | None = None

    def __post_init__(self) -> None:
        if self.eps_ate < 0 or self.eps_cate < 0:
            raise ValueError("metrics are nonnegative")


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    count: int


@dataclass
class AggregateResult:
    """``summary[method][metric]`` plus optional p-values against a reference method."""

    summary: dict[str, dict[str, MetricSummary]]
    pvalues: dict[str, dict[str, float]] = field(default_factory=dict)
    reference: str | None = None

    @property
    def methods(self) -> list[str]:
        return list(self.summary)

    def mean(self, method: str, metric: str = "eps_cate") -> float:
        return self.summary[method][metric].mean

    def std(self, method: str, metric: str = "eps_cate") -> float:
        return self.summary[method][metric].std


def aggregate(trials: Iterable[TrialResult], reference: str | None = None) -> AggregateResult:
    """Sample mean and ``n - 1`` standard deviation per method and metric.

    With a single trial the standard deviation is NaN. When ``reference`` is
    given, every other method gets a paired t-test p-value per metric, paired
    on the trial index.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no trials to aggregate")
    by_method: dict[str, list[TrialResult]] = defaultdict(list)
    for tr in trials:
        by_method[tr.method].append(tr)
    summary = {}
    for method, rows in by_method.items():
        rows.sort(key=lambda r: r.trial)
        summary[method] = {}
        for metric in METRICS:
            v = np.array([getattr(r, metric) for r in rows])
            sd = float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")
            summary[method][metric] = MetricSummary(float(np.mean(v)), sd, len(v))
    pvalues: dict[str, dict[str, float]] = {}
    if reference is not None:
        if reference not in by_method:
            raise KeyError(f"reference method {reference!r} not present")
        ref = {r.trial: r for r in by_method[reference]}
        for method, rows in by_method.items():
            if method == reference:
                continue
            common = [r for r in rows if r.trial in ref]
            if len(common) < 2:
                continue
            pvalues[method] = {
                metric: paired_t_test(
                    [getattr(r, metric) for r in common],
                    [getattr(ref[r.trial], metric) for r in common],
                ).p
                for metric in METRICS
            }
    return AggregateResult(summary, pvalues, reference)


@dataclass(frozen=True)
class TTestResult:
    p: float
    t: float
    df: int
    degenerate: bool = False


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail ``P(|T_df| >= |t|)`` via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    All-zero differences give ``p = 1``; constant nonzero differences give
    ``p = 0`` with ``degenerate`` set.
    """
    a, b = _pair(a, b)
    if a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length series with at least two pairs")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(p=1.0, t=0.0, df=n - 1)
        return TTestResult(p=0.0, t=math.copysign(math.inf, mean), df=n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(p=student_t_sf2(t, n - 1), t=t, df=n - 1)
