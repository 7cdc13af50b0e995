"""Propensity and selection-score models.

The selection score for stage ``t`` is built as a product of stagewise
logistic fits, each trained only on the units still observed at the previous
stage::

    r_t(x, a, s_1..s_{t-1}) = prod_{u <= t} P(R_u = 1 | x, a, s_1..s_{u-1}, R_{u-1} = 1)

so every factor uses inputs that are observed for its own fitting rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, log_expit

from .dataset import LongTermDataset

log = logging.getLogger(__name__)

__all__ = [
    "NoOverlapError",
    "NuisanceConfig",
    "LogisticModel",
    "fit_logistic",
    "logistic_loss",
    "predict_proba",
    "estimate_propensity",
    "SelectionModel",
    "estimate_selection_scores",
    "NuisanceScores",
    "fit_nuisances",
]


class NoOverlapError(ValueError):
    """Only one treatment arm is present."""


@dataclass(frozen=True)
class NuisanceConfig:
    eps_clip: float = 0.01
    l2: float = 1e-6
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 <= self.eps_clip < 0.5:
            raise ValueError("eps_clip must lie in [0, 0.5)")


@dataclass(frozen=True)
class LogisticModel:
    weights: NDArray[np.float64]
    bias: float
    degenerate: bool = False
    converged: bool = True
    n_iter: int = 0
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    def logit(self, Z) -> NDArray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        return Z @ self.weights + self.bias


def logistic_loss(params, Z, y, w, l2: float = 1e-6):
    """Negative weighted mean log-likelihood plus ``l2/2 |weights|^2``.

    ``params`` is ``[weights, bias]``; returns ``(loss, [d_weights, d_bias])``.
    """
    beta, b = params
    b = np.asarray(b, dtype=float)
    eta = Z @ beta + b
    wsum = w.sum()
    ll = np.dot(w, y * log_expit(eta) + (1 - y) * log_expit(-eta)) / wsum
    loss = float(-ll + 0.5 * l2 * np.dot(beta, beta))
    resid = (expit(eta) - y) * w / wsum
    return loss, [Z.T @ resid + l2 * beta, np.asarray(resid.sum()).reshape(b.shape)]


def fit_logistic(features, labels, sample_weight=None, l2: float = 1e-6,
                 max_iter: int = 200, tol: float = 1e-6) -> LogisticModel:
    """Maximize the weighted, lightly ridge-penalized log-likelihood.

    Uses damped Newton ascent: each step is halved until the objective does not
    decrease, so the recorded log-likelihood trace is non-decreasing. Stops
    when the gradient infinity-norm drops below ``tol``. A single-class label
    vector yields an intercept-only model flagged ``degenerate``.
    """
    Z = np.asarray(features, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    y = np.asarray(labels, dtype=float)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be binary")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative and not all zero")
    pos = w > 0
    ybar = float(np.dot(w, y) / w.sum())
    if np.all(y[pos] == y[pos][0]):
        return LogisticModel(
            weights=np.zeros(Z.shape[1]),
            bias=np.inf if ybar == 1.0 else -np.inf,
            degenerate=True,
        )

    d = Z.shape[1]
    theta = np.zeros(d + 1)
    theta[-1] = np.log(ybar / (1 - ybar))
    D = np.column_stack([Z, np.ones(len(y))])
    wn = w / w.sum()
    ridge = np.full(d + 1, l2)
    ridge[-1] = 0.0

    def objective(th):
        eta = D @ th
        return float(np.dot(wn, y * log_expit(eta) + (1 - y) * log_expit(-eta)) - 0.5 * np.dot(ridge, th * th))

    obj = objective(theta)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = D @ theta
        mu = expit(eta)
        grad = D.T @ (wn * (y - mu)) - ridge * theta
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        H = (D * (wn * mu * (1 - mu))[:, None]).T @ D + np.diag(ridge) + 1e-12 * np.eye(d + 1)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            new = objective(cand)
            if new >= obj or t < 1e-10:
                break
            t *= 0.5
        if new < obj:
            break
        theta, obj = cand, new
        trace.append(obj)
    return LogisticModel(
        weights=theta[:-1].copy(),
        bias=float(theta[-1]),
        converged=converged,
        n_iter=it,
        loglik_trace=tuple(trace),
    )


def predict_proba(model: LogisticModel, features, eps_clip: float = 0.01) -> NDArray:
    """Sigmoid of the linear index, clipped to ``[eps_clip, 1 - eps_clip]``."""
    p = expit(model.logit(features))
    if eps_clip > 0:
        p = np.clip(p, eps_clip, 1.0 - eps_clip)
    return p


def estimate_propensity(ds: LongTermDataset, cfg: NuisanceConfig | None = None) -> tuple[NDArray, LogisticModel]:
    """Clipped P(A = 1 | X) from a logistic fit over all units."""
    cfg = cfg or NuisanceConfig()
    if ds.A.min() == ds.A.max():
        raise NoOverlapError("no overlap: only one treatment arm is present")
    model = fit_logistic(ds.X, ds.A, l2=cfg.l2, max_iter=cfg.max_iter, tol=cfg.tol)
    return predict_proba(model, ds.X, cfg.eps_clip), model


def _stage_features(X, A, S_hist) -> NDArray:
    return np.column_stack([X, A, S_hist])


@dataclass(frozen=True)
class SelectionModel:
    """Fitted stage factors ``P(R_t = 1 | X, A, S_<t, R_{t-1} = 1)``.

    ``always_observed[t-1]`` marks stages whose fitting population had no
    missing unit; their factor is exactly 1.
    """

    models: tuple[LogisticModel, ...]
    always_observed: tuple[bool, ...]
    rows_used: tuple[int, ...]
    eps_clip: float

    @property
    def T(self) -> int:
        return len(self.models)

    def factor(self, t: int, X, A, S_hist) -> NDArray:
        if self.always_observed[t - 1]:
            return np.ones(np.asarray(X).shape[0])
        return predict_proba(self.models[t - 1], _stage_features(X, A, S_hist), self.eps_clip)

    def score(self, t: int, X, A, S_hist) -> NDArray:
        """Estimated r_t for arbitrary rows; ``S_hist`` needs ``t - 1`` columns."""
        S_hist = np.asarray(S_hist, dtype=float).reshape(np.asarray(X).shape[0], -1)
        out = np.ones(np.asarray(X).shape[0])
        for u in range(1, t + 1):
            out = out * self.factor(u, X, A, S_hist[:, : u - 1])
        return out


def estimate_selection_scores(ds: LongTermDataset, cfg: NuisanceConfig | None = None) -> tuple[NDArray, SelectionModel]:
    """Per-unit r_t for every stage.

    Returns an (n, T) matrix whose entry (i, t) is defined (not NaN) when unit
    i's inputs to stage t, namely S_1..S_{t-1}, are observed.
    """
    cfg = cfg or NuisanceConfig()
    n, T = ds.n, ds.T
    models, flags, rows = [], [], []
    r = np.full((n, T), np.nan)
    running = np.ones(n)
    for t in range(1, T + 1):
        at_risk = np.ones(n, dtype=bool) if t == 1 else ds.R[:, t - 2] == 1
        idx = np.flatnonzero(at_risk)
        labels = ds.R[idx, t - 1]
        rows.append(int(idx.size))
        feats = _stage_features(ds.X[idx], ds.A[idx], ds.history(t)[idx])
        if idx.size == 0:
            raise ValueError(f"stage {t} has no units at risk")
        if labels.min() == 1:
            log.debug("stage %d: no missing units among %d at risk, factor set to 1", t, idx.size)
            models.append(LogisticModel(weights=np.zeros(feats.shape[1]), bias=np.inf, degenerate=True))
            flags.append(True)
            fac = np.ones(idx.size)
        else:
            m = fit_logistic(feats, labels, l2=cfg.l2, max_iter=cfg.max_iter, tol=cfg.tol)
            models.append(m)
            flags.append(False)
            fac = predict_proba(m, feats, cfg.eps_clip)
        running = np.where(at_risk, running, np.nan)
        running[idx] = running[idx] * fac
        r[idx, t - 1] = running[idx]
    sel = SelectionModel(models=tuple(models), always_observed=tuple(flags), rows_used=tuple(rows), eps_clip=cfg.eps_clip)
    return r, sel


@dataclass(frozen=True)
class NuisanceScores:
    """Propensity and selection scores shared by every estimator in a trial."""

    e1: NDArray[np.float64]
    r: NDArray[np.float64]
    eps_clip: float = 0.01
    selection: SelectionModel | None = None
    propensity_model: LogisticModel | None = None
    oracle: bool = False

    def e(self, a: int) -> NDArray:
        return self.e1 if a == 1 else 1.0 - self.e1

    def e_factual(self, A) -> NDArray:
        return np.where(np.asarray(A) == 1, self.e1, 1.0 - self.e1)

    @classmethod
    def from_oracle(cls, e1, r, eps_clip: float = 0.0) -> "NuisanceScores":
        return cls(e1=np.asarray(e1, dtype=float), r=np.asarray(r, dtype=float), eps_clip=eps_clip, oracle=True)


def fit_nuisances(ds: LongTermDataset, cfg: NuisanceConfig | None = None) -> NuisanceScores:
    cfg = cfg or NuisanceConfig()
    e1, pm = estimate_propensity(ds, cfg)
    r, sel = estimate_selection_scores(ds, cfg)
    return NuisanceScores(e1=e1, r=r, eps_clip=cfg.eps_clip, selection=sel, propensity_model=pm)
