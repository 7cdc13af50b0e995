"""Long-term effect estimators for staged panels with monotone dropout.

Every estimator returns per-unit CATE predictions for all ``n`` units and an
ATE equal to their mean. Outcome models are built from a
:class:`~ltce.nn.RegressorConfig`, so the same code runs with the neural
regressor or with exact linear / mean plug-ins.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .dataset import LongTermDataset
from .dgp import derive_seed
from .nn import RegressorConfig, make_regressor
from .nuisance import NuisanceConfig, NuisanceScores, fit_nuisances

__all__ = [
    "METHODS",
    "EstimationError",
    "EstimatorConfig",
    "EffectEstimate",
    "ImputedPanel",
    "naive_or",
    "naive_ipw",
    "proposed_ipw",
    "seqri",
    "seqmsm",
    "estimate",
    "needs_nuisances",
]

METHODS = ("naive-or", "naive-ipw", "cfr", "proposed-ipw", "seqri", "seqmsm", "balancenet")
_USES_NUISANCE = {"naive-ipw", "proposed-ipw", "seqmsm"}


class EstimationError(RuntimeError):
    """An estimator could not be fit on the data it was given."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by all estimators in a trial.

    ``regressor`` builds every outcome / pseudo-outcome model unless
    ``per_method`` overrides it for a given method tag. ``balance`` is a
    :class:`~ltce.balancenet.BalanceConfig` (``None`` means defaults).
    """

    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    per_method: dict[str, RegressorConfig] = field(default_factory=dict)
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    seqmsm_feed_observed: bool = False
    balance: Any = None
    seed: int = 0

    def regressor_for(self, method: str) -> RegressorConfig:
        return self.per_method.get(method, self.regressor)


@dataclass
class EffectEstimate:
    method: str
    tau_hat: float
    cate_hat: NDArray[np.float64]
    mu0: NDArray[np.float64] | None = None
    mu1: NDArray[np.float64] | None = None
    diagnostics: dict = field(default_factory=dict)
    model: Any = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"method": self.method, "tau_hat": self.tau_hat, "diagnostics": self.diagnostics}


@dataclass
class ImputedPanel:
    """Per-arm chained predictions of every stage for every unit.

    ``chains[:, t-1, a]`` is the arm-``a`` prediction of the stage-``t``
    outcome obtained by feeding earlier predictions forward.
    """

    chains: NDArray[np.float64]
    models: list[list[Any]]

    def predict_stage(self, a: int, t: int, X, S_hist) -> NDArray:
        """Stage-``t`` model of arm ``a`` evaluated at supplied inputs."""
        Z = np.column_stack([X, np.asarray(S_hist).reshape(len(X), -1)[:, : t - 1]])
        return self.models[a][t - 1].predict(Z)

    def predict_observed(self, ds: LongTermDataset, a: int) -> NDArray:
        """Final-stage arm-``a`` prediction using each unit's observed history."""
        return self.predict_stage(a, ds.T, ds.X, ds.S)


def _seed(cfg: EstimatorConfig, method: str, *idx: int) -> int:
    return derive_seed(cfg.seed, zlib.crc32(method.encode()), *idx)


def _estimate(method, mu0, mu1, **diag) -> EffectEstimate:
    cate = mu1 - mu0
    if not np.all(np.isfinite(cate)):
        raise EstimationError(f"{method}: non-finite CATE predictions")
    return EffectEstimate(method=method, tau_hat=float(np.mean(cate)), cate_hat=cate, mu0=mu0, mu1=mu1, diagnostics=diag)


def _need_rows(mask, what: str) -> None:
    if not mask.any():
        raise EstimationError(f"empty training set: {what}")


def naive_or(ds: LongTermDataset, cfg: EstimatorConfig | None = None) -> EffectEstimate:
    """Per-arm regression of Y on X over the complete cases."""
    cfg = cfg or EstimatorConfig()
    rc = cfg.regressor_for("naive-or")
    done = ds.R[:, -1] == 1
    mu, rows = [], []
    for a in (0, 1):
        m = done & (ds.A == a)
        _need_rows(m, f"naive-or arm {a} has no observed long-term outcome")
        reg = make_regressor(rc, _seed(cfg, "naive-or", a)).fit(ds.X[m], ds.Y[m])
        mu.append(reg.predict(ds.X))
        rows.append(int(m.sum()))
    return _estimate("naive-or", mu[0], mu[1], rows_used=rows)


def naive_ipw(ds: LongTermDataset, nuis: NuisanceScores, cfg: EstimatorConfig | None = None) -> EffectEstimate:
    """Inverse-propensity pseudo-outcomes on complete cases, regressed on X."""
    cfg = cfg or EstimatorConfig()
    rc = cfg.regressor_for("naive-ipw")
    done = ds.R[:, -1] == 1
    _need_rows(done, "naive-ipw: no observed long-term outcomes")
    mu, wmax = [], []
    for a in (0, 1):
        w = (ds.A[done] == a) / nuis.e(a)[done]
        phi = w * ds.Y[done]
        reg = make_regressor(rc, _seed(cfg, "naive-ipw", a)).fit(ds.X[done], phi)
        mu.append(reg.predict(ds.X))
        wmax.append(float(w.max()))
    return _estimate("naive-ipw", mu[0], mu[1], rows_used=int(done.sum()), max_weight=wmax)


def proposed_ipw(ds: LongTermDataset, nuis: NuisanceScores, cfg: EstimatorConfig | None = None) -> EffectEstimate:
    """Pseudo-outcome 1{A=a} R_T Y / (e_a r_T) for every unit, regressed on X per arm."""
    cfg = cfg or EstimatorConfig()
    rc = cfg.regressor_for("proposed-ipw")
    done = ds.R[:, -1] == 1
    _need_rows(done, "proposed-ipw: no observed long-term outcomes")
    rT = nuis.r[:, -1]
    if np.isnan(rT[done]).any():
        raise EstimationError("proposed-ipw: selection score undefined on a complete case")
    mu, wmax, pseudo = [], [], []
    for a in (0, 1):
        keep = done & (ds.A == a)
        w = np.zeros(ds.n)
        w[keep] = 1.0 / (nuis.e(a)[keep] * rT[keep])
        phi = np.where(keep, w * np.where(keep, ds.Y, 0.0), 0.0)
        reg = make_regressor(rc, _seed(cfg, "proposed-ipw", a)).fit(ds.X, phi)
        mu.append(reg.predict(ds.X))
        wmax.append(float(w.max()))
        pseudo.append(phi)
    est = _estimate("proposed-ipw", mu[0], mu[1], rows_used=ds.n, max_weight=wmax)
    est.model = {"pseudo_outcomes": pseudo}
    return est


def seqri(ds: LongTermDataset, cfg: EstimatorConfig | None = None) -> tuple[EffectEstimate, ImputedPanel]:
    """Sequential regression imputation.

    For each arm, stage ``t`` regresses the observed stage-t outcome on
    ``(X, S_1..S_{t-1})`` over units with ``A = a`` and ``R_t = 1``; the fitted
    stages are then chained, each fed the previous predictions, to give a full
    arm-``a`` trajectory for every unit.
    """
    cfg = cfg or EstimatorConfig()
    rc = cfg.regressor_for("seqri")
    n, T = ds.n, ds.T
    chains = np.empty((n, T, 2))
    models: list[list[Any]] = [[], []]
    rows = [[], []]
    for a in (0, 1):
        for t in range(1, T + 1):
            m = (ds.A == a) & (ds.R[:, t - 1] == 1)
            _need_rows(m, f"seqri arm {a} stage {t}")
            Z = np.column_stack([ds.X[m], ds.history(t)[m]])
            reg = make_regressor(rc, _seed(cfg, "seqri", a, t)).fit(Z, ds.outcome(t)[m])
            models[a].append(reg)
            rows[a].append(int(m.sum()))
            chains[:, t - 1, a] = reg.predict(np.column_stack([ds.X, chains[:, : t - 1, a]]))
    est = _estimate("seqri", chains[:, -1, 0], chains[:, -1, 1], rows_used=rows)
    panel = ImputedPanel(chains=chains, models=models)
    est.model = panel
    return est, panel


def seqmsm(ds: LongTermDataset, nuis: NuisanceScores, cfg: EstimatorConfig | None = None) -> EffectEstimate:
    """Sequential marginal structural model.

    Stage ``t`` fits ``f_t(a, .)`` by weighted least squares with row weight
    ``1{A=a} / e_a(X) * R_t / r_t`` on inputs ``(X, f_1, ..., f_{t-1})``, where
    the earlier ``f`` values are the fitted arm-``a`` chain (or the observed
    outcomes when ``cfg.seqmsm_feed_observed``).
    """
    cfg = cfg or EstimatorConfig()
    rc = cfg.regressor_for("seqmsm")
    n, T = ds.n, ds.T
    chains = np.empty((n, T, 2))
    rows = [[], []]
    wmax = [[], []]
    models: list[list[Any]] = [[], []]
    for a in (0, 1):
        inv_e = 1.0 / nuis.e(a)
        for t in range(1, T + 1):
            m = (ds.A == a) & (ds.R[:, t - 1] == 1)
            _need_rows(m, f"seqmsm arm {a} stage {t}")
            r_t = nuis.r[m, t - 1]
            if np.isnan(r_t).any():
                raise EstimationError(f"seqmsm: selection score undefined at stage {t}")
            w = inv_e[m] / r_t
            hist = ds.history(t)[m] if cfg.seqmsm_feed_observed else chains[m, : t - 1, a]
            Z = np.column_stack([ds.X[m], hist])
            reg = make_regressor(rc, _seed(cfg, "seqmsm", a, t)).fit(Z, ds.outcome(t)[m], w)
            models[a].append(reg)
            rows[a].append(int(m.sum()))
            wmax[a].append(float(w.max()))
            chains[:, t - 1, a] = reg.predict(np.column_stack([ds.X, chains[:, : t - 1, a]]))
    est = _estimate("seqmsm", chains[:, -1, 0], chains[:, -1, 1], rows_used=rows, max_weight=wmax)
    est.model = ImputedPanel(chains=chains, models=models)
    return est


def needs_nuisances(method: str) -> bool:
    return method in _USES_NUISANCE


def estimate(method: str, ds: LongTermDataset, cfg: EstimatorConfig | None = None,
             nuisances: NuisanceScores | None = None) -> EffectEstimate:
    """Dispatch on a method tag; nuisances are fit here only when not supplied."""
    cfg = cfg or EstimatorConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if needs_nuisances(method) and nuisances is None:
        nuisances = fit_nuisances(ds, cfg.nuisance)
    if method == "naive-or":
        return naive_or(ds, cfg)
    if method == "naive-ipw":
        return naive_ipw(ds, nuisances, cfg)
    if method == "proposed-ipw":
        return proposed_ipw(ds, nuisances, cfg)
    if method == "seqri":
        return seqri(ds, cfg)[0]
    if method == "seqmsm":
        return seqmsm(ds, nuisances, cfg)
    from . import balancenet

    bcfg = cfg.balance or balancenet.BalanceConfig()
    if method == "balancenet":
        return balancenet.run_balancenet(ds, bcfg, seed=_seed(cfg, "balancenet"))
    return balancenet.run_cfr(ds, bcfg, seed=_seed(cfg, "cfr"))
