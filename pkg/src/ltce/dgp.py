"""Synthetic panels with staged potential outcomes and score-driven dropout.

Two outcome styles are supported, both for any number of stages ``T >= 2``:

``continuous``
    Stage 1 is Bernoulli with a noisy logistic link; later stages and the
    long-term outcome are Gaussian around a linear index plus ``C1`` times the
    running sum of earlier outcomes.
``binarymix``
    Stage 1 as above; later stages are a Bernoulli draw whose probability is
    the logistic index plus ``C2`` times the average of earlier outcomes
    (clamped to [0, 1]), plus Gaussian noise.

The second parameter of every Normal here is a standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .dataset import GroundTruth, LongTermDataset

__all__ = [
    "Style",
    "DgpConfig",
    "DgpDraw",
    "Simulation",
    "gen_covariates",
    "gen_treatment",
    "sample_draw",
    "gen_outcomes_continuous",
    "gen_outcomes_binarymix",
    "apply_missing",
    "apply_soft_missing",
    "missing_counts",
    "true_effects",
    "simulate",
    "splitmix64",
    "derive_seed",
]

BETA0_SUPPORT = np.arange(5)
BETA0_PROBS = np.array([0.5, 0.2, 0.15, 0.1, 0.05])


class Style(str, Enum):
    CONTINUOUS = "continuous"
    BINARYMIX = "binarymix"


_STYLE_DEFAULTS = {
    Style.CONTINUOUS: dict(n=747, p=25, mu0=1.0, mu1=3.0, sigma0=1.0, sigma1=1.0),
    Style.BINARYMIX: dict(n=2570, p=17, mu0=0.0, mu1=2.0, sigma0=1.0, sigma1=1.0),
}


@dataclass(frozen=True)
class DgpConfig:
    """Knobs of one synthetic replication.

    Fields left as ``None`` take the style's defaults (IHDP-like sizes and
    noise for ``continuous``, JOBS-like for ``binarymix``). ``late_sd`` holds
    the per-arm standard deviations of the stage >= 2 innovations.
    ``missing`` selects the dropout rule: ``"score"`` removes the lowest-score
    units deterministically, ``"soft"`` removes them with a known probability
    that decreases in the score (used when true selection probabilities are
    needed).
    """

    style: Style = Style.CONTINUOUS
    n: int | None = None
    p: int | None = None
    T: int = 3
    C1: float = 5.0
    C2: float = 2.0
    mu0: float | None = None
    mu1: float | None = None
    sigma0: float | None = None
    sigma1: float | None = None
    late_sd: tuple[float, float] = (1.0, 0.5)
    gamma: float = 0.15
    treatment_coef_scale: float = 0.5
    missing: str = "score"
    soft_sharpness: float = 1.5
    tau_x_draws: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        style = Style(self.style)
        object.__setattr__(self, "style", style)
        for k, v in _STYLE_DEFAULTS[style].items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, v)
        object.__setattr__(self, "late_sd", tuple(float(s) for s in self.late_sd))
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if min(self.sigma0, self.sigma1, *self.late_sd) <= 0:
            raise ValueError("noise scales must be positive")
        if self.missing not in ("score", "soft"):
            raise ValueError(f"unknown missing mechanism {self.missing!r}")
        if self.missing == "soft" and self.gamma >= 0.5:
            raise ValueError("the soft mechanism needs gamma < 0.5 to keep selection positive")

    @property
    def t0(self) -> int:
        return self.T - 1

    def with_(self, **changes) -> "DgpConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style"] = self.style.value
        d["late_sd"] = list(self.late_sd)
        return d


@dataclass(frozen=True)
class DgpDraw:
    """Per-replication random coefficients (each a length-``p`` vector)."""

    w0: NDArray[np.float64]
    w1: NDArray[np.float64]
    beta0: NDArray[np.float64]
    beta1: NDArray[np.float64]
    theta: NDArray[np.float64]

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Simulation:
    """Everything produced for one synthetic replication."""

    config: DgpConfig
    draw: DgpDraw
    data: LongTermDataset
    truth: GroundTruth
    propensity: NDArray[np.float64]
    selection_factors: NDArray[np.float64] | None = field(default=None)

    @property
    def selection_scores(self) -> NDArray[np.float64] | None:
        """True r_t (cumulative products of stage factors); only for the soft mechanism."""
        if self.selection_factors is None:
            return None
        return np.cumprod(self.selection_factors, axis=1)

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "draw": self.draw.to_dict(),
            "normal_second_parameter": "standard deviation",
            "tau": self.truth.tau,
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)


# --------------------------------------------------------------------- seeds

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 output function."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *indices: int) -> int:
    """Fold integer indices into ``master`` with SplitMix64; bijective per step."""
    s = splitmix64(master & _MASK64)
    for k in indices:
        s = splitmix64(s ^ splitmix64(int(k) & _MASK64))
    return s


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- components

def gen_covariates(n: int, p: int, seed) -> NDArray[np.float64]:
    """First ceil(p/2) columns standard normal, the rest Bernoulli(0.5)."""
    rng = _rng(seed)
    k = math.ceil(p / 2)
    X = np.empty((n, p))
    X[:, :k] = rng.standard_normal((n, k))
    X[:, k:] = rng.integers(0, 2, size=(n, p - k))
    return X


def _truncnorm(rng: np.random.Generator, size: int, lo: float, hi: float) -> NDArray:
    out = np.empty(0)
    while out.size < size:
        z = rng.standard_normal(2 * size + 8)
        out = np.concatenate([out, z[(z >= lo) & (z <= hi)]])
    return out[:size]


def sample_draw(p: int, seed, treatment_coef_scale: float = 0.5) -> DgpDraw:
    rng = _rng(seed)
    return DgpDraw(
        w0=_truncnorm(rng, p, -1.0, 1.0),
        w1=rng.uniform(-1.0, 1.0, p),
        beta0=rng.choice(BETA0_SUPPORT, size=p, p=BETA0_PROBS).astype(float),
        beta1=4.0 * _truncnorm(rng, p, 0.0, 4.0),
        theta=treatment_coef_scale * rng.standard_normal(p) / math.sqrt(p),
    )


def gen_treatment(X, theta, seed) -> NDArray[np.int64]:
    """A_i ~ Bernoulli(sigmoid(theta . X_i))."""
    prob = expit(np.asarray(X) @ np.asarray(theta))
    return (_rng(seed).random(len(prob)) < prob).astype(np.int64)


def _stage_index(X, draw: DgpDraw, a: int) -> NDArray:
    return X @ (draw.beta1 if a else draw.beta0)


def _first_stage(X, draw: DgpDraw, cfg: DgpConfig, a: int, eps) -> NDArray:
    w = draw.w1 if a else draw.w0
    return expit((X @ w)[..., None] + eps) if eps.ndim == 2 else expit(X @ w + eps)


def _eps1(cfg: DgpConfig, a: int, rng, size) -> NDArray:
    mu, sd = (cfg.mu1, cfg.sigma1) if a else (cfg.mu0, cfg.sigma0)
    return rng.normal(mu, sd, size)


def _sample_arm(X, draw: DgpDraw, cfg: DgpConfig, a: int, rng) -> tuple[NDArray, NDArray]:
    """Realized S_1..S_t0 and Y under arm ``a`` for every row of ``X``."""
    n = X.shape[0]
    t0 = cfg.t0
    S = np.empty((n, t0))
    S[:, 0] = rng.random(n) < _first_stage(X, draw, cfg, a, _eps1(cfg, a, rng, n))
    lin = _stage_index(X, draw, a)
    sd = cfg.late_sd[a]
    for t in range(2, t0 + 2):
        hist = S[:, : t - 1].sum(axis=1)
        if cfg.style is Style.CONTINUOUS:
            val = rng.normal(lin + 2.0 * a, sd) + cfg.C1 * hist
        else:
            if t <= t0:
                prob = np.clip(expit(lin) + cfg.C2 / (t - 1) * hist, 0.0, 1.0)
                val = (rng.random(n) < prob) + rng.normal(0.0, sd, n)
            else:
                val = (rng.random(n) < expit(lin)) + cfg.C2 / t0 * hist + rng.normal(0.0, sd, n)
        if t <= t0:
            S[:, t - 1] = val
        else:
            Y = val
    return S, Y


def _stage_mean(lin, hist, cfg: DgpConfig, a: int, t: int) -> NDArray:
    """E[stage-t outcome | X, earlier outcomes] for t >= 2 (t = T is Y)."""
    if cfg.style is Style.CONTINUOUS:
        return lin + 2.0 * a + cfg.C1 * hist
    if t <= cfg.t0:
        return np.clip(expit(lin) + cfg.C2 / (t - 1) * hist, 0.0, 1.0)
    return expit(lin) + cfg.C2 / cfg.t0 * hist


def _conditional_mean_y(X, draw: DgpDraw, cfg: DgpConfig, a: int, rng, draws: int) -> NDArray:
    """Monte Carlo E[Y(a) | X] averaging closed-form stage means over noise draws.

    The stage-1 Bernoulli is integrated exactly given its logit noise, and the
    last short-term stage enters Y linearly so its conditional mean replaces a
    sample. For the continuous style every later stage is linear in its history
    and is propagated through means; the binary-mix clamp forces sampling of
    intermediate stages when T > 3.
    """
    n = X.shape[0]
    out = np.empty(n)
    lin_all = _stage_index(X, draw, a)
    chunk = max(1, 2_000_000 // max(draws, 1))
    sd = cfg.late_sd[a]
    T, t0 = cfg.T, cfg.t0
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        eps = _eps1(cfg, a, rng, (hi - lo, draws))
        q = _first_stage(X[lo:hi], draw, cfg, a, eps)
        lin = lin_all[lo:hi, None]
        acc = np.zeros_like(q)
        for s1, weight in ((1.0, q), (0.0, 1.0 - q)):
            hist = np.full_like(q, s1)
            for t in range(2, t0 + 1):
                m = _stage_mean(lin, hist, cfg, a, t)
                if cfg.style is Style.CONTINUOUS or t == t0:
                    hist = hist + m
                else:
                    hist = hist + (rng.random(m.shape) < m) + rng.normal(0.0, sd, m.shape)
            acc += weight * _stage_mean(lin, hist, cfg, a, T)
        out[lo:hi] = acc.mean(axis=1)
    return out


def _gen_outcomes(X, A, draw: DgpDraw, cfg: DgpConfig, seed) -> tuple[LongTermDataset, GroundTruth]:
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=np.int64)
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_arm0, s_arm1, s_truth = ss.spawn(3)
    S0, Y0 = _sample_arm(X, draw, cfg, 0, _rng(s_arm0))
    S1, Y1 = _sample_arm(X, draw, cfg, 1, _rng(s_arm1))
    truth_rng = _rng(s_truth)
    mu0 = _conditional_mean_y(X, draw, cfg, 0, truth_rng, cfg.tau_x_draws)
    mu1 = _conditional_mean_y(X, draw, cfg, 1, truth_rng, cfg.tau_x_draws)
    gt = GroundTruth(S_pot=np.stack([S0, S1], axis=2), Y_pot=np.column_stack([Y0, Y1]), tau_x=mu1 - mu0)
    S_obs, Y_obs = gt.factual(A)
    ds = LongTermDataset(X=X, A=A, S=S_obs, Y=Y_obs, R=np.ones((len(A), cfg.T), dtype=np.int64))
    return ds, gt


def gen_outcomes_continuous(X, A, draw: DgpDraw, cfg: DgpConfig, seed=None):
    """Fully observed panel and ground truth for the continuous style."""
    if cfg.style is not Style.CONTINUOUS:
        raise ValueError("config style must be continuous")
    return _gen_outcomes(X, A, draw, cfg, cfg.seed if seed is None else seed)


def gen_outcomes_binarymix(X, A, draw: DgpDraw, cfg: DgpConfig, seed=None):
    """Fully observed panel and ground truth for the binary-mix style."""
    if cfg.style is not Style.BINARYMIX:
        raise ValueError("config style must be binarymix")
    return _gen_outcomes(X, A, draw, cfg, cfg.seed if seed is None else seed)


# ------------------------------------------------------------------- missing

def _floor_count(x: float) -> int:
    # guards against 8.999999999 from float products that are exactly integral
    return int(math.floor(x + 1e-9))


def missing_counts(n: int, gamma: float, T: int) -> list[int]:
    """Units newly removed at each stage: floor(gamma (1 - gamma)^(t-1) n)."""
    return [_floor_count(gamma * (1.0 - gamma) ** (t - 1) * n) for t in range(1, T + 1)]


def _scores(ds: LongTermDataset, t: int) -> NDArray:
    return ds.outcomes[:, : t - 1].sum(axis=1) + ds.X.sum(axis=1)


def _require_complete(ds: LongTermDataset, gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if not np.all(ds.R == 1):
        raise ValueError("apply_missing expects a fully observed panel")


def apply_missing(ds: LongTermDataset, gamma: float, seed) -> LongTermDataset:
    """Score-based monotone dropout.

    Stage 1 drops ``floor(gamma n)`` units uniformly at random. At stage t >= 2
    the still-observed units are ranked by ``sum of earlier outcomes + sum of
    covariates`` and the ``floor(gamma (1 - gamma)^(t-1) n)`` lowest are
    dropped, ties going to the lower unit index.
    """
    _require_complete(ds, gamma)
    n, T = ds.n, ds.T
    counts = missing_counts(n, gamma, T)
    rng = _rng(seed)
    R = np.ones((n, T), dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    drop = rng.permutation(n)[: counts[0]]
    alive[drop] = False
    R[:, 0] = alive
    for t in range(2, T + 1):
        idx = np.flatnonzero(alive)
        order = idx[np.argsort(_scores(ds, t)[idx], kind="stable")]
        alive[order[: counts[t - 1]]] = False
        R[:, t - 1] = alive
    return ds.with_missing(R)


def apply_soft_missing(ds: LongTermDataset, gamma: float, seed, sharpness: float = 1.5):
    """Probabilistic dropout with known stagewise observation probabilities.

    Stage 1 is observed with probability ``1 - gamma``. At stage t >= 2 a
    still-observed unit stays observed with probability
    ``1 - 2 gamma sigmoid(-sharpness z)``, with ``z`` its standardized score
    among the units at risk, so low scores drop out more often.

    Returns the masked panel and the (n, T) matrix of stage factors
    ``P(R_t = 1 | R_{t-1} = 1, history)`` (NaN for units not at risk).
    """
    _require_complete(ds, gamma)
    if gamma >= 0.5:
        raise ValueError("soft missing needs gamma < 0.5")
    n, T = ds.n, ds.T
    rng = _rng(seed)
    factors = np.full((n, T), np.nan)
    R = np.zeros((n, T), dtype=np.int64)
    factors[:, 0] = 1.0 - gamma
    alive = rng.random(n) < factors[:, 0]
    R[:, 0] = alive
    for t in range(2, T + 1):
        idx = np.flatnonzero(alive)
        sc = _scores(ds, t)[idx]
        sd = sc.std()
        z = (sc - sc.mean()) / sd if sd > 0 else np.zeros_like(sc)
        keep = 1.0 - 2.0 * gamma * expit(-sharpness * z)
        factors[idx, t - 1] = keep
        stay = rng.random(idx.size) < keep
        alive = np.zeros(n, dtype=bool)
        alive[idx[stay]] = True
        R[:, t - 1] = alive
    return ds.with_missing(R), factors


def true_effects(gt: GroundTruth) -> tuple[float, NDArray[np.float64]]:
    return gt.tau, np.asarray(gt.tau_x)


# ------------------------------------------------------------------ pipeline

def simulate(cfg: DgpConfig, X=None) -> Simulation:
    """Draw one full replication; ``X`` overrides the synthetic covariates."""
    ss = np.random.SeedSequence(cfg.seed)
    s_cov, s_draw, s_treat, s_out, s_miss = ss.spawn(5)
    if X is None:
        X = gen_covariates(cfg.n, cfg.p, s_cov)
    else:
        X = np.asarray(X, dtype=float)
        cfg = cfg.with_(n=X.shape[0], p=X.shape[1])
    draw = sample_draw(cfg.p, s_draw, cfg.treatment_coef_scale)
    A = gen_treatment(X, draw.theta, s_treat)
    full, gt = _gen_outcomes(X, A, draw, cfg, s_out)
    factors = None
    if cfg.missing == "score":
        ds = apply_missing(full, cfg.gamma, s_miss)
    else:
        ds, factors = apply_soft_missing(full, cfg.gamma, s_miss, cfg.soft_sharpness)
    return Simulation(
        config=cfg,
        draw=draw,
        data=ds,
        truth=gt,
        propensity=expit(X @ draw.theta),
        selection_factors=factors,
    )
