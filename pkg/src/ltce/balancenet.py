"""Sequential representation-balancing network.

Each stage ``t`` has a block made of an encoder ``Phi`` acting on
``(X~, A)`` and two heads ``h_0``, ``h_1``. The block minimizes

    mean_{R~=1} (h_A(Phi) - Y~)^2
      + lambda1 * |mean Phi[R~=1] - mean Phi[R~=0]|^2
      + lambda2 * |mean Phi[A=1]  - mean Phi[A=0]|^2

and stages are chained: stage ``t`` sees ``X`` plus the stage-1..t-1
outcomes, observed where available and filled with the factual-arm head
output otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .dataset import LongTermDataset
from .nn import MLP, FitHistory, TrainConfig, adam_fit, seed_sequence, split_indices

log = logging.getLogger(__name__)

__all__ = [
    "BalanceError",
    "BalanceConfig",
    "Block",
    "StageInput",
    "TrainedBlock",
    "linear_mmd",
    "linear_mmd_grad",
    "block_loss",
    "two_head_loss",
    "train_block",
    "run_balancenet",
    "run_cfr",
]


class BalanceError(ValueError):
    """A stage cannot be trained (for example an arm has no observed rows)."""


@dataclass(frozen=True)
class BalanceConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    d_rep: int = 32
    enc_layers: int = 2
    head_hidden: tuple[int, ...] = (25,)
    activation: str = "elu"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_grid=(0.001, 0.005, 0.01)))

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("imbalance penalties must be nonnegative")
        if self.d_rep < 1 or self.enc_layers < 1:
            raise ValueError("encoder needs at least one layer of positive width")

    def with_(self, **changes) -> "BalanceConfig":
        return replace(self, **changes)


# ------------------------------------------------------------------ MMD

def linear_mmd(rep_a, rep_b) -> float:
    """Squared distance between the row means of two representation groups.

    An empty group gives 0.
    """
    rep_a, rep_b = np.asarray(rep_a, dtype=float), np.asarray(rep_b, dtype=float)
    if len(rep_a) == 0 or len(rep_b) == 0:
        return 0.0
    d = rep_a.mean(axis=0) - rep_b.mean(axis=0)
    return float(d @ d)


def linear_mmd_grad(rep_a, rep_b):
    """``(value, d/d rep_a, d/d rep_b)``; each row of a group gets ``+-2 d / n_group``."""
    if len(rep_a) == 0 or len(rep_b) == 0:
        return 0.0, np.zeros_like(rep_a), np.zeros_like(rep_b)
    d = rep_a.mean(axis=0) - rep_b.mean(axis=0)
    ga = np.broadcast_to(2.0 * d / len(rep_a), rep_a.shape)
    gb = np.broadcast_to(-2.0 * d / len(rep_b), rep_b.shape)
    return float(d @ d), ga, gb


# ---------------------------------------------------------------- blocks

class Block:
    """Encoder plus two heads; parameters live in one flat list.

    Layout: encoder ``[W, b] * enc_layers``, then head 0, then head 1.
    """

    def __init__(self, d_in: int, cfg: BalanceConfig):
        self.d_in = int(d_in)
        self.cfg = cfg
        self.enc = MLP((self.d_in + 1,) + (cfg.d_rep,) * cfg.enc_layers, cfg.activation, params=[], out_activation=True)
        head_sizes = (cfg.d_rep, *cfg.head_hidden, 1)
        self.heads = [MLP(head_sizes, cfg.activation, params=[]) for _ in (0, 1)]
        self.n_enc = 2 * cfg.enc_layers
        self.n_head = 2 * (len(cfg.head_hidden) + 1)

    def init_params(self, seed) -> list[NDArray]:
        s_enc, s_h0, s_h1 = seed_sequence(seed).spawn(3)
        enc = MLP(self.enc.sizes, self.cfg.activation, seed=s_enc).params
        h0 = MLP(self.heads[0].sizes, self.cfg.activation, seed=s_h0).params
        h1 = MLP(self.heads[1].sizes, self.cfg.activation, seed=s_h1).params
        return enc + h0 + h1

    def split(self, params):
        e = self.n_enc
        return params[:e], [params[e : e + self.n_head], params[e + self.n_head :]]

    def represent(self, params, X, A):
        Zin = np.column_stack([X, np.asarray(A, dtype=float)])
        return self.enc.forward(Zin, self.split(params)[0])

    def head(self, params, a: int, phi) -> NDArray:
        return self.heads[a](phi, self.split(params)[1][a])[:, 0]


@dataclass(frozen=True)
class StageInput:
    """Features ``X~`` (fully populated), arm, observation flag, and target.

    ``Y`` may hold anything (typically NaN) where ``R == 0``.
    """

    X: NDArray[np.float64]
    A: NDArray[np.int64]
    R: NDArray[np.int64]
    Y: NDArray[np.float64]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.X)):
            raise BalanceError("stage features must be fully populated")
        obs = self.R == 1
        if not np.all(np.isfinite(self.Y[obs])):
            raise BalanceError("stage target missing on an observed row")

    def take(self, idx) -> "StageInput":
        return StageInput(self.X[idx], self.A[idx], self.R[idx], self.Y[idx])


def block_loss(params, block: Block, inp: StageInput, lambda1: float, lambda2: float, terms: dict | None = None):
    """Factual squared error plus both MMD penalties, with analytic gradients.

    If ``terms`` is a dict it receives the three loss components and an
    ``empty_groups`` list naming any penalty whose group was empty.
    """
    enc_p, head_p = block.split(params)
    phi, ecache = block.represent(params, inp.X, inp.A)
    dphi = np.zeros_like(phi)
    obs = inp.R == 1
    n_obs = int(obs.sum())
    mse = 0.0
    head_grads = []
    for a in (0, 1):
        m = obs & (inp.A == a)
        if not m.any():
            head_grads.append([np.zeros_like(p) for p in head_p[a]])
            continue
        h, hcache = block.heads[a].forward(phi[m], head_p[a])
        r = h[:, 0] - inp.Y[m]
        mse += float(r @ r) / n_obs
        g, dphi_m = block.heads[a].backward(hcache, (2.0 * r / n_obs)[:, None], head_p[a])
        dphi[m] += dphi_m
        head_grads.append(g)
    loss = mse
    empty = []
    parts = {}
    for name, lam, grp in (("ipm1", lambda1, obs), ("ipm2", lambda2, inp.A == 1)):
        if not grp.any() or grp.all():
            empty.append(name)
        if lam == 0:
            parts[name] = linear_mmd(phi[grp], phi[~grp]) if terms is not None else 0.0
            continue
        val, ga, gb = linear_mmd_grad(phi[grp], phi[~grp])
        parts[name] = val
        loss += lam * val
        dphi[grp] += lam * ga
        dphi[~grp] += lam * gb
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite block loss")
    enc_grads, _ = block.enc.backward(ecache, dphi, enc_p)
    if terms is not None:
        terms.update(mse=mse, ipm1=parts["ipm1"], ipm2=parts["ipm2"], empty_groups=empty)
    return float(loss), enc_grads + head_grads[0] + head_grads[1]


def two_head_loss(params, block: Block, inp: StageInput):
    """Plain factual MSE of the two-head network, written without any penalty code."""
    enc_p, head_p = block.split(params)
    phi, ecache = block.represent(params, inp.X, inp.A)
    obs = (inp.R == 1).astype(float)
    n_obs = obs.sum()
    pred = np.empty(len(inp.A))
    dphi = np.zeros_like(phi)
    grads = []
    for a in (0, 1):
        sel = (inp.A == a).astype(float) * obs
        h, hcache = block.heads[a].forward(phi, head_p[a])
        pred = np.where(inp.A == a, h[:, 0], pred)
        r = np.where(sel > 0, h[:, 0] - np.where(sel > 0, inp.Y, 0.0), 0.0)
        g, d = block.heads[a].backward(hcache, (2.0 * r * sel / n_obs)[:, None], head_p[a])
        dphi += d
        grads.append(g)
    resid = np.where(obs > 0, pred - np.where(obs > 0, inp.Y, 0.0), 0.0)
    loss = float(np.sum(resid**2) / n_obs)
    enc_grads, _ = block.enc.backward(ecache, dphi, enc_p)
    return loss, enc_grads + grads[0] + grads[1]


@dataclass
class TrainedBlock:
    block: Block
    params: list[NDArray]
    x_mu: NDArray
    x_sd: NDArray
    y_mu: float
    y_sd: float
    history: FitHistory
    terms: dict = field(default_factory=dict)

    def _x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mu) / self.x_sd

    def representation(self, X, A) -> NDArray:
        return self.block.represent(self.params, self._x(X), A)[0]

    def predict(self, X, a: int) -> NDArray:
        """Head ``a`` output with every unit assigned arm ``a``."""
        A = np.full(len(X), a)
        phi = self.representation(X, A)
        return self.block.head(self.params, a, phi) * self.y_sd + self.y_mu

    def predict_factual(self, X, A) -> NDArray:
        A = np.asarray(A)
        return np.where(A == 1, self.predict(X, 1), self.predict(X, 0))

    def to_json(self) -> dict:
        enc, heads = self.block.split(self.params)
        return {
            "x_mu": self.x_mu.tolist(),
            "x_sd": self.x_sd.tolist(),
            "y_mu": self.y_mu,
            "y_sd": self.y_sd,
            "encoder": [p.tolist() for p in enc],
            "head0": [p.tolist() for p in heads[0]],
            "head1": [p.tolist() for p in heads[1]],
            "best_epoch": self.history.best_epoch,
            "lr": self.history.lr,
        }


def train_block(inp: StageInput, cfg: BalanceConfig, lambda1: float | None = None,
                lambda2: float | None = None, seed=0, loss: Callable | None = None) -> TrainedBlock:
    """Fit one stage block with full-batch Adam and early stopping.

    The validation set is a seeded 20% share of the observed rows, scored by
    factual MSE; all remaining rows (observed or not) enter the training loss.
    ``loss(params, block, inp)`` replaces the default objective when given.
    """
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    obs_idx = np.flatnonzero(inp.R == 1)
    for a in (0, 1):
        if not np.any(inp.A[obs_idx] == a):
            raise BalanceError(f"arm {a} has no observed rows at this stage")
    s_init, s_split = seed_sequence(seed).spawn(2)
    tr_obs, va_obs = split_indices(obs_idx.size, cfg.train.val_frac, s_split)
    val_rows = np.sort(obs_idx[va_obs])
    train_mask = np.ones(len(inp.A), dtype=bool)
    train_mask[val_rows] = False

    x_mu = inp.X.mean(axis=0)
    x_sd = inp.X.std(axis=0)
    x_sd = np.where(x_sd > 1e-12, x_sd, 1.0)
    y_obs = inp.Y[obs_idx[tr_obs]]
    y_mu = float(y_obs.mean())
    y_sd = float(y_obs.std()) if y_obs.std() > 1e-12 else 1.0
    Xs = (inp.X - x_mu) / x_sd
    Ys = np.where(inp.R == 1, (np.where(inp.R == 1, inp.Y, 0.0) - y_mu) / y_sd, 0.0)
    scaled = StageInput(Xs, inp.A, inp.R, Ys)
    train, val = scaled.take(np.flatnonzero(train_mask)), scaled.take(val_rows)

    block = Block(inp.X.shape[1], cfg)
    init = block.init_params(s_init)
    flags: set[str] = set()

    if loss is None:
        def lg(p):
            terms: dict = {}
            out = block_loss(p, block, train, lam1, lam2, terms)
            flags.update(terms["empty_groups"])
            return out
    else:
        def lg(p):
            return loss(p, block, train)

    vl = None
    if val_rows.size:
        def vl(p):
            return two_head_loss(p, block, val)[0]

    best = None
    for lr in cfg.train.lr_grid or (cfg.train.lr,):
        params, hist = adam_fit(init, lg, vl, cfg.train, lr=lr)
        score = min(hist.val) if hist.val else hist.train[-1]
        if best is None or score < best[0]:
            best = (score, params, hist)
    for name in sorted(flags):
        penalty = lam1 if name == "ipm1" else lam2
        if penalty > 0:
            log.warning("%s: one group is empty, penalty treated as 0", name)
    terms: dict = {}
    block_loss(best[1], block, train, lam1, lam2, terms)
    terms["empty_groups"] = sorted(set(terms["empty_groups"]))
    terms["val_mse"] = best[0]
    return TrainedBlock(block, best[1], x_mu, x_sd, y_mu, y_sd, best[2], terms)


# -------------------------------------------------------------- pipeline

def _run(ds: LongTermDataset, cfg: BalanceConfig, seed, single_block: bool, loss=None):
    from .estimators import EffectEstimate

    T = ds.T
    stages = [T] if single_block else list(range(1, T + 1))
    seeds = seed_sequence(seed).spawn(len(stages))
    filled: list[NDArray] = []
    chain: dict[int, list[NDArray]] = {0: [], 1: []}
    blocks, diag = [], []
    for k, t in enumerate(stages):
        Xt = np.column_stack([ds.X, *filled])
        R_t = ds.R[:, t - 1]
        y_t = ds.outcome(t)
        inp = StageInput(Xt, ds.A, R_t, y_t)
        tb = train_block(inp, cfg, seed=seeds[k], loss=loss)
        blocks.append(tb)
        diag.append({
            "stage": t,
            "best_epoch": tb.history.best_epoch,
            "lr": tb.history.lr,
            "mse": tb.terms.get("mse"),
            "ipm1": tb.terms.get("ipm1"),
            "ipm2": tb.terms.get("ipm2"),
            "empty_groups": tb.terms.get("empty_groups", []),
        })
        filled.append(np.where(R_t == 1, np.where(R_t == 1, y_t, 0.0), tb.predict_factual(Xt, ds.A)))
        for a in (0, 1):
            chain[a].append(tb.predict(np.column_stack([ds.X, *chain[a]]), a))
    mu0, mu1 = chain[0][-1], chain[1][-1]
    cate = mu1 - mu0
    est = EffectEstimate(
        method="cfr" if single_block else "balancenet",
        tau_hat=float(np.mean(cate)),
        cate_hat=cate,
        mu0=mu0,
        mu1=mu1,
        diagnostics={"stages": diag, "lambda1": cfg.lambda1, "lambda2": cfg.lambda2},
    )
    est.model = blocks
    return est


def run_balancenet(ds: LongTermDataset, cfg: BalanceConfig | None = None, seed=0,
                   single_block: bool = False, loss: Callable | None = None):
    """Train the stage blocks in order and return per-unit CATE predictions.

    Arm-``a`` predictions chain the arm-``a`` head outputs through the stages.
    ``single_block`` fits only the final outcome on ``X``.
    """
    return _run(ds, cfg or BalanceConfig(), seed, single_block, loss)


def run_cfr(ds: LongTermDataset, cfg: BalanceConfig | None = None, seed=0):
    """Treatment-balancing baseline: one block on complete cases, no missingness penalty."""
    cfg = (cfg or BalanceConfig()).with_(lambda1=0.0)
    return _run(ds, cfg, seed, single_block=True)
