"""Small numpy feed-forward networks, full-batch Adam, and plug-in regressors.

All regressors share ``fit(Z, y, w) -> self`` / ``predict(Z)``. The network
minimizes the weighted mean squared error ``sum w (y - f)^2 / sum w``; rows with
zero weight are dropped before anything else happens so they cannot influence
the validation split, the standardization, or the optimization path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "TrainingError",
    "TrainConfig",
    "RegressorConfig",
    "MLP",
    "MLPRegressor",
    "LinearRegressor",
    "MeanRegressor",
    "make_regressor",
    "adam_fit",
    "weighted_mse",
    "flatten",
    "unflatten",
    "gradient_check",
    "seed_sequence",
]


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    max_epochs: int = 2000
    patience: int = 10
    val_frac: float = 0.2
    lr_grid: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError("val_frac must lie in [0, 1)")


@dataclass(frozen=True)
class RegressorConfig:
    """Which regressor to build. ``kind`` is ``mlp``, ``linear`` or ``mean``."""

    kind: str = "mlp"
    hidden: tuple[int, ...] = (50, 25)
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_(self, **changes) -> "RegressorConfig":
        return replace(self, **changes)


# ----------------------------------------------------------------- network

def _act(name: str):
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0)), (lambda z, a: (z > 0).astype(z.dtype))
    if name == "elu":
        return (
            lambda z: np.where(z > 0, z, np.expm1(np.minimum(z, 0.0))),
            lambda z, a: np.where(z > 0, 1.0, a + 1.0),
        )
    raise ValueError(f"unknown activation {name!r}")


class MLP:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``.

    The output layer is linear unless ``out_activation`` is set, in which case
    every layer applies the activation (used for representation encoders).

    Parameters are kept as a flat list ``[W1, b1, W2, b2, ...]`` with
    ``W_k`` of shape (fan_in, fan_out). Weights start from
    ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases start at zero.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "relu", seed=None, params=None,
                 out_activation: bool = False):
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.out_activation = out_activation
        self._f, self._df = _act(activation)
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                lim = 1.0 / math.sqrt(fan_in)
                params.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=float) for p in params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, Z, params=None):
        params = self.params if params is None else params
        h = np.asarray(Z, dtype=float)
        cache = []
        n_layers = len(params) // 2
        for k in range(n_layers):
            W, b = params[2 * k], params[2 * k + 1]
            z = h @ W + b
            if k < n_layers - 1 or self.out_activation:
                a = self._f(z)
                cache.append((h, z, a))
                h = a
            else:
                cache.append((h, z, z))
                h = z
        return h, cache

    def backward(self, cache, dout, params=None):
        """Gradients of ``sum(dout * output)`` w.r.t. params, plus w.r.t. the input."""
        params = self.params if params is None else params
        grads = [None] * len(params)
        n_layers = len(params) // 2
        g = dout
        for k in reversed(range(n_layers)):
            h_in, z, a = cache[k]
            if k < n_layers - 1 or self.out_activation:
                g = g * self._df(z, a)
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ params[2 * k].T
        return grads, g

    def __call__(self, Z, params=None):
        return self.forward(Z, params)[0]


def flatten(arrays) -> NDArray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec, like) -> list[NDArray]:
    out, i = [], 0
    for a in like:
        out.append(np.asarray(vec[i : i + a.size]).reshape(a.shape))
        i += a.size
    return out


def weighted_mse(params, net: MLP, Z, y, w):
    """Loss ``sum w (f - y)^2 / sum w`` and its parameter gradients."""
    f, cache = net.forward(Z, params)
    f = f[:, 0]
    wsum = w.sum()
    if wsum <= 0:
        return 0.0, [np.zeros_like(p) for p in params]
    r = f - y
    loss = float(np.dot(w, r * r) / wsum)
    grads, _ = net.backward(cache, (2.0 * w * r / wsum)[:, None], params)
    return loss, grads


# --------------------------------------------------------------- optimizer

@dataclass
class FitHistory:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    best_epoch: int = 0
    lr: float = 0.0


def adam_fit(
    params: list[NDArray],
    loss_grad: Callable[[list[NDArray]], tuple[float, list[NDArray]]],
    val_loss: Callable[[list[NDArray]], float] | None,
    cfg: TrainConfig,
    lr: float | None = None,
) -> tuple[list[NDArray], FitHistory]:
    """Full-batch Adam with early stopping on ``val_loss`` (best params restored).

    Without a validation callable the run lasts ``cfg.max_epochs`` epochs and
    the final parameters are returned.
    """
    lr = cfg.lr if lr is None else lr
    params = [p.copy() for p in params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    hist = FitHistory(lr=lr)
    best, best_params, since = math.inf, [p.copy() for p in params], 0
    b1, b2 = cfg.beta1, cfg.beta2
    for epoch in range(1, cfg.max_epochs + 1):
        loss, grads = loss_grad(params)
        if not math.isfinite(loss):
            raise TrainingError(
                f"non-finite training loss at epoch {epoch} "
                f"(max |param| = {max(float(np.abs(p).max()) for p in params):.3g})"
            )
        hist.train.append(loss)
        for k, g in enumerate(grads):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1**epoch)
            vhat = v[k] / (1 - b2**epoch)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if val_loss is None:
            continue
        vl = val_loss(params)
        if not math.isfinite(vl):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.val.append(vl)
        if vl < best:
            best, best_params, since = vl, [p.copy() for p in params], 0
            hist.best_epoch = epoch
        else:
            since += 1
            if since >= cfg.patience:
                break
    if val_loss is None:
        hist.best_epoch = cfg.max_epochs
        return params, hist
    return best_params, hist


def split_indices(n: int, val_frac: float, seed) -> tuple[NDArray, NDArray]:
    """Seeded shuffle; the last ``val_frac`` share becomes the validation set."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(val_frac * n))
    if n_val < 1 or n - n_val < 2:
        return perm, perm[:0]
    return perm[: n - n_val], perm[n - n_val :]


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, None, or an existing SeedSequence."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _standardizer(M):
    mu = M.mean(axis=0)
    sd = M.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return mu, sd


# --------------------------------------------------------------- regressors

class MLPRegressor:
    """Feed-forward regressor trained on standardized inputs and targets."""

    def __init__(self, hidden=(50, 25), activation="relu", train: TrainConfig | None = None, seed=0):
        self.hidden = tuple(hidden)
        self.activation = activation
        self.train_cfg = train or TrainConfig()
        self.seed = seed
        self.net: MLP | None = None
        self.history: FitHistory | None = None

    def fit(self, Z, y, w=None) -> "MLPRegressor":
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise ValueError("sample weights must be nonnegative")
        keep = w > 0
        Z, y, w = Z[keep], y[keep], w[keep]
        if len(y) < 2:
            raise ValueError("need at least two rows with positive weight")
        if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise ValueError("training data must be finite")
        self.z_mu, self.z_sd = _standardizer(Z)
        self.y_mu, self.y_sd = _standardizer(y[:, None])
        Zs = (Z - self.z_mu) / self.z_sd
        ys = (y - self.y_mu[0]) / self.y_sd[0]
        cfg = self.train_cfg
        ss = seed_sequence(self.seed)
        s_init, s_split = ss.spawn(2)
        tr, va = split_indices(len(y), cfg.val_frac, s_split)
        sizes = (Z.shape[1], *self.hidden, 1)
        init = MLP(sizes, self.activation, seed=s_init).params
        net = MLP(sizes, self.activation, params=init)

        def lg(p):
            return weighted_mse(p, net, Zs[tr], ys[tr], w[tr])

        vl = None
        if va.size:
            def vl(p):
                return weighted_mse(p, net, Zs[va], ys[va], w[va])[0]

        lrs = cfg.lr_grid or (cfg.lr,)
        best = None
        for lr in lrs:
            params, hist = adam_fit(init, lg, vl, cfg, lr=lr)
            score = min(hist.val) if hist.val else hist.train[-1]
            if best is None or score < best[0]:
                best = (score, params, hist)
        net.params = best[1]
        self.net, self.history = net, best[2]
        return self

    def predict(self, Z) -> NDArray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        out = self.net((Z - self.z_mu) / self.z_sd)[:, 0]
        return out * self.y_sd[0] + self.y_mu[0]


class LinearRegressor:
    """Closed-form weighted least squares with an intercept."""

    def fit(self, Z, y, w=None) -> "LinearRegressor":
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise ValueError("sample weights must be nonnegative")
        keep = w > 0
        D = np.column_stack([np.ones(keep.sum()), Z[keep]])
        sw = np.sqrt(w[keep])
        self.coef_, *_ = np.linalg.lstsq(D * sw[:, None], y[keep] * sw, rcond=None)
        return self

    def predict(self, Z) -> NDArray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        return self.coef_[0] + Z @ self.coef_[1:]


class MeanRegressor:
    """Weighted mean of the targets; ignores the features."""

    def fit(self, Z, y, w=None) -> "MeanRegressor":
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
        self.value_ = float(np.dot(w, y) / w.sum())
        return self

    def predict(self, Z) -> NDArray:
        return np.full(np.asarray(Z).shape[0], self.value_)


def make_regressor(cfg: RegressorConfig, seed=0):
    if cfg.kind == "mlp":
        return MLPRegressor(cfg.hidden, cfg.activation, cfg.train, seed=seed)
    if cfg.kind == "linear":
        return LinearRegressor()
    if cfg.kind == "mean":
        return MeanRegressor()
    raise ValueError(f"unknown regressor kind {cfg.kind!r}")


# ------------------------------------------------------------ gradient audit

def gradient_check(loss_grad, params, h: float = 1e-5) -> float:
    """Largest ``|g_analytic - g_fd| / max(1, |g_fd|)`` over all parameters.

    ``loss_grad(params) -> (loss, grads)`` with ``params`` a list of arrays;
    finite differences are central with step ``h``.
    """
    params = [np.array(p, dtype=float) for p in params]
    _, grads = loss_grad(params)
    analytic = flatten(grads)
    x0 = flatten(params)
    fd = np.empty_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        fp = loss_grad(unflatten(xp, params))[0]
        fm = loss_grad(unflatten(xm, params))[0]
        fd[i] = (fp - fm) / (2 * h)
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))))
