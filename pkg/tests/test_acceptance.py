"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N PASS|FAIL`` line (collected into the pytest
terminal summary) and then asserts the same condition.
"""

import math
import time

import numpy as np
import pytest
from scipy.special import expit

from ltce.balancenet import BalanceConfig, Block, StageInput, block_loss
from ltce.dataset import LongTermDataset, validate_monotone
from ltce.dgp import DgpConfig, missing_counts, simulate
from ltce.estimators import EstimatorConfig, naive_ipw, proposed_ipw, seqmsm, seqri
from ltce.harness import ExperimentConfig, read_records, run_experiment
from ltce.metrics import TrialResult, aggregate, eps_cate, paired_t_test
from ltce.nn import MLP, RegressorConfig, gradient_check, weighted_mse
from ltce.nuisance import NuisanceConfig, NuisanceScores, estimate_selection_scores, fit_nuisances, logistic_loss

LIN = EstimatorConfig(regressor=RegressorConfig(kind="linear"))


def _means(records, method, axis_value=None):
    trials = [TrialResult(r["method"], r["eps_ate"], r["eps_cate"], r["trial"])
              for r in records
              if r["method"] == method and r["sweep_value"] == axis_value and r["eps_cate"] is not None]
    return aggregate(trials).mean(method, "eps_cate"), len(trials)


def test_c01_oracle_ipw_identification(report):
    start = time.perf_counter()
    sim = simulate(DgpConfig(style="continuous", n=20_000, gamma=0.2, missing="soft", tau_x_draws=200))
    nu = NuisanceScores.from_oracle(sim.propensity, sim.selection_scores)
    tau_hat = proposed_ipw(sim.data, nu, LIN).tau_hat
    tau = sim.truth.tau
    elapsed = time.perf_counter() - start
    err, tol = abs(tau_hat - tau), 0.05 * max(1.0, abs(tau))
    ok = err <= tol and elapsed < 60
    report(1, "oracle IPW", ok, f"|err|={err:.4f} tol={tol:.4f} {elapsed:.1f}s")
    assert ok


def _discrete_toy(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, n).astype(float)
    A = rng.integers(0, 2, n)
    S1 = rng.integers(0, 2, n).astype(float)
    S2 = rng.integers(0, 2, n).astype(float)
    R1 = rng.random(n) < expit(0.5 + 0.8 * X - 0.4 * A)
    R2 = R1 & (rng.random(n) < expit(0.3 + 0.6 * S1 - 0.5 * X + 0.2 * A))
    R3 = R2 & (rng.random(n) < expit(-0.2 + 0.9 * S2 + 0.4 * S1 + 0.3 * A))
    R = np.column_stack([R1, R2, R3]).astype(int)
    S_obs = np.where(R[:, :2] == 1, np.column_stack([S1, S2]), np.nan)
    ds = LongTermDataset(X=X[:, None], A=A, S=S_obs, Y=np.where(R3, rng.normal(size=n), np.nan), R=R)
    return ds, np.column_stack([X, A, S1, S2]).astype(int)


def test_c02_factorization_against_frequency_table(report):
    start = time.perf_counter()
    ds, cells = _discrete_toy(100_000, 0)
    r, _ = estimate_selection_scores(ds, NuisanceConfig(eps_clip=0.0))
    worst = 0.0
    key = cells @ np.array([8, 4, 2, 1])
    for k in range(16):
        in_cell = key == k
        empirical = ds.R[in_cell, 2].mean()
        scored = in_cell & ~np.isnan(r[:, 2])
        fitted = r[scored, 2]
        assert np.ptp(fitted) < 1e-12  # r3 is a function of the cell only
        worst = max(worst, abs(fitted[0] - empirical))
    elapsed = time.perf_counter() - start
    ok = worst < 0.02 and elapsed < 30
    report(2, "selection-score factorization", ok, f"max cell err={worst:.4f} {elapsed:.1f}s")
    assert ok


def test_c03_monotone_invariants(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(100):
        n = int(rng.integers(50, 400))
        T = int(rng.integers(2, 6))
        gamma = float(rng.choice([0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.5]))
        cfg = DgpConfig(style=str(rng.choice(["continuous", "binarymix"])), n=n, p=int(rng.integers(1, 8)),
                        T=T, gamma=gamma, seed=int(rng.integers(0, 2**32)), tau_x_draws=2)
        R = simulate(cfg).data.R
        validate_monotone(R)
        expected = n - np.cumsum(missing_counts(n, gamma, T))
        failures += not np.array_equal(R.sum(axis=0), expected)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 30
    report(3, "monotone invariants", ok, f"{failures} count mismatches {elapsed:.1f}s")
    assert ok


def test_c04_gradient_audits(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    Z, y, w = rng.normal(size=(8, 4)), rng.normal(size=8), rng.uniform(0.5, 2.0, 8)
    errs = {}
    net = MLP((4, 50, 25, 1), "relu", seed=1)
    shifted = [p + (0.3 if p.ndim == 1 else 0.0) for p in net.params]
    errs["mlp"] = gradient_check(lambda p: weighted_mse(p, net, Z, y, w), shifted)
    yb = rng.integers(0, 2, 8).astype(float)
    errs["logistic"] = gradient_check(lambda p: logistic_loss(p, Z, yb, w), [rng.normal(size=4), np.array(0.1)])
    A = np.array([0, 1, 0, 1, 1, 0, 1, 0])
    R = np.array([1, 1, 0, 1, 0, 1, 1, 0])
    inp = StageInput(Z, A, R, np.where(R == 1, y, np.nan))
    block = Block(4, BalanceConfig())
    errs["balancenet"] = gradient_check(lambda p: block_loss(p, block, inp, 1.0, 1.0), block.init_params(5))
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 10
    report(4, "gradient audits", ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" {elapsed:.1f}s")
    assert ok


def _affine_panel(n=500, T=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    A = rng.integers(0, 2, n)
    pot = np.empty((n, T, 2))
    for a in (0, 1):
        for t in range(T):
            pot[:, t, a] = rng.normal() + X @ rng.normal(size=3) + pot[:, :t, a] @ (0.5 * rng.normal(size=t))
    last = rng.integers(1, T + 1, n)
    last[:40] = T
    R = (np.arange(T)[None, :] < last[:, None]).astype(int)
    obs = np.where(R == 1, pot[np.arange(n), :, A], np.nan)
    return LongTermDataset(X=X, A=A, S=obs[:, :-1], Y=obs[:, -1], R=R), pot


def test_c05_seqri_exactness(report):
    ds, pot = _affine_panel()
    est, panel = seqri(ds, LIN)
    imp = np.max(np.abs(panel.chains - pot))
    cate = np.max(np.abs(est.cate_hat - (pot[:, -1, 1] - pot[:, -1, 0])))
    ok = max(imp, cate) < 1e-8
    report(5, "SeqRI exactness", ok, f"imputation={imp:.1e} cate={cate:.1e}")
    assert ok


def test_c06_reduction_lattice(report):
    sim = simulate(DgpConfig(style="binarymix", n=800, p=6, gamma=0.0, seed=6, tau_x_draws=5))
    ds = sim.data
    nu = fit_nuisances(ds)
    assert np.all(nu.r == 1.0)
    ipw = np.max(np.abs(proposed_ipw(ds, nu, LIN).cate_hat - naive_ipw(ds, nu, LIN).cate_hat))

    const = NuisanceScores.from_oracle(np.full(ds.n, 0.5), np.ones((ds.n, ds.T)))
    msm = np.max(np.abs(seqmsm(ds, const, LIN).cate_hat - seqri(ds, LIN)[0].cate_hat))

    rng = np.random.default_rng(0)
    R = (rng.random(40) < 0.7).astype(int)
    R[:2] = 1
    inp = StageInput(rng.normal(size=(40, 3)), np.tile([0, 1], 20), R, np.where(R == 1, rng.normal(size=40), np.nan))
    block = Block(3, BalanceConfig())
    params = block.init_params(3)
    loss, _ = block_loss(params, block, inp, 0.0, 0.0)
    phi = block.represent(params, inp.X, inp.A)[0]
    pred = np.where(inp.A == 1, block.head(params, 1, phi), block.head(params, 0, phi))
    obs = inp.R == 1
    mse = float(np.mean((pred[obs] - inp.Y[obs]) ** 2))
    blk = abs(loss - mse)

    ok = max(ipw, msm, blk) < 1e-8
    report(6, "reduction lattice", ok, f"ipw={ipw:.1e} msm={msm:.1e} block={blk:.1e}")
    assert ok


SYNTH = {"style": "binarymix", "n": 2570, "T": 3, "gamma": 0.15, "C2": 2.0, "trials": 20}


@pytest.mark.slow
def test_c07_method_ordering(report, tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig({**SYNTH, "methods": ["naive-or", "seqmsm", "balancenet"], "lambda1": 1.0, "lambda2": 1.0})
    records = read_records(run_experiment(cfg, tmp_path))
    elapsed = time.perf_counter() - start
    (nor, k0), (msm, k1), (bal, k2) = (_means(records, m) for m in ("naive-or", "seqmsm", "balancenet"))
    ok = bal < nor and msm < nor and elapsed < 900 and k0 == k1 == k2 == 20
    report(7, "method ordering", ok,
           f"naive-or={nor:.3f} seqmsm={msm:.3f} balancenet={bal:.3f} {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c08_lambda_robustness(report, tmp_path):
    cfg = ExperimentConfig({**SYNTH, "methods": ["balancenet"], "sweep_axis": "lambda",
                            "sweep_values": [0.2, 1.0, 5.0]})
    records = read_records(run_experiment(cfg, tmp_path))
    means = [_means(records, "balancenet", v)[0] for v in (0.2, 1.0, 5.0)]
    spread = (max(means) - min(means)) / np.mean(means)
    ok = spread < 0.2
    report(8, "lambda robustness", ok, " ".join(f"{m:.3f}" for m in means) + f" spread={spread:.1%}")
    assert ok


def test_c09_metric_and_t_oracles(report):
    cate = eps_cate(np.array([3.0, 4.0]), np.zeros(2))
    base = np.linspace(-1, 1, 10)
    base = base / base.std(ddof=1) + 2.262 / math.sqrt(10)
    res = paired_t_test(base, np.zeros(10))
    ok = abs(cate - math.sqrt(12.5)) < 1e-12 and res.df == 9 and abs(res.p - 0.050) <= 0.001
    report(9, "metric and t-test oracles", ok, f"eps_cate={cate:.6f} p={res.p:.4f}")
    assert ok


def test_c10_determinism(report, tmp_path):
    cfg = ExperimentConfig({"style": "binarymix", "n": 300, "p": 5, "trials": 3, "tau_x_draws": 20,
                            "sweep_axis": "gamma", "sweep_values": [0.1, 0.2],
                            "hidden": [8], "max_epochs": 40, "balance_max_epochs": 40, "d_rep": 8})
    a = run_experiment(cfg, tmp_path / "a").read_bytes()
    b = run_experiment(cfg, tmp_path / "b").read_bytes()
    c = run_experiment(cfg, tmp_path / "c", jobs=2).read_bytes()
    ok = a == b == c and len(a) > 0
    report(10, "determinism", ok, f"{len(a)} bytes, serial x2 and --jobs 2 identical={ok}")
    assert ok
