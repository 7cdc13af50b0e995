import math

import numpy as np
import pytest

from ltce.dataset import LongTermDataset, validate_monotone
from ltce.dgp import (
    DgpConfig,
    DgpDraw,
    Style,
    apply_missing,
    apply_soft_missing,
    derive_seed,
    gen_covariates,
    gen_outcomes_binarymix,
    gen_outcomes_continuous,
    gen_treatment,
    missing_counts,
    sample_draw,
    simulate,
    splitmix64,
    true_effects,
)


def test_covariates_deterministic():
    assert np.array_equal(gen_covariates(3, 2, 7), gen_covariates(3, 2, 7))


def test_covariate_blocks_moments():
    X = gen_covariates(100_000, 4, 11)
    assert np.all(np.abs(X[:, 2:].mean(axis=0) - 0.5) < 0.01)
    assert set(np.unique(X[:, 2:])) == {0.0, 1.0}
    assert np.all(np.abs(X[:, :2].var(axis=0) - 1.0) < 0.05)


def test_treatment_theta_zero_is_balanced():
    X = gen_covariates(100_000, 3, 1)
    A = gen_treatment(X, np.zeros(3), 2)
    assert abs(A.mean() - 0.5) < 0.01
    assert np.array_equal(A, gen_treatment(X, np.zeros(3), 2))


def test_treatment_probability_increases_with_index():
    X = np.repeat(np.array([[-3.0], [0.0], [3.0]]), 20_000, axis=0)
    A = gen_treatment(X, np.array([1.0]), 4)
    rates = A.reshape(3, -1).mean(axis=1)
    assert rates[0] < rates[1] < rates[2]
    assert abs(rates[2] - 1 / (1 + math.exp(-3))) < 0.01


def test_draw_supports():
    d = sample_draw(2000, 3)
    assert np.all(np.abs(d.w0) <= 1.0)
    assert set(np.unique(d.beta0)) <= {0.0, 1.0, 2.0, 3.0, 4.0}
    assert np.all((d.beta1 >= 0) & (d.beta1 <= 16.0))
    # beta0 frequencies follow (.5, .2, .15, .1, .05)
    freq = np.bincount(d.beta0.astype(int), minlength=5) / 2000
    assert np.allclose(freq, [0.5, 0.2, 0.15, 0.1, 0.05], atol=0.04)


def test_splitmix_reference_values():
    # first outputs of SplitMix64 seeded with 0 (state advanced before mixing)
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seeds = {derive_seed(5, s, t) for s in range(10) for t in range(100)}
    assert len(seeds) == 1000


# --------------------------------------------------------------- outcomes

def _cfg(style, **kw):
    return DgpConfig(style=style, tau_x_draws=kw.pop("tau_x_draws", 50), **kw)


def test_continuous_c1_zero_decouples_history():
    cfg = _cfg("continuous", n=100_000, p=3, C1=0.0, tau_x_draws=1)
    X = gen_covariates(cfg.n, cfg.p, 0)
    draw = sample_draw(cfg.p, 1)
    A = np.ones(cfg.n, dtype=int)
    _, gt = gen_outcomes_continuous(X, A, draw, cfg, seed=2)
    resid = gt.Y_pot[:, 1] - (X @ draw.beta1 + 2.0)
    s1 = gt.S_pot[:, 0, 1]
    assert abs(np.cov(resid, s1)[0, 1]) < 0.01


def test_continuous_long_term_innovation_variance():
    # arm-1 innovation is N(0, sd=0.5) so its variance is 0.25
    cfg = _cfg("continuous", n=100_000, p=3, tau_x_draws=1)
    X = gen_covariates(cfg.n, cfg.p, 0)
    draw = sample_draw(cfg.p, 1)
    _, gt = gen_outcomes_continuous(X, np.ones(cfg.n, dtype=int), draw, cfg, seed=2)
    S = gt.S_pot[:, :, 1]
    innov = gt.Y_pot[:, 1] - (X @ draw.beta1 + 2.0) - cfg.C1 * S.sum(axis=1)
    assert abs(innov.var() - 0.25) < 0.01


def test_continuous_closed_form_tau_x_for_two_stages():
    # T = 2: E[Y(a)|x] = beta_a x + 2a + C1 * E[sigmoid(w_a x + eps_a)]
    cfg = _cfg("continuous", n=40, p=2, T=2, tau_x_draws=4000)
    X = gen_covariates(cfg.n, cfg.p, 3)
    draw = sample_draw(cfg.p, 4)
    A = np.zeros(cfg.n, dtype=int)
    _, gt = gen_outcomes_continuous(X, A, draw, cfg, seed=5)
    z = np.random.default_rng(99).standard_normal(400_000)

    def q(w, mu, x):
        return np.mean(1 / (1 + np.exp(-(x @ w + mu + z))))

    for i in range(5):
        m0 = X[i] @ draw.beta0 + cfg.C1 * q(draw.w0, cfg.mu0, X[i])
        m1 = X[i] @ draw.beta1 + 2.0 + cfg.C1 * q(draw.w1, cfg.mu1, X[i])
        assert abs(gt.tau_x[i] - (m1 - m0)) < 0.05


def test_binarymix_symmetric_arms_have_zero_effect():
    p = 3
    cfg = _cfg("binarymix", n=100_000, p=p, C2=0.0, mu0=0.0, mu1=0.0, tau_x_draws=1)
    w = np.full(p, 0.3)
    beta = np.array([1.0, 0.0, 2.0])
    draw = DgpDraw(w0=w, w1=w, beta0=beta, beta1=beta, theta=np.zeros(p))
    X = gen_covariates(cfg.n, p, 0)
    _, gt = gen_outcomes_binarymix(X, np.zeros(cfg.n, dtype=int), draw, cfg, seed=1)
    assert abs(gt.tau) < 0.02


def test_binarymix_clamp_never_fails():
    cfg = _cfg("binarymix", n=1_000_000, p=2, C2=2.0, tau_x_draws=1)
    X = gen_covariates(cfg.n, cfg.p, 0)
    draw = sample_draw(cfg.p, 1)
    ds, gt = gen_outcomes_binarymix(X, gen_treatment(X, draw.theta, 2), draw, cfg, seed=3)
    assert np.all(np.isfinite(gt.Y_pot)) and np.all(np.isfinite(gt.S_pot))


def test_style_guard():
    cfg = _cfg("binarymix", n=5, p=2)
    with pytest.raises(ValueError):
        gen_outcomes_continuous(np.zeros((5, 2)), np.zeros(5, dtype=int), sample_draw(2, 0), cfg)


def test_same_seed_same_truth():
    cfg = _cfg("binarymix", n=200, p=4, seed=9)
    a, b = simulate(cfg), simulate(cfg)
    assert a.data.equals(b.data)
    assert np.array_equal(a.truth.tau_x, b.truth.tau_x)
    assert np.array_equal(a.truth.Y_pot, b.truth.Y_pot)


def test_observed_values_follow_consistency():
    sim = simulate(_cfg("continuous", n=300, p=4, seed=1))
    ds, gt = sim.data, sim.truth
    S, Y = gt.factual(ds.A)
    obs = ds.R == 1
    assert np.array_equal(ds.outcomes[obs], np.column_stack([S, Y])[obs])


def test_true_effects_examples():
    from ltce.dataset import GroundTruth

    gt = GroundTruth(np.zeros((2, 1, 2)), np.array([[0.0, 1.0], [2.0, 4.0]]), np.zeros(2))
    assert true_effects(gt)[0] == 1.5


def test_tau_matches_mean_tau_x():
    sim = simulate(_cfg("continuous", n=10_000, p=5, seed=4, tau_x_draws=200))
    ite = sim.truth.ite
    se = ite.std(ddof=1) / math.sqrt(len(ite))
    assert abs(sim.truth.tau - sim.truth.tau_x.mean()) <= 3 * se


# ---------------------------------------------------------------- missing

def _full(n, T=3, seed=0):
    cfg = _cfg("continuous", n=n, p=3, T=T, tau_x_draws=1)
    X = gen_covariates(n, 3, seed)
    draw = sample_draw(3, seed + 1)
    ds, _ = gen_outcomes_continuous(X, gen_treatment(X, draw.theta, seed), draw, cfg, seed=seed)
    return ds


def test_missing_counts_example():
    assert missing_counts(100, 0.1, 3) == [10, 9, 8]
    ds = apply_missing(_full(100), 0.1, 0)
    assert ds.R.sum(axis=0).tolist() == [90, 81, 73]


def test_gamma_zero_keeps_everything():
    ds = apply_missing(_full(50), 0.0, 0)
    assert np.all(ds.R == 1)


def test_gamma_one_rejected():
    with pytest.raises(ValueError):
        apply_missing(_full(10), 1.0, 0)


def test_dropped_units_have_lowest_scores():
    full = _full(500)
    ds = apply_missing(full, 0.2, 3)
    for t in range(2, 4):
        at_risk = ds.R[:, t - 2] == 1
        score = full.outcomes[:, : t - 1].sum(axis=1) + full.X.sum(axis=1)
        dropped = at_risk & (ds.R[:, t - 1] == 0)
        kept = ds.R[:, t - 1] == 1
        assert score[dropped].max() <= score[kept].min()


def test_soft_missing_factors_match_frequencies():
    full = _full(200_000, seed=2)
    ds, fac = apply_soft_missing(full, 0.2, 5)
    assert validate_monotone(ds.R) is None
    assert abs(ds.R[:, 0].mean() - 0.8) < 0.005
    at_risk = ds.R[:, 0] == 1
    assert abs(ds.R[at_risk, 1].mean() - np.nanmean(fac[at_risk, 1])) < 0.005
    assert np.all(fac[~np.isnan(fac)] >= 1 - 2 * 0.2)


def test_soft_missing_needs_small_gamma():
    with pytest.raises(ValueError):
        DgpConfig(missing="soft", gamma=0.5)


def test_simulation_manifest_records_sd_reading():
    sim = simulate(_cfg("binarymix", n=30, p=3))
    m = sim.manifest()
    assert m["normal_second_parameter"] == "standard deviation"
    assert m["config"]["style"] == "binarymix"
    assert len(m["draw"]["beta1"]) == 3


def test_style_defaults():
    c = DgpConfig(style=Style.BINARYMIX)
    assert (c.n, c.p, c.mu0, c.mu1) == (2570, 17, 0.0, 2.0)
    c = DgpConfig()
    assert (c.n, c.p, c.mu0, c.mu1) == (747, 25, 1.0, 3.0)


def test_covariate_override_resizes():
    X = np.random.default_rng(0).normal(size=(40, 6))
    sim = simulate(_cfg("continuous", n=5, p=2), X=X)
    assert sim.data.n == 40 and sim.data.p == 6
    assert isinstance(sim.data, LongTermDataset)
