"""Data-generating processes, closed-form oracles, censoring and amputation."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from riaftbart.simulate import (AmputationPlan, DgpConfig, ampute, assign_treatment,
                                expected_log_time, gen_covariates, q_functions,
                                simulate, solve_censoring_rate, true_iste_oracle,
                                weibull_rmst, weibull_shape, weibull_survival)


def _weibull(c, eta):
    # T = (-log U / c)^(1/eta), so S(t) = exp(-c t^eta)
    return stats.weibull_min(eta, scale=c ** (-1.0 / eta))


@pytest.mark.parametrize("hazard", ["PH", "nPH"])
@pytest.mark.parametrize("setting", ["a", "b", "c"])
def test_closed_forms_match_numerical_integration(hazard, setting):
    cfg = DgpConfig(K=2, n_k=3, setting=setting, hazard=hazard)
    X = gen_covariates(cfg, np.random.default_rng(1))
    b_row = np.array([0.3, 0.3, 0.3, -1.0, -1.0, -1.0])
    c = np.asarray(cfg.lam) * np.exp(q_functions(X, b_row, cfg))
    eta = weibull_shape(X, cfg)
    t = 21 / 365
    elog, surv, rmst = (expected_log_time(X, b_row, cfg), weibull_survival(t, X, b_row, cfg),
                        weibull_rmst(t, X, b_row, cfg))
    for i in range(X.shape[0]):
        for j in range(3):
            w = _weibull(c[i, j], eta[i])
            assert elog[i, j] == pytest.approx(w.expect(np.log), rel=1e-6, abs=1e-8)
            assert surv[i, j] == pytest.approx(w.sf(t), rel=1e-10)
            ref = integrate.quad(w.sf, 0, t, epsabs=1e-13, epsrel=1e-11)[0]
            assert rmst[i, j] == pytest.approx(ref, rel=1e-7)


def test_counterfactual_consistency(het_small):
    _, ds, truth = het_small
    np.testing.assert_array_equal(truth.T, truth.T_all[np.arange(ds.n), ds.a - 1])
    obs = ds.delta == 1
    np.testing.assert_array_equal(ds.y[obs], truth.T[obs])
    assert np.all(ds.y[~obs] < truth.T[~obs])


def test_monte_carlo_log_time_mean():
    cfg = DgpConfig(K=1, n_k=1, hazard="nPH")
    X = np.tile(gen_covariates(cfg, np.random.default_rng(2)), (200_000, 1))
    from riaftbart.simulate import gen_survival_times
    T = gen_survival_times(X, np.ones(len(X), int), np.zeros(len(X)), cfg, np.random.default_rng(3))
    assert np.log(T).mean() == pytest.approx(expected_log_time(X[:1], np.zeros(1), cfg)[0, 0],
                                             abs=0.01)
    t = np.median(T)
    assert weibull_survival(t, X[:1], np.zeros(1), cfg)[0, 0] == pytest.approx(np.mean(T > t), abs=0.005)


def test_iste_oracle_antisymmetry_and_scales(het_small):
    cfg, ds, truth = het_small
    b_row = truth.b_row(ds.cluster)
    for scale, t in (("log", None), ("surv", 0.1), ("rmst", 0.1)):
        z12 = true_iste_oracle(ds.X, b_row, cfg, (1, 2), scale=scale, t=t)
        np.testing.assert_allclose(true_iste_oracle(ds.X, b_row, cfg, (2, 1), scale, t), -z12)
        np.testing.assert_array_equal(true_iste_oracle(ds.X, b_row, cfg, (2, 2), scale, t), 0.0)
    # on the log scale the intercept cancels under PH
    np.testing.assert_allclose(true_iste_oracle(ds.X, b_row, cfg, (1, 3)),
                               true_iste_oracle(ds.X, b_row + 2.0, cfg, (1, 3)), atol=1e-12)
    with pytest.raises(ValueError):
        true_iste_oracle(ds.X, b_row, cfg, (1, 2), scale="hazard")


def test_arm_shares_near_five_three_one():
    # target arm ratio 5:3:1
    cfg = DgpConfig(K=10, n_k=2000)
    g = np.random.default_rng(0)
    X = gen_covariates(cfg, g)
    a, gps, _ = assign_treatment(X, np.repeat(np.arange(1, 11), 2000), cfg, g)
    share = np.bincount(a, minlength=4)[1:] / a.size
    np.testing.assert_allclose(share, [5 / 9, 3 / 9, 1 / 9], atol=0.03)
    np.testing.assert_allclose(gps.sum(axis=1), 1.0)


def test_varselect_covariates():
    cfg = DgpConfig(K=10, n_k=500, mode="varselect")
    ds, truth = simulate(cfg, seed=1)
    assert ds.L == 28 and ds.a is None and truth.gps is None
    X = ds.X
    assert set(np.unique(X[:, 0])) == {0, 1} and set(np.unique(X[:, 27])) == {0, 1}
    assert X[:, 0].mean() == pytest.approx(0.5, abs=0.03)
    # x5 | x2, x3 ~ N(0.3 x2 - 0.2 x3, 1)
    beta = np.linalg.lstsq(np.column_stack([np.ones(ds.n), X[:, 1], X[:, 2]]), X[:, 4], rcond=None)[0]
    np.testing.assert_allclose(beta, [0, 0.3, -0.2], atol=0.06)


@pytest.mark.parametrize("mode", ["heterogeneity", "varselect"])
@pytest.mark.parametrize("hazard", ["PH", "nPH"])
def test_censoring_hits_half(mode, hazard):
    ds, truth = simulate(DgpConfig(mode=mode, hazard=hazard), seed=3)
    assert abs(1 - ds.delta.mean() - 0.5) <= 0.02
    assert truth.censor_rate > 0


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 300), target=st.floats(0.05, 0.95), seed=st.integers(0, 2**32 - 1))
def test_censoring_solver_is_minimal(n, target, seed):
    g = np.random.default_rng(seed)
    T = g.weibull(1.5, n)
    rate, y, delta = solve_censoring_rate(T, target, g)
    frac = 1 - delta.mean()
    assert frac >= target - 1e-12
    assert frac - target < 1.0 / n + 1e-12
    np.testing.assert_array_equal(y, np.minimum(T, y))


def test_censoring_solver_rejects_bad_target():
    with pytest.raises(ValueError):
        solve_censoring_rate(np.ones(5), 1.0, np.random.default_rng(0))


def test_simulate_is_deterministic():
    cfg = DgpConfig(K=3, n_k=20, seed=4)
    a, ta = simulate(cfg)
    b, tb = simulate(cfg)
    assert a.equals(b) and np.array_equal(ta.T_all, tb.T_all)
    assert not a.equals(simulate(cfg, seed=5)[0])


def test_no_censoring_option():
    ds, truth = simulate(DgpConfig(K=2, n_k=10, censoring=0.0), seed=1)
    assert ds.delta.all() and truth.censor_rate is None


def test_config_validation():
    with pytest.raises(ValueError):
        DgpConfig(mode="other")
    assert DgpConfig.from_dict({"K": 3, "junk": 1}).K == 3
    assert DgpConfig().n == 2000 and DgpConfig().J == 3 and DgpConfig(mode="varselect").J == 1


# ---------------------------------------------------------------- amputation
def test_amputation_default_plan_rates():
    ds, _ = simulate(DgpConfig(mode="varselect"), seed=2)
    out, groups = ampute(ds, rng=np.random.default_rng(2), return_groups=True)
    m = out.mask
    assert m.any(axis=1).mean() == pytest.approx(0.40, abs=0.03)
    assert not m[:, :4].any() and not m[:, 8:].any()
    np.testing.assert_allclose(m[:, 4:8].mean(axis=0), [0.15, 0.17, 0.14, 0.11], atol=0.04)
    # group sizes follow the planned shares exactly (largest remainder)
    np.testing.assert_array_equal(np.bincount(groups), [600, 180, 180, 160, 160, 320, 200, 200])
    np.testing.assert_array_equal(out.y, ds.y)
    np.testing.assert_array_equal(out.X[~m], ds.X[~m])


def test_amputation_is_mar_within_subsample():
    """Missingness in subsample 1 rises with its score (right tail)."""
    ds, _ = simulate(DgpConfig(mode="varselect", K=10, n_k=1000), seed=6)
    out, groups = ampute(ds, rng=np.random.default_rng(1), return_groups=True)
    rows = groups == 0
    x3, x4 = ds.X[rows, 2], ds.X[rows, 3]
    score = x3 + x4 + x3 * x4
    miss = out.mask[rows, 4]
    hi = score > np.median(score)
    assert miss[hi].mean() > miss[~hi].mean() + 0.2


def test_amputation_plan_checks_and_roundtrip():
    plan = AmputationPlan()
    assert AmputationPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ValueError, match="sum to 1"):
        AmputationPlan(proportions=(0.5, 0.4) + (0.0,) * 6)
    with pytest.raises(ValueError, match="amputated column"):
        AmputationPlan(wss=(((1, ("x5",)),),) + AmputationPlan().wss[1:])
    with pytest.raises(ValueError):
        AmputationPlan(tails=("up",) * 8)


def test_amputation_zero_rate_is_identity(vs_small):
    _, ds, _ = vs_small
    out = ampute(ds, AmputationPlan(rate=0.0), np.random.default_rng(0))
    assert out.equals(ds)
