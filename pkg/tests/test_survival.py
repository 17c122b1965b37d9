import numpy as np
import pytest
from scipy import stats

from oracles import concordance, km_product_limit
from riskscreen.cohort import SurvivalObservation
from riskscreen.ehr import Sex
from riskscreen.errors import (ConvergenceError, NotFittedError, RankDeficientError,
                               UndefinedStatisticError)
from riskscreen.survival import (AFTModel, FitTrace, aft_diagnostics, aft_loglik, aft_survival,
                                 aic, concordance_index, fit_aft, fit_aft_weibull,
                                 fit_kaplan_meier, kaplan_meier, km_survival_at, read_km_csv,
                                 write_km_csv)
from riskscreen.synth import simulate_aft_observations


def obs(times, events, sex=None, X=None):
    out = []
    for k, (t, e) in enumerate(zip(times, events)):
        out.append(SurvivalObservation(float(t), int(e), None if X is None else tuple(X[k]),
                                       sex=None if sex is None else Sex(int(sex[k]))))
    return out


# --- Kaplan-Meier -------------------------------------------------------------------------


def test_km_hand_example():
    c = fit_kaplan_meier(obs([2, 3, 4], [1, 0, 1]))
    assert list(c.times) == [2, 4]
    assert c.survival[0] == pytest.approx(2 / 3, abs=1e-15) and c.survival[1] == 0
    assert km_survival_at(c, 0) == 1.0
    assert km_survival_at(c, 3.5) == pytest.approx(2 / 3, abs=1e-15)
    assert km_survival_at(c, 2.0) == c.survival[0]  # right-continuous
    assert km_survival_at(c, 1.999) == 1.0
    assert km_survival_at(c, 100) == 0.0


def test_km_all_censored():
    c = fit_kaplan_meier(obs([1, 2, 5], [0, 0, 0]))
    assert c.times.size == 0
    assert np.all(km_survival_at(c, np.array([0, 1, 3, 10])) == 1.0)


def test_km_empty_cohort():
    with pytest.raises(ValueError):
        fit_kaplan_meier(obs([1, 2], [1, 0], sex=[0, 0]), "Male")


def test_km_self_consistency():
    rng = np.random.default_rng(0)
    t = rng.integers(1, 40, 500).astype(float)
    e = rng.random(500) < 0.6
    c = kaplan_meier(t, e)
    s, rebuilt = 1.0, []
    for d, n in zip(c.events, c.at_risk):
        s *= 1 - d / n
        rebuilt.append(s)
    assert np.max(np.abs(np.array(rebuilt) - c.survival)) <= 1e-15
    assert np.all(np.diff(c.survival) <= 0)


def test_km_left_truncation_matches_risk_set_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        n = int(rng.integers(2, 12))
        entry = rng.integers(0, 5, n).astype(float)
        time = entry + rng.integers(1, 6, n)
        event = (rng.random(n) < 0.6).astype(int)
        c = kaplan_meier(time, event, entry)
        s = 1.0
        for tj, sj in zip(c.times, c.survival):
            at_risk = np.sum((entry < tj) & (time >= tj))
            d = np.sum((time == tj) & (event == 1))
            s *= 1 - d / at_risk
            assert sj == pytest.approx(s, abs=1e-15)


def test_km_male_below_female():
    rng = np.random.default_rng(2)
    n = 20_000
    male = rng.random(n) < 0.5
    t = 70 * rng.weibull(4, n) * np.exp(-0.3 * male)  # males age faster
    c = rng.uniform(30, 100, n)
    o = obs(np.minimum(t, c), t <= c, sex=male)
    m, f = fit_kaplan_meier(o, "Male"), fit_kaplan_meier(o, "Female")
    grid = np.linspace(20, min(m.times.max(), f.times.max()), 200)
    assert np.all(km_survival_at(m, grid) <= km_survival_at(f, grid) + 1e-12)


def test_km_csv_round_trip(tmp_path):
    o = obs([2, 3, 4, 7], [1, 0, 1, 1], sex=[1, 0, 1, 0])
    curves = [fit_kaplan_meier(o, c) for c in ("All", "Male", "Female")]
    write_km_csv(curves, tmp_path / "km.csv")
    back = read_km_csv(tmp_path / "km.csv")
    for c in curves:
        assert np.array_equal(back[c.cohort].survival, c.survival)
        assert np.array_equal(back[c.cohort].times, c.times)


# --- AFT ----------------------------------------------------------------------------------


def test_aft_survival_closed_form_cases():
    m = AFTModel(1.0, 1.0, np.zeros(2), ["a", "b"])
    t = np.array([0.0, 0.5, 1.0, 3.0])
    assert np.allclose(aft_survival(m, t, [0.3, -2.0]), np.exp(-t), rtol=0, atol=1e-15)
    assert aft_survival(AFTModel(3.0, 2.0, np.array([1.0]), ["a"]), 0.0, [5.0]) == 1.0
    with pytest.raises(ValueError):
        aft_survival(m, 1.0, [1.0])
    with pytest.raises(NotFittedError):
        aft_survival(None, 1.0, [1.0])


def test_aft_monotone_in_positive_covariate():
    m = AFTModel(60.0, 3.0, np.array([0.4, -0.2]), ["a", "b"])
    xs = np.column_stack([np.linspace(-2, 2, 9), np.zeros(9)])
    s = aft_survival(m, 50.0, xs)
    assert np.all(np.diff(s) < 0)


def test_intercept_only_matches_weibull_mle():
    rng = np.random.default_rng(1)
    t = 40 * rng.weibull(2.5, 800)
    m = fit_aft(t, np.ones_like(t))
    shape, _, scale = stats.weibull_min.fit(t, floc=0)
    assert m.scale == pytest.approx(scale, rel=1e-6)
    assert m.shape == pytest.approx(shape, rel=1e-6)


def test_loglik_gradient_and_hessian_by_finite_differences():
    t, e, X = simulate_aft_observations(400, 30.0, 2.0, [0.5, -0.3], seed=3)
    entry = np.where(np.arange(400) % 3 == 0, 0.3 * t, 0.0)
    rng = np.random.default_rng(9)
    h = 1e-5
    for family in ("weibull", "loglogistic"):
        for _ in range(5):
            theta = np.array([np.log(30), np.log(2), 0.5, -0.3]) + rng.normal(0, 0.2, 4)
            ll, g, H = aft_loglik(theta, t, e, X, family, entry)
            fd_g = np.array([(aft_loglik(theta + h * u, t, e, X, family, entry, 0)[0]
                              - aft_loglik(theta - h * u, t, e, X, family, entry, 0)[0]) / (2 * h)
                             for u in np.eye(4)])
            fd_H = np.array([(aft_loglik(theta + h * u, t, e, X, family, entry, 1)[1]
                              - aft_loglik(theta - h * u, t, e, X, family, entry, 1)[1]) / (2 * h)
                             for u in np.eye(4)])
            assert np.max(np.abs(fd_g - g)) <= 1e-4 * max(1.0, np.max(np.abs(g)))
            assert np.max(np.abs(fd_H - H)) <= 1e-4 * np.max(np.abs(H))


def test_likelihood_never_decreases():
    t, e, X = simulate_aft_observations(2000, 50.0, 3.0, [0.4, 0.0, -0.6], seed=5)
    trace = FitTrace()
    fit_aft(t, e, X, trace=trace)
    assert len(trace.loglik) > 2
    assert np.all(np.diff(trace.loglik) >= 0)
    assert trace.grad_norm[-1] < trace.grad_norm[0]


def test_loglogistic_recovery():
    beta = np.array([0.5, -0.25])
    t, e, X = simulate_aft_observations(4000, 20.0, 3.0, beta, seed=8, family="loglogistic")
    m = fit_aft(t, e, X, family="loglogistic")
    se = np.array([m.diagnostics["se"][n] for n in m.covariate_names])
    assert np.all(np.abs(m.coefficients - beta) < 3 * se)
    assert m.scale == pytest.approx(20.0, rel=0.05) and m.shape == pytest.approx(3.0, rel=0.05)


def test_rank_deficient_names_columns():
    t, e, X = simulate_aft_observations(200, 10.0, 1.5, [0.2, 0.1], seed=0)
    X = np.column_stack([X, X[:, 0] * 2 + X[:, 1]])
    with pytest.raises(RankDeficientError) as exc:
        fit_aft(t, e, X, ["a", "b", "c"])
    assert exc.value.columns == ["c"]


def test_separation_never_returns_nan():
    rng = np.random.default_rng(0)
    x = (np.arange(300) % 2).astype(float)
    t = rng.uniform(1, 10, 300)
    e = (x == 1).astype(float)  # no events where x == 0
    try:
        m = fit_aft(t, e, x[:, None], max_iter=200)
    except ConvergenceError as exc:
        assert exc.params is not None and np.isfinite(exc.grad_norm)
    else:
        assert np.all(np.isfinite(m.coefficients)) and np.isfinite(m.scale)


def test_single_binary_covariate_needs_events():
    with pytest.raises(ValueError):
        fit_aft([1.0, 2.0], [0, 0])


def test_null_coefficient_calibration():
    """A covariate with no effect is significant at the 0.005 level in about 0.5% of fits."""
    rejections = 0
    for seed in range(100):
        t, e, X = simulate_aft_observations(500, 30.0, 2.0, [0.5, 0.0], seed=seed)
        m = fit_aft(t, e, X, ["x", "null"])
        rejections += abs(m.diagnostics["z"]["null"]) >= 2.81
    assert rejections <= 5


def test_standard_errors_are_calibrated():
    """(beta_hat - beta) / SE behaves like N(0, 1) across 300 independent n=5,000 samples."""
    beta = np.array([0.5, -0.3, 0.2, 0.0, -0.6])
    Z = []
    for seed in range(100, 400):
        t, e, X = simulate_aft_observations(5000, 40.0, 2.5, beta, censor_fraction=0.3,
                                            seed=seed)
        m = fit_aft(t, e, X)
        Z.append((m.coefficients - beta) / [m.diagnostics["se"][n] for n in m.covariate_names])
    Z = np.array(Z)
    # the SD of a sample SD from 300 normal draws is about 0.04
    assert np.all(np.abs(Z.std(axis=0) - 1) < 0.15)
    assert np.all(np.abs(Z.mean(axis=0)) < 0.2)
    assert np.mean(np.all(np.abs(Z) <= 3, axis=1)) >= 0.97


def test_diagnostics_intercept_only_and_aic(tmp_path):
    t, e, _ = simulate_aft_observations(300, 30.0, 2.0, [], seed=2)
    o = obs(t, e, X=np.zeros((300, 0)))
    m = fit_aft_weibull(o)
    d = aft_diagnostics(m, o)
    assert d["lr_statistic"] == 0
    assert d["aic"] == aic(2, d["log_likelihood"])
    assert aic(8, -2348.82) == pytest.approx(4713.64, abs=1e-9)


def test_diagnostics_with_covariates(tmp_path):
    t, e, X = simulate_aft_observations(1500, 30.0, 2.0, [0.6, -0.4], seed=4)
    o = obs(t, e, X=X)
    m = fit_aft_weibull(o, ["a", "b"])
    d = aft_diagnostics(m, o[:1000], o[1000:])
    assert d["lr_statistic"] > 0 and d["lr_p_value"] < 1e-6
    assert 0.5 < d["c_index"] <= 1
    assert all(p < 0.005 for p in d["p_value"].values())
    m.save(tmp_path / "m.json")
    back = AFTModel.load(tmp_path / "m.json")
    x = X[:20]
    assert np.array_equal(aft_survival(back, t[:20], x), aft_survival(m, t[:20], x))


def test_km_agrees_with_aft_on_weibull_data():
    t, e, _ = simulate_aft_observations(10_000, 50.0, 3.0, [], seed=6)
    km = kaplan_meier(t, e)
    m = fit_aft(t, e)
    grid = km.times
    gap = np.max(np.abs(km_survival_at(km, grid) - aft_survival(m, grid, np.zeros((len(grid), 0)))))
    assert gap < 0.03


# --- concordance --------------------------------------------------------------------------


def test_concordance_perfect_and_reversed():
    t = np.arange(1.0, 7.0)
    e = np.ones(6)
    assert concordance_index(-t, t, e) == 1.0
    assert concordance_index(t, t, e) == 0.0
    assert concordance_index(np.zeros(6), t, e) == 0.5


def test_concordance_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = rng.integers(1, 5, 6).astype(float)
        e = (rng.random(6) < 0.6).astype(int)
        r = rng.integers(0, 3, 6).astype(float)
        want = concordance(list(r), list(t), list(e))
        if want is None:
            with pytest.raises(UndefinedStatisticError):
                concordance_index(r, t, e)
        else:
            assert concordance_index(r, t, e) == pytest.approx(float(want), abs=1e-15)


def test_concordance_no_pairs():
    with pytest.raises(UndefinedStatisticError):
        concordance_index([1, 2], [1, 2], [0, 0])
