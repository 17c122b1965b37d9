from datetime import date, timedelta

import numpy as np
import pytest
from scipy import stats

from riskscreen.cohort import (SurvivalObservation, WindowConfig, build_windows,
                               homogeneity_censored, homogeneity_multivariate, label_patient,
                               logrank_test, stratified_split, to_survival_observation, window_at)
from riskscreen.ehr import EventRecord, EventType, PatientHistory, Sex
from riskscreen.errors import UndefinedStatisticError, WindowError

DX, SVC = EventType.DIAGNOSIS, EventType.SERVICE


def history(pid, sex, birth, events):
    evs = tuple(EventRecord(pid, date.fromisoformat(d), t, c) for d, t, c in events)
    return PatientHistory(pid, sex, date.fromisoformat(birth), evs)


def test_window_anchored_on_diagnosis():
    h = history("a", Sex.FEMALE, "1973-05-27", [
        ("2019-06-01", DX, "I10"), ("2021-08-01", SVC, "A09.05.023"),
        ("2021-08-20", DX, "R10.4"), ("2021-09-13", DX, "C50.4"), ("2021-10-01", SVC, "A16.20.1"),
    ])
    w = label_patient(h)
    assert w.t_pred == date(2021, 8, 14)
    assert w.t_start == date(2019, 8, 14) and w.t_end == date(2022, 8, 14)
    assert w.target == 1
    # events before t_start and after t_pred stay out of the window
    assert [e.code for e in w.events_in_window] == ["A09.05.023"]


def test_window_without_diagnosis():
    h = history("b", Sex.MALE, "1990-01-01", [("2020-06-01", DX, "J06.9"),
                                              ("2021-12-31", DX, "I10")])
    w = label_patient(h)
    assert w.t_pred == date(2020, 12, 31) and w.target == 0
    assert [e.code for e in w.events_in_window] == ["J06.9"]


def test_only_event_is_the_diagnosis():
    h = history("c", Sex.MALE, "1990-01-01", [("2021-03-01", DX, "C18.7")])
    with pytest.raises(WindowError, match="empty observation window"):
        label_patient(h, WindowConfig(target_offset_days=0))


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(delta_obs=0)
    with pytest.raises(ValueError):
        WindowConfig(target_offset_days=-1)


def test_fixed_date_window():
    h = history("d", Sex.FEMALE, "1960-01-01", [
        ("2020-01-10", DX, "I10"), ("2021-03-01", DX, "C34.1"), ("2021-04-01", DX, "I10")])
    w = window_at(h, date(2020, 12, 31))
    assert w.target == 1 and [e.code for e in w.events_in_window] == ["I10"]
    with pytest.raises(WindowError, match="on or before"):
        window_at(h, date(2021, 3, 1))


def _age(birth, when):
    return (date.fromisoformat(when) - date.fromisoformat(birth)).days / 365.25


def test_survival_observation_event():
    h = history("a", Sex.FEMALE, "1973-05-27", [("2020-01-01", DX, "I10"),
                                                ("2021-09-13", DX, "C50.4")])
    o = to_survival_observation(h)
    assert o.event == 1
    assert o.time == _age("1973-05-27", "2021-09-13")
    assert o.time == pytest.approx(48.30, abs=0.005)


def test_survival_observation_censored():
    h = history("b", Sex.MALE, "1990-01-01", [("2020-06-01", DX, "J06.9"),
                                              ("2021-12-31", DX, "I10")])
    o = to_survival_observation(h)
    assert o.event == 0 and o.time == pytest.approx(32.00, abs=0.005)


def test_diagnosis_on_birth_date_rejected():
    h = history("c", Sex.MALE, "1990-01-01", [("1990-01-01", DX, "C91.0")])
    with pytest.raises(WindowError):
        to_survival_observation(h)
    with pytest.raises(ValueError):
        SurvivalObservation(0.0, 1)


def test_left_truncated_entry():
    h = history("a", Sex.FEMALE, "1980-01-01", [("2020-01-01", DX, "I10"),
                                                ("2021-01-01", DX, "I10")])
    o = to_survival_observation(h, left_truncate=True)
    assert o.entry == _age("1980-01-01", "2020-01-01") and o.entry < o.time
    only = history("b", Sex.FEMALE, "1980-01-01", [("2020-01-01", DX, "C50.1")])
    o = to_survival_observation(only, left_truncate=True)
    assert 0 < o.entry < o.time


def test_label_matches_survival_event(small_corpus):
    windows, excluded = build_windows(small_corpus.histories)
    assert len(windows) + len(excluded) == len(small_corpus.histories)
    for w in windows:
        o = to_survival_observation(small_corpus.histories[w.patient_id])
        assert w.target == o.event
        assert all(e.event_date <= w.t_pred for e in w.events_in_window)


# --- split --------------------------------------------------------------------------------

TABLE_III = [("survival_train", .07), ("survival_test", .07), ("train", .40),
             ("validate", .23), ("test", .23)]
TABLE_III_SIZES = {"survival_train": 12280, "survival_test": 12280, "train": 70176,
                   "validate": 40350, "test": 40355}


def test_split_table_iii_proportions():
    n = 175_441
    rng = np.random.default_rng(0)
    sex = rng.random(n) < 0.406
    age = rng.uniform(18, 90, n)
    patients = [(f"p{i}", int(s), a) for i, (s, a) in enumerate(zip(sex, age))]
    out = stratified_split(patients, TABLE_III)
    cells = {}
    for pid, s, a in patients:
        cells.setdefault((s, int(np.digitize(a, (30, 45)))), set()).add(pid)
    for name, w in TABLE_III:
        got = set(out[name])
        for members in cells.values():
            assert abs(len(got & members) - w * len(members)) < 1
        assert abs(len(got) - w * n) <= len(cells)
        assert abs(len(got) - TABLE_III_SIZES[name]) <= len(cells)
    assert sum(len(v) for v in out.values()) == n


def test_split_small_and_deterministic():
    pts = [(f"p{i}", 0, 50.0) for i in range(10)]
    out = stratified_split(pts, [("a", .5), ("b", .5)], seed=3)
    assert len(out["a"]) == len(out["b"]) == 5
    assert set(out["a"]) | set(out["b"]) == {p for p, _, _ in pts}
    assert stratified_split(pts, [("a", .5), ("b", .5)], seed=3) == out
    assert stratified_split(pts[::-1], [("a", .5), ("b", .5)], seed=3) == out


def test_split_errors():
    with pytest.raises(ValueError):
        stratified_split([], [("a", 1.0)])
    with pytest.raises(ValueError):
        stratified_split([("p", 0, 1.0)], [("a", .5), ("b", .4)])


# --- homogeneity --------------------------------------------------------------------------


def test_energy_identical_samples():
    rng = np.random.default_rng(1)
    a = np.column_stack([rng.integers(0, 2, 150), rng.normal(45, 15, 150)])
    assert homogeneity_multivariate(a, a.copy()).p_value >= 0.05


def test_energy_separated_samples():
    a = np.tile([1.0, 20.0], (200, 1))
    b = np.tile([0.0, 80.0], (200, 1))
    r = homogeneity_multivariate(a, b, n_permutations=200)
    assert r.p_value < 0.01 and 0 <= r.p_value <= 1


def test_energy_needs_two_points():
    with pytest.raises(ValueError):
        homogeneity_multivariate([[0, 1]], [[0, 1], [1, 2]])


def test_energy_calibrated_under_null():
    """Same-population draws: p-values are close to uniform."""
    rng = np.random.default_rng(7)
    ps = []
    for trial in range(200):
        draw = lambda m: np.column_stack([rng.random(m) < 0.4, rng.normal(41, 15, m)])
        ps.append(homogeneity_multivariate(draw(40), draw(60), n_permutations=99,
                                           seed=trial).p_value)
    ps = np.array(ps)
    rejections = int(np.sum(ps <= 0.05))
    assert 2 <= rejections <= 20  # binomial(200, 0.05) central band
    assert stats.kstest(ps, "uniform").pvalue > 0.001


def _logrank_loop(ta, ea, tb, eb):
    """Textbook log-rank: walk the distinct event times one by one."""
    data = [(t, e, 0) for t, e in zip(ta, ea)] + [(t, e, 1) for t, e in zip(tb, eb)]
    o_minus_e, var = 0.0, 0.0
    for t in sorted({t for t, e, _ in data if e}):
        risk = [(u, e, g) for u, e, g in data if u >= t]
        n, na = len(risk), sum(1 for r in risk if r[2] == 0)
        d = sum(1 for u, e, _ in risk if u == t and e)
        da = sum(1 for u, e, g in risk if u == t and e and g == 0)
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    return o_minus_e ** 2 / var


def test_logrank_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ta, tb = rng.integers(1, 15, 12).astype(float), rng.integers(1, 15, 9).astype(float)
        ea, eb = rng.random(12) < 0.7, rng.random(9) < 0.7
        ea[0] = eb[0] = True
        chi2, p = logrank_test(ta, ea, tb, eb)
        assert chi2 == pytest.approx(_logrank_loop(ta, ea, tb, eb), rel=1e-12)
        assert p == pytest.approx(stats.chi2.sf(chi2, 1), rel=1e-12)


def _obs(times, events):
    return [SurvivalObservation(float(t), int(e)) for t, e in zip(times, events)]


def test_logrank_identical_and_separated():
    rng = np.random.default_rng(5)
    t = rng.exponential(10, 250)
    e = rng.random(250) < 0.8
    assert homogeneity_censored(_obs(t, e), _obs(t, e)).p_value >= 0.05
    t_fast = rng.exponential(2, 250)  # hazard five times higher
    assert homogeneity_censored(_obs(t, e), _obs(t_fast, e)).p_value < 0.01


def test_logrank_all_censored():
    with pytest.raises(UndefinedStatisticError):
        homogeneity_censored(_obs([1, 2], [1, 0]), _obs([1, 2], [0, 0]))
