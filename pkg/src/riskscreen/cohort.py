"""Labeled observation/prediction windows, survival observations, stratified splits
and split-homogeneity tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np
from dateutil.relativedelta import relativedelta
from scipy import stats
from scipy.spatial.distance import cdist

from .ehr import EventRecord, IcdBlock, PatientHistory, Sex, age_years
from .errors import UndefinedStatisticError, WindowError

TARGET_BLOCK = IcdBlock("C00-C97", "C00", "C97")
DEFAULT_AGE_EDGES = (30.0, 45.0)


@dataclass(frozen=True)
class WindowConfig:
    delta_obs: int = 24  # months of history visible to the model
    delta_pred: int = 12  # months of prediction horizon
    target_offset_days: int = 30
    target_block: IcdBlock = TARGET_BLOCK

    def __post_init__(self):
        if self.delta_obs <= 0 or self.delta_pred <= 0:
            raise ValueError("window lengths must be positive")
        if self.target_offset_days < 0:
            raise ValueError("target_offset_days must be >= 0")


@dataclass(frozen=True)
class LabeledWindow:
    patient_id: str
    sex: Sex
    birth_date: date
    t_start: date
    t_pred: date
    t_end: date
    target: int
    age_at_pred: float
    events_in_window: tuple[EventRecord, ...]


@dataclass(frozen=True)
class SurvivalObservation:
    time: float
    event: int
    covariates: tuple[float, ...] | None = None
    patient_id: str | None = None
    sex: Sex | None = None
    entry: float = 0.0  # age at entry under observation (left truncation); 0 = none

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError("event must be 0 or 1")


def first_target_date(history: PatientHistory, block: IcdBlock = TARGET_BLOCK) -> date | None:
    for ev in history.events:
        if ev.is_diagnosis and ev.code in block:
            return ev.event_date
    return None


def _window_events(history, t_start, t_pred, t_target):
    return tuple(
        ev for ev in history.events
        if t_start <= ev.event_date <= t_pred and (t_target is None or ev.event_date < t_target)
    )


def label_patient(history: PatientHistory, config: WindowConfig = WindowConfig()) -> LabeledWindow:
    """Anchor the prediction time on the first target diagnosis (minus the offset), or on the
    last event minus the horizon when the patient never gets one."""
    if not history.events:
        raise WindowError(history.patient_id, "no events")
    t_target = first_target_date(history, config.target_block)
    if t_target is not None:
        t_pred = t_target - timedelta(days=config.target_offset_days)
    else:
        t_pred = history.last_event_date - relativedelta(months=config.delta_pred)
    if t_pred < history.birth_date:
        raise WindowError(history.patient_id, "prediction anchor precedes birth")
    t_start = t_pred - relativedelta(months=config.delta_obs)
    t_end = t_pred + relativedelta(months=config.delta_pred)
    target = int(t_target is not None and t_pred <= t_target <= t_end)
    events = _window_events(history, t_start, t_pred, t_target)
    if not events:
        raise WindowError(history.patient_id, "empty observation window")
    return LabeledWindow(history.patient_id, history.sex, history.birth_date, t_start, t_pred,
                         t_end, target, age_years(history.birth_date, t_pred), events)


def window_at(history: PatientHistory, t_pred: date,
              config: WindowConfig = WindowConfig()) -> LabeledWindow:
    """Window at a fixed prediction date; the target is a first diagnosis in (t_pred, t_end].

    Patients already diagnosed on or before ``t_pred`` are not eligible.
    """
    t_target = first_target_date(history, config.target_block)
    if t_target is not None and t_target <= t_pred:
        raise WindowError(history.patient_id, "target diagnosis on or before t_pred")
    if t_pred <= history.birth_date:
        raise WindowError(history.patient_id, "prediction date precedes birth")
    t_start = t_pred - relativedelta(months=config.delta_obs)
    t_end = t_pred + relativedelta(months=config.delta_pred)
    target = int(t_target is not None and t_target <= t_end)
    events = _window_events(history, t_start, t_pred, None)
    if not events:
        raise WindowError(history.patient_id, "empty observation window")
    return LabeledWindow(history.patient_id, history.sex, history.birth_date, t_start, t_pred,
                         t_end, target, age_years(history.birth_date, t_pred), events)


def build_windows(histories: Mapping[str, PatientHistory] | Iterable[PatientHistory],
                  config: WindowConfig = WindowConfig(), t_pred: date | None = None):
    """Label every patient; returns (windows, exclusions) with exclusions as (id, reason)."""
    items = histories.values() if isinstance(histories, Mapping) else histories
    windows, excluded = [], []
    for h in items:
        try:
            w = label_patient(h, config) if t_pred is None else window_at(h, t_pred, config)
        except WindowError as exc:
            excluded.append((exc.patient_id, exc.reason))
        else:
            windows.append(w)
    return windows, excluded


def to_survival_observation(history: PatientHistory, config: WindowConfig = WindowConfig(),
                            covariates=None, left_truncate: bool = False) -> SurvivalObservation:
    """Age at the first target diagnosis (event) or at the last recorded event (censored).

    With ``left_truncate`` the entry age is the age at the first record, since nobody is
    seen before that; a diagnosis that is itself the first record enters just before it.
    """
    if not history.events:
        raise WindowError(history.patient_id, "no events")
    t_target = first_target_date(history, config.target_block)
    when, event = (t_target, 1) if t_target is not None else (history.last_event_date, 0)
    time = age_years(history.birth_date, when)
    if time <= 0:
        raise WindowError(history.patient_id, "non-positive survival time")
    cov = None if covariates is None else tuple(float(c) for c in covariates)
    entry = 0.0
    if left_truncate:
        entry = min(age_years(history.birth_date, history.events[0].event_date),
                    np.nextafter(time, 0.0))
    return SurvivalObservation(time, event, cov, history.patient_id, history.sex, max(entry, 0.0))


# --- stratified split ---------------------------------------------------------------------


def _allocate(n: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of n items to proportional weights."""
    exact = n * weights
    counts = np.floor(exact).astype(int)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def stratified_split(patients: Sequence[tuple[str, int, float]],
                     fractions: Sequence[tuple[str, float]],
                     age_edges: Sequence[float] = DEFAULT_AGE_EDGES,
                     seed: int = 0) -> dict[str, list[str]]:
    """Split (patient_id, sex, age) triples into named disjoint samples.

    Within each sex x age-bin cell the patients are shuffled with a seeded generator and
    allocated proportionally to ``fractions``. Output does not depend on input order.
    """
    if not patients:
        raise ValueError("no patients to split")
    names = [n for n, _ in fractions]
    weights = np.array([w for _, w in fractions], dtype=float)
    if np.any(weights <= 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("split weights must be positive and sum to 1")
    cells: dict[tuple[int, int], list[str]] = {}
    for pid, sex, age in patients:
        cells.setdefault((int(sex), int(np.digitize(age, age_edges))), []).append(pid)
    rng = np.random.default_rng(seed)
    out: dict[str, list[str]] = {n: [] for n in names}
    for key in sorted(cells):
        ids = sorted(cells[key])
        perm = rng.permutation(len(ids))
        counts = _allocate(len(ids), weights)
        start = 0
        for name, c in zip(names, counts):
            out[name].extend(ids[i] for i in perm[start:start + c])
            start += c
    return out


# --- homogeneity tests --------------------------------------------------------------------


@dataclass
class HomogeneityResult:
    test: str
    statistic: float
    p_value: float
    n_permutations: int | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"test": self.test, "statistic": self.statistic, "p_value": self.p_value,
             "n_permutations": self.n_permutations, "seed": self.seed}
        d.update(self.extra)
        return d


def _energy_from_sums(s_aa, s_bb, s_ab, n, m):
    return 2.0 * s_ab / (n * m) - s_aa / n**2 - s_bb / m**2


def homogeneity_multivariate(sample_a, sample_b, n_permutations: int = 1000, seed: int = 0,
                             max_points: int = 1000, chunk: int = 250) -> HomogeneityResult:
    """Energy-distance permutation test between two samples of (sex, age) points.

    Columns are scaled by the pooled standard deviation. Samples larger than ``max_points``
    are subsampled (seeded) so the pairwise distance matrix stays small.
    """
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 points")
    rng = np.random.default_rng(seed)
    if len(a) > max_points:
        a = a[np.sort(rng.choice(len(a), max_points, replace=False))]
    if len(b) > max_points:
        b = b[np.sort(rng.choice(len(b), max_points, replace=False))]
    x = np.vstack([a, b])
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    x = x / scale
    n, m = len(a), len(b)
    dist = cdist(x, x)
    total = dist.sum()

    def stat(mask_cols):
        ds = dist @ mask_cols
        s_aa = np.einsum("ij,ij->j", mask_cols, ds)
        s_ab = ds.sum(axis=0) - s_aa
        s_bb = total - 2 * s_ab - s_aa
        return _energy_from_sums(s_aa, s_bb, s_ab, n, m)

    labels = np.zeros(n + m)
    labels[:n] = 1.0
    observed = float(stat(labels[:, None])[0])
    exceed = 0
    done = 0
    while done < n_permutations:
        k = min(chunk, n_permutations - done)
        cols = np.stack([rng.permutation(labels) for _ in range(k)], axis=1)
        exceed += int(np.sum(stat(cols) >= observed - 1e-12))
        done += k
    p = (1 + exceed) / (n_permutations + 1)
    return HomogeneityResult("energy_distance_permutation", observed * n * m / (n + m), p,
                             n_permutations, seed, {"n_a": n, "n_b": m})


def logrank_test(time_a, event_a, time_b, event_b) -> tuple[float, float]:
    """Two-sample log-rank chi-square statistic and p-value (1 df)."""
    ta, ea = np.asarray(time_a, float), np.asarray(event_a, int)
    tb, eb = np.asarray(time_b, float), np.asarray(event_b, int)
    if ea.sum() == 0 or eb.sum() == 0:
        raise UndefinedStatisticError("log-rank test needs events in both samples")
    t_all = np.concatenate([ta, tb])
    e_all = np.concatenate([ea, eb])
    ev_times = np.unique(t_all[e_all == 1])
    sa, sb = np.sort(ta), np.sort(tb)
    n_a = len(sa) - np.searchsorted(sa, ev_times, side="left")
    n_b = len(sb) - np.searchsorted(sb, ev_times, side="left")
    d_a = np.bincount(np.searchsorted(ev_times, ta[ea == 1]), minlength=len(ev_times))
    d_b = np.bincount(np.searchsorted(ev_times, tb[eb == 1]), minlength=len(ev_times))
    n = n_a + n_b
    d = d_a + d_b
    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    v = var.sum()
    if v <= 0:
        raise UndefinedStatisticError("log-rank variance is zero")
    chi2 = float((d_a.sum() - expected.sum()) ** 2 / v)
    return chi2, float(stats.chi2.sf(chi2, 1))


def homogeneity_censored(sample_a: Sequence[SurvivalObservation],
                         sample_b: Sequence[SurvivalObservation]) -> HomogeneityResult:
    if not sample_a or not sample_b:
        raise ValueError("both samples must be non-empty")
    chi2, p = logrank_test([o.time for o in sample_a], [o.event for o in sample_a],
                           [o.time for o in sample_b], [o.event for o in sample_b])
    return HomogeneityResult("logrank", chi2, p)
