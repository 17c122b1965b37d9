"""Synthetic EHR corpora with a known Weibull-AFT cancer hazard.

Each patient has a few latent traits (a benign-neoplasm history, a circulatory condition,
a male genital condition, a preference for services over diagnoses, a visit frailty) that
shape a background visit stream. The hazard covariates are then read off that stream the
way the feature builder reads a window: sex, any diagnosis in D00-D48 / I00-I99 / N40-N51,
the service share of all events and the mean gap between events in weeks. The latent
cancer age follows S(t | x) = exp(-(t * exp(x @ beta) / lam) ** rho) conditioned on being
cancer-free at enrollment, and a target-block diagnosis is written on that date when it
falls inside the enrollment.

Per-patient randomness comes from counter-based streams, ``SeedSequence(seed,
spawn_key=(i, stage))``, so patient i's draws do not depend on how many patients there are.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import optimize, special

from .ehr import EventRecord, EventType, PatientHistory, Sex, write_ehr
from .cohort import label_patient
from .errors import CalibrationError, SchemaError, WindowError
from .features import FeatureBuilder, FeatureConfig, covariates_from_rows

TRUTH_COVARIATES = ("sex", "any_benign", "any_circulatory", "any_male_genital",
                    "service_ratio", "avg_weeks_between_visits")

# background diagnosis mixture: (letter, lo, hi) ranges and weights
_BACKGROUND = {
    "J00-J99": (("J", 0, 99), 0.17), "Z00-Z99": (("Z", 0, 99), 0.14),
    "M00-M99": (("M", 0, 99), 0.11), "K00-K93": (("K", 0, 93), 0.09),
    "R00-R99": (("R", 0, 99), 0.08), "E00-E90": (("E", 0, 90), 0.06),
    "H00-H59": (("H", 0, 59), 0.06), "L00-L99": (("L", 0, 99), 0.05),
    "S00-S99": (("S", 0, 99), 0.05), "N00-N39": (("N", 0, 39), 0.04),
    "F00-F99": (("F", 0, 99), 0.03), "G00-G99": (("G", 0, 99), 0.03),
    "A00-B99": (("B", 0, 99), 0.03), "D50-D89": (("D", 50, 89), 0.02),
    "I00-I99": (("I", 0, 99), 0.02), "D00-D48": (("D", 0, 48), 0.01),
}
_TRAIT_RANGES = {"benign": ("D", 0, 48), "circulatory": ("I", 0, 99),
                 "male_genital": ("N", 40, 51)}
_SYMPTOM_RANGES = ((("R", 0, 99), 0.5), (("D", 50, 64), 0.2), (("K", 20, 93), 0.3))
# target-block sites with rough shares; breast mostly female, prostate male only
_CANCER_SITES = (
    (("C", 15, 26), 0.26, None), (("C", 30, 39), 0.15, None), (("C", 43, 44), 0.08, None),
    (("C", 50, 50), 0.12, Sex.FEMALE), (("C", 51, 58), 0.06, Sex.FEMALE),
    (("C", 61, 61), 0.08, Sex.MALE), (("C", 64, 68), 0.07, None), (("C", 0, 14), 0.03, None),
    (("C", 73, 75), 0.04, None), (("C", 81, 96), 0.07, None), (("C", 69, 72), 0.02, None),
    (("C", 76, 80), 0.02, None),
)


def _default_effects():
    return {"sex": 0.30, "any_benign": 0.40, "any_circulatory": 0.20, "any_male_genital": 0.25,
            "service_ratio": 0.80, "avg_weeks_between_visits": -0.01}


def _default_systems():
    w = np.ones(30)
    w[[0, 4, 8, 9, 15, 19, 22]] = 4.0  # a handful of common systems
    return (w / w.sum()).round(6).tolist()


@dataclass
class PopulationSpec:
    n_patients: int = 20_000
    male_fraction: float = 0.406
    age_mean: float = 40.5  # at mid-span; ages at t_pred come out ~0.5 y higher
    age_sd: float = 15.0
    age_min: float = 18.0
    age_max: float = 90.0
    span_start: str = "2019-01-01"
    span_end: str = "2022-12-31"
    delta_obs: int = 24
    delta_pred: int = 12
    incidence: float | None = 0.016  # share of patients with a target diagnosis in the corpus
    baseline_scale: float | None = None  # lambda*; calibrated to ``incidence`` when None
    baseline_shape: float = 4.0  # rho*
    effects: dict = field(default_factory=_default_effects)  # beta* on TRUTH_COVARIATES
    visit_rate: float = 8.0  # events per year at the mean age
    visit_age_slope: float = 0.015
    visit_frailty_sd: float = 0.5
    service_share_mean: float = 0.45
    service_share_concentration: float = 6.0
    trait_prevalence: dict = field(default_factory=lambda: {
        "benign": 0.10, "circulatory": 0.22, "male_genital": 0.12})
    trait_code_share: float = 0.5  # share of a carrier's diagnoses drawn from the trait block
    system_weights: list = field(default_factory=_default_systems)
    enrolled_at_start: float = 0.6
    retained_to_end: float = 0.4
    prodrome_months: int = 3
    prodrome_rate_ratio: float = 1.0  # 1 = no extra visits before diagnosis
    followup_rate: float = 2.0  # target-block follow-up records per year after diagnosis
    seed: int = 0

    def __post_init__(self):
        start, end = date.fromisoformat(self.span_start), date.fromisoformat(self.span_end)
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if not 0 <= self.male_fraction <= 1:
            raise ValueError("male_fraction must lie in [0, 1]")
        if self.incidence is not None and not 0 <= self.incidence < 1:
            raise ValueError("incidence must lie in [0, 1)")
        if (end - start).days < 30.44 * (self.delta_obs + self.delta_pred):
            raise ValueError("span must cover the observation plus prediction windows")
        if not self.age_min < self.age_max:
            raise ValueError("age_min must be below age_max")
        if abs(sum(self.system_weights) - 1) > 1e-6 or len(self.system_weights) != 30:
            raise ValueError("system_weights must be 30 probabilities summing to 1")
        unknown = set(self.effects) - set(TRUTH_COVARIATES)
        if unknown:
            raise ValueError(f"unknown effects {sorted(unknown)}")
        if self.incidence is None and self.baseline_scale is None:
            raise ValueError("give an incidence target or a baseline scale")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PopulationSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown population spec keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PopulationSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.effects.get(c, 0.0) for c in TRUTH_COVARIATES])

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TruthTable:
    """Per-patient ground truth; arrays are aligned with ``patient_ids``."""
    run_id: str
    scale: float
    shape: float
    beta: np.ndarray
    patient_ids: list[str]
    birth_dates: list[date]
    enroll_start: list[date]
    enroll_end: list[date]
    latent_age: np.ndarray
    event_date: list[date | None]
    covariates: np.ndarray
    reference_t_pred: date
    delta_pred: int

    @property
    def event_in_span(self) -> np.ndarray:
        return np.array([d is not None for d in self.event_date], dtype=int)

    def horizon_probability(self, t_pred: date, delta_pred: int | None = None) -> np.ndarray:
        """P(T in (a, a + delta] | T > a, x) at a = age on t_pred (NaN once T <= a)."""
        months = self.delta_pred if delta_pred is None else delta_pred
        age = np.array([(t_pred - b).days / 365.25 for b in self.birth_dates])
        return _conditional_probability(age, months / 12.0, self.covariates @ self.beta,
                                        self.scale, self.shape, self.latent_age)


def _cumhaz(age, eta, scale, shape):
    return (np.maximum(age, 0.0) * np.exp(eta) / scale) ** shape


def _conditional_probability(age, horizon, eta, scale, shape, latent=None):
    p = -np.expm1(-(_cumhaz(age + horizon, eta, scale, shape) - _cumhaz(age, eta, scale, shape)))
    if latent is not None:
        p = np.where(latent > age, p, np.nan)
    return p


@dataclass
class SyntheticCorpus:
    spec: PopulationSpec
    histories: dict[str, PatientHistory]
    truth: TruthTable


# --- static draws ---------------------------------------------------------------------------


def _stream(seed: int, i: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, stage)))


def _truncnorm_loc(spec: PopulationSpec) -> float:
    """Location whose truncated normal has the requested mean."""
    lo, hi, sd = spec.age_min, spec.age_max, spec.age_sd

    def mean_gap(loc):
        a, b = (lo - loc) / sd, (hi - loc) / sd
        z = special.ndtr(b) - special.ndtr(a)
        pdf = lambda v: np.exp(-v * v / 2) / np.sqrt(2 * np.pi)
        return loc + sd * (pdf(a) - pdf(b)) / z - spec.age_mean

    return optimize.brentq(mean_gap, lo - 5 * sd, hi + 5 * sd)


def _static_draws(spec: PopulationSpec):
    n = spec.n_patients
    U = np.array([_stream(spec.seed, i, 0).random(12) for i in range(n)]).reshape(n, 12)
    start, end = date.fromisoformat(spec.span_start), date.fromisoformat(spec.span_end)
    span_days = (end - start).days
    mid = start + timedelta(days=span_days // 2)

    male = U[:, 0] < spec.male_fraction
    loc, sd = _truncnorm_loc(spec), spec.age_sd
    a, b = special.ndtr((spec.age_min - loc) / sd), special.ndtr((spec.age_max - loc) / sd)
    age_mid = loc + sd * special.ndtri(a + U[:, 1] * (b - a))
    prev = spec.trait_prevalence
    benign = U[:, 2] < prev.get("benign", 0.0)
    circ = U[:, 3] < prev.get("circulatory", 0.0)
    genital = male & (U[:, 4] < prev.get("male_genital", 0.0))
    m, c = spec.service_share_mean, spec.service_share_concentration
    share = special.betaincinv(m * c, (1 - m) * c, U[:, 5])
    frailty = special.ndtri(U[:, 6])  # standard normal; visit rate multiplier exp(sd * z)

    birth = [mid - timedelta(days=int(round(x * 365.25))) for x in age_mid]
    e0_off = np.where(U[:, 7] < spec.enrolled_at_start, 0,
                      np.floor(U[:, 8] * (span_days - 30)).astype(int))
    rest = span_days - e0_off
    e1_off = np.where(U[:, 9] < spec.retained_to_end, span_days,
                      e0_off + np.floor(U[:, 10] * rest).astype(int))
    e0 = [start + timedelta(days=int(o)) for o in e0_off]
    e1 = [start + timedelta(days=int(o)) for o in e1_off]
    traits = np.column_stack([benign, circ, genital]).astype(bool)
    age0 = np.array([(d - bd).days / 365.25 for d, bd in zip(e0, birth)])
    age1 = np.array([(d - bd).days / 365.25 for d, bd in zip(e1, birth)])
    return dict(male=male, birth=birth, e0=e0, e1=e1, traits=traits, share=share,
                frailty=frailty, age0=age0, age1=age1, u_event=U[:, 11], age_mid=age_mid)


def expected_incidence(scale: float, static: dict, spec: PopulationSpec) -> float:
    eta = static["X"] @ spec.beta
    h0 = _cumhaz(static["age0"], eta, scale, spec.baseline_shape)
    h1 = _cumhaz(static["age1"], eta, scale, spec.baseline_shape)
    return float(np.mean(-np.expm1(-(h1 - h0))))


def calibrate_scale(static: dict, spec: PopulationSpec, target: float) -> float:
    """lambda* giving the requested expected share of recorded diagnoses."""
    f = lambda log_s: expected_incidence(np.exp(log_s), static, spec) - target
    lo, hi = np.log(1e-3), np.log(1e6)
    ceiling = expected_incidence(np.exp(lo), static, spec)
    if target >= ceiling:
        raise CalibrationError(f"incidence {target} is not reachable; maximum is about "
                               f"{ceiling:.4f} for this enrollment pattern", None)
    return float(np.exp(optimize.brentq(f, lo, hi, xtol=1e-12)))


def _suggested_range(static, spec, target):
    lo = calibrate_scale(static, spec, min(target * 1.1, 0.999))
    hi = calibrate_scale(static, spec, target * 0.9)
    return lo, hi


def _latent_ages(static: dict, spec: PopulationSpec, scale: float) -> np.ndarray:
    """Inverse-CDF draw of T given T > age at enrollment start."""
    eta = static["X"] @ spec.beta
    rho = spec.baseline_shape
    h0 = _cumhaz(static["age0"], eta, scale, rho)
    return scale * np.exp(-eta) * (h0 - np.log(static["u_event"])) ** (1.0 / rho)


# --- event streams ------------------------------------------------------------------------


def _code_in(rng, letter, lo, hi, size):
    nums = rng.integers(lo, hi + 1, size=size)
    subs = rng.integers(0, 10, size=size)
    with_sub = rng.random(size) < 0.7
    return [f"{letter}{n:02d}.{s}" if w else f"{letter}{n:02d}"
            for n, s, w in zip(nums, subs, with_sub)]


class _Codebook:
    def __init__(self, spec: PopulationSpec):
        self.bg_ranges = [r for r, _ in _BACKGROUND.values()]
        w = np.array([w for _, w in _BACKGROUND.values()])
        self.bg_p = w / w.sum()
        self.sys_p = np.asarray(spec.system_weights, dtype=float)
        self.sys_p = self.sys_p / self.sys_p.sum()
        self.sym_ranges = [r for r, _ in _SYMPTOM_RANGES]
        self.sym_p = np.array([w for _, w in _SYMPTOM_RANGES])
        self.trait_share = spec.trait_code_share

    def diagnoses(self, rng, k, traits):
        """k diagnosis codes; each carried trait block weighs ``trait_share`` against
        ``1 - trait_share`` for the whole background mixture."""
        own = [_TRAIT_RANGES[t] for t in traits]
        s = self.trait_share
        p = np.concatenate([self.bg_p * (1 - s), np.full(len(own), s)])
        return self._draw(rng, k, self.bg_ranges + own, p / p.sum())

    def symptoms(self, rng, k):
        return self._draw(rng, k, self.sym_ranges, self.sym_p)

    def _draw(self, rng, k, ranges, p):
        pick = rng.choice(len(ranges), size=k, p=p)
        out = [None] * k
        for j in np.unique(pick):
            idx = np.flatnonzero(pick == j)
            for i, c in zip(idx, _code_in(rng, *ranges[j], len(idx))):
                out[i] = c
        return out

    def services(self, rng, k):
        systems = rng.choice(30, size=k, p=self.sys_p) + 1
        heads = rng.integers(1, 30, size=k)
        tails = rng.integers(1, 200, size=k)
        letters = np.where(rng.random(k) < 0.7, "A", "B")
        return [f"{l}{h:02d}.{s:02d}.{t:03d}" for l, h, s, t in zip(letters, heads, systems, tails)]

    @staticmethod
    def cancer(rng, sex: Sex):
        rows = [(r, w) for r, w, s in _CANCER_SITES if s is None or s == sex]
        p = np.array([w for _, w in rows])
        r = rows[int(rng.choice(len(rows), p=p / p.sum()))][0]
        return _code_in(rng, *r, 1)[0]


def _background_events(i, static, spec, book):
    """Visit stream that does not depend on the cancer process."""
    rng = _stream(spec.seed, i, 1)
    e0, e1 = static["e0"][i], static["e1"][i]
    days = (e1 - e0).days + 1
    rate = spec.visit_rate * np.exp(spec.visit_age_slope * (static["age_mid"][i] - spec.age_mean)
                                    + spec.visit_frailty_sd * static["frailty"][i])
    traits = [t for t, on in zip(("benign", "circulatory", "male_genital"), static["traits"][i])
              if on]
    n_ev = max(1, int(rng.poisson(rate * days / 365.25)))
    offs = np.sort(rng.integers(0, days, size=n_ev))
    is_service = rng.random(n_ev) < static["share"][i]
    n_svc = int(is_service.sum())
    codes = np.empty(n_ev, dtype=object)
    codes[is_service] = book.services(rng, n_svc)
    codes[~is_service] = book.diagnoses(rng, n_ev - n_svc, traits)
    return [(e0 + timedelta(days=int(o)), EventType.SERVICE if sv else EventType.DIAGNOSIS, c)
            for o, sv, c in zip(offs, is_service, codes)]


_BEHAVIOUR_FEATURES = ("sex", "any_icd_D00-D48", "any_icd_I00-I99", "any_icd_N40-N51",
                       "service_visits_ratio", "avg_weeks_between_visits")


def behaviour_covariates(history: PatientHistory) -> np.ndarray:
    """Hazard covariates (TRUTH_COVARIATES order) of a cancer-free history.

    They are read off the observation window a cancer-free patient would get, with the same
    definitions the feature builder uses, so a correctly specified survival model sees them.
    """
    try:
        w = label_patient(history)
    except WindowError:
        return np.array([float(history.sex == Sex.MALE), 0, 0, 0, 0, 0], dtype=float)
    row = _COVARIATES._raw_row(w)
    return covariates_from_rows(row[None, :], _COVARIATES.names, _BEHAVIOUR_FEATURES)[0]


_COVARIATES = FeatureBuilder(FeatureConfig(km_features=False, aft_features=False))


def _add_cancer(i, events, sex, dx_date, e0, e1, rate, spec, book):
    rng = _stream(spec.seed, i, 2)
    events = list(events)
    pro_days = int(spec.prodrome_months * 30.44)
    start = max(e0, dx_date - timedelta(days=pro_days))
    span = (dx_date - start).days
    if span > 0 and spec.prodrome_rate_ratio > 1:
        # extra symptom visits shortly before the diagnosis
        k = int(rng.poisson(rate * (spec.prodrome_rate_ratio - 1) * span / 365.25))
        for o, c in zip(rng.integers(0, span, size=k), book.symptoms(rng, k)):
            events.append((start + timedelta(days=int(o)), EventType.DIAGNOSIS, c))
    site = book.cancer(rng, sex)
    events.append((dx_date, EventType.DIAGNOSIS, site))
    tail = (e1 - dx_date).days
    if tail > 0:
        k = int(rng.poisson(spec.followup_rate * tail / 365.25))
        for o in np.sort(rng.integers(1, tail + 1, size=k)):
            events.append((dx_date + timedelta(days=int(o)), EventType.DIAGNOSIS, site))
    events.sort(key=lambda e: e[0])
    return events


def generate_population(spec: PopulationSpec) -> SyntheticCorpus:
    """Simulate the corpus and its ground truth. Same spec (and seed) gives the same output."""
    static = _static_draws(spec)
    book = _Codebook(spec)
    n = spec.n_patients
    width = len(str(n - 1))
    pids = [f"p{i:0{width}d}" for i in range(n)]
    sexes = [Sex.MALE if m else Sex.FEMALE for m in static["male"]]
    background = [_background_events(i, static, spec, book) for i in range(n)]
    static["X"] = np.array([
        behaviour_covariates(PatientHistory(pid, sx, b, tuple(EventRecord(pid, d, t, c)
                                                               for d, t, c in ev)))
        for pid, sx, b, ev in zip(pids, sexes, static["birth"], background)
    ]).reshape(n, len(TRUTH_COVARIATES))
    target = spec.incidence
    if target == 0:
        scale = spec.baseline_scale or 1.0
    elif spec.baseline_scale is None:
        scale = calibrate_scale(static, spec, target)
    else:
        scale = spec.baseline_scale
        if target is not None:
            got = expected_incidence(scale, static, spec)
            if abs(got - target) > max(0.002, 0.1 * target):
                lo, hi = _suggested_range(static, spec, target)
                raise CalibrationError(
                    f"baseline scale {scale} gives incidence {got:.4f}, target {target}; "
                    f"use a scale in [{lo:.3f}, {hi:.3f}]", calibrate_scale(static, spec, target))
    latent = _latent_ages(static, spec, scale) if target != 0 else np.full(n, np.inf)
    histories, dx_dates = {}, []
    for i in range(n):
        pid, sex = pids[i], sexes[i]
        birth, e0, e1 = static["birth"][i], static["e0"][i], static["e1"][i]
        events = background[i]
        dx = None
        if latent[i] <= static["age1"][i]:
            dx = birth + timedelta(days=int(np.floor(latent[i] * 365.25)))
            dx = min(max(dx, e0), e1)
            rate = len(events) * 365.25 / ((e1 - e0).days + 1)
            events = _add_cancer(i, events, sex, dx, e0, e1, rate, spec, book)
        dx_dates.append(dx)
        histories[pid] = PatientHistory(pid, sex, birth,
                                        tuple(EventRecord(pid, d, t, c) for d, t, c in events))
    end = date.fromisoformat(spec.span_end)
    truth = TruthTable(spec.run_id(), scale, spec.baseline_shape, spec.beta,
                       list(histories), static["birth"], static["e0"], static["e1"], latent,
                       dx_dates, static["X"], _months_back(end, spec.delta_pred), spec.delta_pred)
    return SyntheticCorpus(spec, histories, truth)


def _months_back(d: date, months: int) -> date:
    from dateutil.relativedelta import relativedelta
    return d - relativedelta(months=months)


# --- files --------------------------------------------------------------------------------

TRUTH_HEADER = ("patient_id", "latent_event_age", "event_in_span", "true_horizon_prob")


def write_truth(truth: TruthTable, path):
    """Truth CSV plus a JSON sidecar (run id, hazard parameters) next to it."""
    path = Path(path)
    prob = truth.horizon_probability(truth.reference_t_pred)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*TRUTH_HEADER, "event_date", "birth_date", "enroll_start", "enroll_end",
                    *(f"x_{c}" for c in TRUTH_COVARIATES)])
        for k, pid in enumerate(truth.patient_ids):
            ev = truth.event_date[k]
            w.writerow([pid, repr(float(truth.latent_age[k])), int(ev is not None),
                        "" if np.isnan(prob[k]) else repr(float(prob[k])),
                        "" if ev is None else ev.isoformat(), truth.birth_dates[k].isoformat(),
                        truth.enroll_start[k].isoformat(), truth.enroll_end[k].isoformat(),
                        *(repr(float(v)) for v in truth.covariates[k])])
    meta = {"run_id": truth.run_id, "scale": truth.scale, "shape": truth.shape,
            "beta": dict(zip(TRUTH_COVARIATES, truth.beta.tolist())),
            "reference_t_pred": truth.reference_t_pred.isoformat(),
            "delta_pred": truth.delta_pred}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_truth(path) -> TruthTable:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    ids, births, e0, e1, latent, events, cov = [], [], [], [], [], [], []
    with path.open(newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            ids.append(row["patient_id"])
            latent.append(float(row["latent_event_age"]))
            events.append(date.fromisoformat(row["event_date"]) if row["event_date"] else None)
            births.append(date.fromisoformat(row["birth_date"]))
            e0.append(date.fromisoformat(row["enroll_start"]))
            e1.append(date.fromisoformat(row["enroll_end"]))
            cov.append([float(row[f"x_{c}"]) for c in TRUTH_COVARIATES])
    beta = np.array([meta["beta"][c] for c in TRUTH_COVARIATES])
    return TruthTable(meta["run_id"], meta["scale"], meta["shape"], beta, ids, births, e0, e1,
                      np.array(latent), events, np.array(cov).reshape(len(ids), -1),
                      date.fromisoformat(meta["reference_t_pred"]), meta["delta_pred"])


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ehr": out / "ehr.csv", "truth": out / "truth.csv", "spec": out / "spec.json"}
    write_ehr(corpus.histories, paths["ehr"])
    write_truth(corpus.truth, paths["truth"])
    paths["spec"].write_text(json.dumps(corpus.spec.to_dict(), indent=2) + "\n")
    return paths


# --- ground-truth ranking -----------------------------------------------------------------


@dataclass
class TruthRanking:
    patient_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray

    def as_scores(self) -> dict[str, float]:
        return dict(zip(self.patient_ids, self.scores.tolist()))


def truth_ranking(truth: TruthTable, t_pred: date, delta_pred: int | None = None,
                  run_id: str | None = None) -> TruthRanking:
    """Event-in-horizon labels and true conditional probabilities for patients still
    cancer-free at ``t_pred``."""
    if run_id is not None and run_id != truth.run_id:
        raise SchemaError(f"truth file belongs to run {truth.run_id}, not {run_id}")
    from dateutil.relativedelta import relativedelta
    months = truth.delta_pred if delta_pred is None else delta_pred
    t_end = t_pred + relativedelta(months=months)
    prob = truth.horizon_probability(t_pred, months)
    keep = ~np.isnan(prob)
    labels = np.array([ev is not None and t_pred < ev <= t_end for ev in truth.event_date])
    ids = [p for p, k in zip(truth.patient_ids, keep) if k]
    return TruthRanking(ids, labels[keep].astype(int), prob[keep])


# --- plain AFT samples --------------------------------------------------------------------


def simulate_aft_observations(n: int, scale: float, shape: float, beta, censor_fraction: float = 0.3,
                              seed: int = 0, family: str = "weibull"):
    """Draw (time, event, X) from a Weibull (or log-logistic) AFT law with standard-normal
    covariates and independent uniform censoring tuned to the requested censored share."""
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, len(beta)))
    u = rng.random(n)
    base = (-np.log(u)) ** (1 / shape) if family == "weibull" else (1 / u - 1) ** (1 / shape)
    T = scale * base * np.exp(-X @ beta)
    v = rng.random(n)
    if censor_fraction <= 0:
        return T, np.ones(n, dtype=int), X

    def share(c_max):
        return np.mean(v * c_max < T) - censor_fraction

    c_max = optimize.brentq(share, 1e-9 * T.max(), 1e6 * T.max()) if censor_fraction < 1 else 0
    C = v * c_max
    event = (T <= C).astype(int)
    return np.minimum(T, C), event, X
