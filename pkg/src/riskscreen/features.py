"""Feature engineering over a labeled window.

Feature groups:
    a  socio-demographic        f  seasonality of the prediction date
    b  visit frequency          g  diagnosis-block indicators
    c  diagnosis-block counts   h  service-group indicators
    d  service-group counts     i  survival-model features (Kaplan-Meier and AFT)
    e  time between visits

Every event counts as one visit. Missing values are NaN and are passed to the trees as such.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from dateutil.relativedelta import relativedelta

from .cohort import LabeledWindow
from .ehr import DEFAULT_BLOCKS, IcdBlock, Sex, icd10_group, service_group
from .errors import NotFittedError, SchemaMismatchError
from .survival import AFTModel, KMCurve, aft_survival, km_survival_at

DEFAULT_SYSTEMS = tuple(f"system-{i:02d}" for i in range(1, 31))
SURVIVAL_GROUP = "i"

AFT_COVARIATES = (
    "sex", "any_icd_D00-D48", "any_icd_I00-I99", "any_icd_N40-N51",
    "service_visits_ratio", "weeks_since_first_visit", "avg_weeks_between_visits",
)


def _unique_blocks(blocks):
    seen, out = set(), []
    for b in blocks:
        if b.label not in seen:
            seen.add(b.label)
            out.append(b)
    return tuple(out)


@dataclass(frozen=True)
class FeatureConfig:
    icd_blocks: tuple[IcdBlock, ...] = field(default_factory=lambda: _unique_blocks(DEFAULT_BLOCKS))
    service_systems: tuple[str, ...] = DEFAULT_SYSTEMS
    horizons: tuple[int, ...] = (1, 3, 6, 12)
    km_features: bool = True
    aft_features: bool = True

    def __post_init__(self):
        h = list(self.horizons)
        if any(x <= 0 for x in h) or h != sorted(set(h)):
            raise ValueError("horizons must be positive and strictly ascending")

    @property
    def survival(self) -> bool:
        return self.km_features or self.aft_features


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    type: str


def build_schema(config: FeatureConfig = FeatureConfig()) -> list[FeatureSpec]:
    icd = [b.label for b in config.icd_blocks]
    svc = list(config.service_systems)
    S = FeatureSpec
    schema = [S("age_at_pred", "a", "float"), S("sex", "a", "binary"),
              S("birth_month", "a", "int"), S("bmi", "a", "float")]
    schema += [S("n_visits", "b", "count"), S("n_diagnoses", "b", "count"),
               S("n_services", "b", "count"), S("n_visit_days", "b", "count"),
               S("diagnose_visits_ratio", "b", "ratio"), S("service_visits_ratio", "b", "ratio"),
               S("n_unique_diagnoses", "b", "count"), S("n_unique_services", "b", "count")]
    schema += [S(f"visits_last_{h}m", "b", "count") for h in config.horizons]
    schema += [S(f"count_icd_{b}", "c", "count") for b in icd]
    schema += [S(f"count_svc_{g}", "d", "count") for g in svc]
    schema += [S("weeks_since_first_visit", "e", "float"),
               S("weeks_since_last_visit", "e", "float"),
               S("avg_weeks_between_visits", "e", "float")]
    for kind, labels in (("icd", icd), ("svc", svc)):
        for lab in labels:
            schema += [S(f"weeks_since_first_{kind}_{lab}", "e", "float"),
                       S(f"weeks_since_last_{kind}_{lab}", "e", "float")]
    schema += [S("pred_month", "f", "int"), S("pred_season", "f", "int"),
               S("weather", "f", "float")]
    schema += [S(f"any_icd_{b}", "g", "binary") for b in icd]
    schema += [S(f"any_svc_{g}", "h", "binary") for g in svc]
    if config.km_features:
        schema += [S(n, SURVIVAL_GROUP, "float") for n in
                   ("skm_all_at_age", "skm_sex_at_age", "skm_all_delta", "skm_sex_delta")]
    if config.aft_features:
        schema += [S(n, SURVIVAL_GROUP, "float") for n in ("saft_at_age", "saft_delta")]
    return schema


def ablate_schema(schema: Sequence[FeatureSpec]) -> list[FeatureSpec]:
    return [f for f in schema if f.group != SURVIVAL_GROUP]


@dataclass
class FeatureMatrix:
    names: list[str]
    values: np.ndarray
    patient_ids: list[str] = field(default_factory=list)
    targets: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        missing = [n for n in names if n not in self.names]
        if missing:
            raise SchemaMismatchError(f"unknown features: {missing[:5]}")
        idx = [self.names.index(n) for n in names]
        return FeatureMatrix(list(names), self.values[:, idx], self.patient_ids, self.targets)

    def rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(self.names, self.values[idx], [self.patient_ids[i] for i in idx],
                             None if self.targets is None else self.targets[idx])


@dataclass
class FeatureVector:
    names: list[str]
    values: np.ndarray

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))


_SEASON = {12: 1, 1: 1, 2: 1, 3: 2, 4: 2, 5: 2, 6: 3, 7: 3, 8: 3, 9: 4, 10: 4, 11: 4}


def _weeks(a: date, b: date) -> float:
    return (b - a).days / 7.0


def _months_before(d: date, months: int) -> date:
    return d - relativedelta(months=months)


class FeatureBuilder:
    """Turns windows into rows of the configured schema; code lookups are cached."""

    def __init__(self, config: FeatureConfig = FeatureConfig()):
        self.config = config
        self.schema = build_schema(config)
        self.names = [f.name for f in self.schema]
        self._index = {n: i for i, n in enumerate(self.names)}
        self._icd_cache: dict[str, list[str]] = {}
        self._icd_labels = [b.label for b in config.icd_blocks]
        self._svc_labels = set(config.service_systems)

    def _icd_labels_of(self, code):
        labels = self._icd_cache.get(code)
        if labels is None:
            labels = icd10_group(code, self.config.icd_blocks)
            self._icd_cache[code] = labels
        return labels

    def _raw_row(self, w: LabeledWindow) -> np.ndarray:
        ix = self._index
        row = np.full(len(self.names), np.nan)
        t_pred = w.t_pred
        events = [e for e in w.events_in_window if w.t_start <= e.event_date <= t_pred]
        row[ix["age_at_pred"]] = w.age_at_pred
        row[ix["sex"]] = int(w.sex)
        row[ix["birth_month"]] = w.birth_date.month
        row[ix["pred_month"]] = t_pred.month
        row[ix["pred_season"]] = _SEASON[t_pred.month]

        n = len(events)
        diags = [e for e in events if e.is_diagnosis]
        servs = [e for e in events if not e.is_diagnosis]
        row[ix["n_visits"]] = n
        row[ix["n_diagnoses"]] = len(diags)
        row[ix["n_services"]] = len(servs)
        row[ix["n_visit_days"]] = len({e.event_date for e in events})
        if n:
            row[ix["diagnose_visits_ratio"]] = len(diags) / n
            row[ix["service_visits_ratio"]] = len(servs) / n
        row[ix["n_unique_diagnoses"]] = len({e.code for e in diags})
        row[ix["n_unique_services"]] = len({e.code for e in servs})
        for h in self.config.horizons:
            since = _months_before(t_pred, h)
            row[ix[f"visits_last_{h}m"]] = sum(1 for e in events if e.event_date > since)

        for lab in self._icd_labels:
            row[ix[f"count_icd_{lab}"]] = 0
            row[ix[f"any_icd_{lab}"]] = 0
        for g in self.config.service_systems:
            row[ix[f"count_svc_{g}"]] = 0
            row[ix[f"any_svc_{g}"]] = 0
        if n:
            first, last = events[0].event_date, events[-1].event_date
            row[ix["weeks_since_first_visit"]] = _weeks(first, t_pred)
            row[ix["weeks_since_last_visit"]] = _weeks(last, t_pred)
            if n > 1:
                row[ix["avg_weeks_between_visits"]] = _weeks(first, last) / (n - 1)
        # events are date-ordered, so the first hit is the earliest and the last hit the latest
        for e in events:
            if e.is_diagnosis:
                kind, labels = "icd", self._icd_labels_of(e.code)
            else:
                g = service_group(e.code)
                kind, labels = "svc", ([g] if g in self._svc_labels else [])
            weeks = _weeks(e.event_date, t_pred)
            for lab in labels:
                row[ix[f"count_{kind}_{lab}"]] += 1
                row[ix[f"any_{kind}_{lab}"]] = 1
                first_i = ix[f"weeks_since_first_{kind}_{lab}"]
                if np.isnan(row[first_i]):
                    row[first_i] = weeks
                row[ix[f"weeks_since_last_{kind}_{lab}"]] = weeks
        return row

    def transform(self, windows: Sequence[LabeledWindow],
                  km: Mapping[str, KMCurve] | None = None,
                  aft: AFTModel | None = None) -> FeatureMatrix:
        cfg = self.config
        if cfg.km_features and (km is None or any(c not in km for c in ("All", "Male", "Female"))):
            raise NotFittedError("Kaplan-Meier curves (All/Male/Female) are required")
        if cfg.aft_features and aft is None:
            raise NotFittedError("a fitted AFT model is required")
        values = np.array([self._raw_row(w) for w in windows]).reshape(len(windows), -1)
        if windows and cfg.survival:
            age = np.array([w.age_at_pred for w in windows])
            ix = self._index
            if cfg.km_features:
                male = np.array([w.sex == Sex.MALE for w in windows])
                s_all, s_all1 = km_survival_at(km["All"], age), km_survival_at(km["All"], age + 1)
                s_sex = np.where(male, km_survival_at(km["Male"], age),
                                 km_survival_at(km["Female"], age))
                s_sex1 = np.where(male, km_survival_at(km["Male"], age + 1),
                                  km_survival_at(km["Female"], age + 1))
                values[:, ix["skm_all_at_age"]] = s_all
                values[:, ix["skm_sex_at_age"]] = s_sex
                values[:, ix["skm_all_delta"]] = s_all1 - s_all
                values[:, ix["skm_sex_delta"]] = s_sex1 - s_sex
            if cfg.aft_features:
                x = covariates_from_rows(values, self.names, aft.covariate_names)
                s0, s1 = aft_survival(aft, age, x), aft_survival(aft, age + 1, x)
                values[:, ix["saft_at_age"]] = s0
                values[:, ix["saft_delta"]] = s1 - s0
        return FeatureMatrix(list(self.names), values, [w.patient_id for w in windows],
                             np.array([w.target for w in windows], dtype=int))


def covariates_from_rows(values: np.ndarray, names: Sequence[str],
                         covariate_names: Sequence[str] = AFT_COVARIATES) -> np.ndarray:
    """AFT covariate matrix from feature rows; missing values become 0."""
    idx = [list(names).index(c) for c in covariate_names]
    return np.nan_to_num(values[:, idx], nan=0.0)


def extract_features(window: LabeledWindow, km: Mapping[str, KMCurve] | None,
                     aft: AFTModel | None, config: FeatureConfig = FeatureConfig()) -> FeatureVector:
    fm = FeatureBuilder(config).transform([window], km, aft)
    return FeatureVector(fm.names, fm.values[0])


def aft_covariates_from_window(window: LabeledWindow) -> np.ndarray:
    """The seven AFT covariates in fixed order (sex, D00-D48, I00-I99, N40-N51 flags,
    service/all visit ratio, weeks since first visit, average weeks between visits)."""
    b = _COVARIATE_BUILDER
    row = b._raw_row(window)
    return covariates_from_rows(row[None, :], b.names)[0]


_COVARIATE_BUILDER = FeatureBuilder(FeatureConfig(km_features=False, aft_features=False))


def select_features(importances: Mapping[str, float], threshold: float = 1.0) -> list[str]:
    """Names whose importance is at least ``threshold``, in input order."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    kept = [n for n, v in importances.items() if v >= threshold]
    if not kept:
        warnings.warn(f"no feature reaches importance {threshold}", stacklevel=2)
    return kept


# --- files --------------------------------------------------------------------------------


def write_schema(schema: Sequence[FeatureSpec], path):
    Path(path).write_text(json.dumps([vars(f) for f in schema], indent=1) + "\n")


def read_schema(path) -> list[FeatureSpec]:
    return [FeatureSpec(**d) for d in json.loads(Path(path).read_text())]


def write_feature_matrix(fm: FeatureMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "target", *fm.names])
        targets = fm.targets if fm.targets is not None else [""] * len(fm.patient_ids)
        for pid, t, row in zip(fm.patient_ids, targets, fm.values):
            w.writerow([pid, t, *("" if np.isnan(v) else repr(float(v)) for v in row)])


def read_feature_matrix(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        ids, targets, rows = [], [], []
        for rec in r:
            ids.append(rec[0])
            targets.append(int(rec[1]) if rec[1] != "" else -1)
            rows.append([float(v) if v != "" else np.nan for v in rec[2:]])
    values = np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
    return FeatureMatrix(header[2:], values, ids, np.array(targets, dtype=int))
