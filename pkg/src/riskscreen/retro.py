"""Out-of-time screening experiment.

Patients are scored at a fixed prediction date from the data available up to that date, the
k highest-risk ones are selected, and a target-block diagnosis in (t_pred, t_pred + delta]
counts as a confirmed case. The same is done for a traditional selection rule so the two can
be compared overall, by age group and by tumour site.

The traditional rule in this module is a stand-in: the examination protocol it imitates is
not published, so the default ranks patients by age (incidence rises with age) and breaks
ties with a seeded shuffle. Any other rule can be passed in.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from dateutil.relativedelta import relativedelta

from .cohort import TARGET_BLOCK, LabeledWindow, WindowConfig, window_at
from .ehr import IcdBlock, PatientHistory
from .errors import HorizonError, WindowError
from .metrics import cumulative_hits, precision_at_top_curve, rank_order

NOSOLOGY_BLOCKS = (
    IcdBlock("C00-C14", "C00", "C14"),  # lip, oral cavity and pharynx
    IcdBlock("C15-C26", "C15", "C26"),  # digestive organs
    IcdBlock("C30-C39", "C30", "C39"),  # respiratory and intrathoracic organs
    IcdBlock("C40-C41", "C40", "C41"),  # bone and articular cartilage
    IcdBlock("C43-C44", "C43", "C44"),  # skin
    IcdBlock("C45-C49", "C45", "C49"),  # mesothelial and soft tissue
    IcdBlock("C50", "C50", "C50"),  # breast
    IcdBlock("C51-C68", "C51", "C68"),  # genitourinary
    IcdBlock("C69-C72", "C69", "C72"),  # eye, brain, CNS
    IcdBlock("C73-C75", "C73", "C75"),  # thyroid and endocrine glands
    IcdBlock("C76-C80", "C76", "C80"),  # ill-defined, secondary, unspecified
    IcdBlock("C81-C96", "C81", "C96"),  # lymphoid and haematopoietic
    IcdBlock("C97", "C97", "C97"),  # independent multiple sites
)

Scorer = Callable[[Sequence[LabeledWindow]], np.ndarray]
Baseline = Callable[[Sequence[LabeledWindow], int], np.ndarray]


@dataclass(frozen=True)
class RetroConfig:
    t_pred: date
    delta_pred: int = 12
    delta_obs: int = 24
    top_k: tuple[int, ...] = (100, 1000)
    age_edges: tuple[float, ...] = (35, 45, 55, 65, 75)
    baseline: str = "age"
    seed: int = 0
    curve_step: int = 50
    min_group_size: int = 200  # groups below this size are reported but not gated

    def __post_init__(self):
        if isinstance(self.t_pred, str):
            object.__setattr__(self, "t_pred", date.fromisoformat(self.t_pred))
        object.__setattr__(self, "top_k", tuple(int(k) for k in self.top_k))
        object.__setattr__(self, "age_edges", tuple(float(a) for a in self.age_edges))
        if any(k < 1 for k in self.top_k):
            raise ValueError("top_k values must be positive")
        if any(b <= a for a, b in zip(self.age_edges, self.age_edges[1:])):
            raise ValueError("age edges must be strictly ascending")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; known: {sorted(BASELINES)}")

    @property
    def t_end(self) -> date:
        return self.t_pred + relativedelta(months=self.delta_pred)

    def to_dict(self):
        d = asdict(self)
        d["t_pred"] = self.t_pred.isoformat()
        d["top_k"] = list(self.top_k)
        d["age_edges"] = list(self.age_edges)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RetroConfig":
        return cls(**d)


def traditional_baseline_rank(windows: Sequence[LabeledWindow], seed: int = 0) -> np.ndarray:
    """Indices in selection order: oldest first, equal ages in seeded random order."""
    age = np.array([w.age_at_pred for w in windows], dtype=float)
    tiebreak = np.random.default_rng(seed).permutation(len(age))
    return np.lexsort((tiebreak, -age))


def _rank_scores(order: np.ndarray) -> np.ndarray:
    """Turn a selection order into strictly decreasing scores."""
    s = np.empty(len(order))
    s[order] = np.arange(len(order), 0, -1, dtype=float)
    return s


def age_baseline(windows, seed):
    return _rank_scores(traditional_baseline_rank(windows, seed))


def random_baseline(windows, seed):
    return _rank_scores(np.random.default_rng(seed).permutation(len(windows)))


BASELINES: dict[str, Baseline] = {"age": age_baseline, "random": random_baseline}


def _block_of(code: str, blocks) -> str:
    for b in blocks:
        if code in b:
            return b.label
    return "other"


def nosology_breakdown(codes: Sequence[str], blocks: Sequence[IcdBlock] = NOSOLOGY_BLOCKS) -> dict:
    """Count confirmed patients per block from each one's first in-horizon target code."""
    out = {b.label: 0 for b in blocks}
    for c in codes:
        lab = _block_of(c, blocks)
        out[lab] = out.get(lab, 0) + 1
    return out


def _first_code_in(history: PatientHistory, lo: date, hi: date, block: IcdBlock):
    for ev in history.events:
        if ev.is_diagnosis and lo < ev.event_date <= hi and ev.code in block:
            return ev.code
    return None


def _age_labels(edges):
    labels = [f"<{edges[0]:g}"]
    labels += [f"{a:g}-{b:g}" for a, b in zip(edges, edges[1:])]
    labels.append(f"{edges[-1]:g}+")
    return labels


@dataclass
class Eligible:
    windows: list[LabeledWindow]
    labels: np.ndarray
    first_codes: list[str | None]
    excluded: list[tuple[str, str]]


def eligible_population(histories: Mapping[str, PatientHistory] | Sequence[PatientHistory],
                        config: RetroConfig) -> Eligible:
    """Patients cancer-free at t_pred with at least one event in the observation window."""
    items = list(histories.values()) if isinstance(histories, Mapping) else list(histories)
    last = max((h.last_event_date for h in items if h.events), default=None)
    if last is None:
        raise HorizonError("corpus has no events")
    if config.t_end > last:
        raise HorizonError(f"horizon ends {config.t_end} but the data stop at {last}; "
                           f"choose t_pred on or before {last - relativedelta(months=config.delta_pred)}")
    wcfg = WindowConfig(delta_obs=config.delta_obs, delta_pred=config.delta_pred)
    windows, codes, excluded = [], [], []
    for h in items:
        try:
            w = window_at(h, config.t_pred, wcfg)
        except WindowError as exc:
            excluded.append((exc.patient_id, exc.reason))
            continue
        windows.append(w)
        codes.append(_first_code_in(h, config.t_pred, config.t_end, TARGET_BLOCK))
    labels = np.array([w.target for w in windows], dtype=int)
    return Eligible(windows, labels, codes, excluded)


@dataclass
class RetroReport:
    config: dict
    n_eligible: int
    n_excluded: int
    n_confirmed: int
    prevalence: float
    top_k: dict  # method -> k -> {"selected", "confirmed", "rate"}
    age_groups: list  # one dict per age group
    nosology: dict  # method -> k -> block -> count
    curve: dict  # method -> rows (k, precision, ci_low, ci_high)
    baseline_note: str = ("traditional selection is a proxy (oldest first); the examination "
                          "protocol it stands for is not specified")

    def to_dict(self):
        return asdict(self)

    def rate(self, method: str, k: int) -> float:
        return self.top_k[method][str(k)]["rate"]

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "retro_report.json", "curve": out / "retro_curve.csv",
                 "age_groups": out / "retro_age_groups.csv", "nosology": out / "retro_nosology.csv",
                 "text": out / "retro_report.txt"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with paths["curve"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "precision", "ci_low", "ci_high"])
            for method, rows in self.curve.items():
                for r in rows:
                    w.writerow([method, *r])
        with paths["age_groups"].open("w", newline="") as fh:
            cols = list(self.age_groups[0]) if self.age_groups else []
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(self.age_groups)
        with paths["nosology"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "block", "count"])
            for method, by_k in self.nosology.items():
                for k, counts in by_k.items():
                    for block, c in counts.items():
                        w.writerow([method, k, block, c])
        paths["text"].write_text(format_report(self) + "\n")
        return paths


def format_report(report: RetroReport) -> str:
    lines = [f"eligible {report.n_eligible}, excluded {report.n_excluded}, "
             f"confirmed {report.n_confirmed} ({100 * report.prevalence:.2f}%)", ""]
    lines.append(f"{'method':<10}{'k':>7}{'confirmed':>11}{'rate':>9}")
    for method, by_k in report.top_k.items():
        for k, r in by_k.items():
            lines.append(f"{method:<10}{k:>7}{r['confirmed']:>11}{100 * r['rate']:>8.1f}%")
    lines += ["", f"{'age':<8}{'n':>7}{'TE':>8}{'k':>6}{'model':>8}{'oldest':>8}"]
    for g in report.age_groups:
        lines.append(f"{g['group']:<8}{g['n']:>7}{100 * g['prevalence']:>7.1f}%{g['k']:>6}"
                     f"{100 * g['model_rate']:>7.1f}%{100 * g['baseline_rate']:>7.1f}%")
    k_max = max(next(iter(report.nosology.values())), key=int)
    lines += ["", f"sites among confirmed at k={k_max}"]
    methods = list(report.nosology)
    lines.append(f"{'block':<10}" + "".join(f"{m:>10}" for m in methods))
    for block in report.nosology[methods[0]][k_max]:
        lines.append(f"{block:<10}" + "".join(f"{report.nosology[m][k_max][block]:>10}"
                                              for m in methods))
    lines += ["", report.baseline_note]
    return "\n".join(lines)


def _curve_ks(n, top_k, step):
    ks = set(range(step, n + 1, step)) | {k for k in top_k if k <= n} | {1, n}
    return sorted(ks)


def run_retro(histories, scorer: Scorer, config: RetroConfig,
              baseline: Baseline | None = None) -> RetroReport:
    """Score the eligible population at t_pred and compare TOP-k selections with the baseline."""
    pop = eligible_population(histories, config)
    n = len(pop.windows)
    if n == 0:
        raise ValueError("no eligible patients at t_pred")
    too_big = [k for k in config.top_k if k > n]
    if too_big:
        raise ValueError(f"top_k {too_big} exceed the eligible population of {n}")
    y = pop.labels
    scores = {"model": np.asarray(scorer(pop.windows), dtype=float),
              "baseline": (baseline or BASELINES[config.baseline])(pop.windows, config.seed)}
    if scores["model"].shape != (n,):
        raise ValueError("scorer must return one score per window")

    top, noso, curve = {}, {}, {}
    for method, s in scores.items():
        order = rank_order(s)
        hits = cumulative_hits(s, y)
        top[method], noso[method] = {}, {}
        for k in config.top_k:
            c = int(hits[k - 1])
            top[method][str(k)] = {"selected": k, "confirmed": c, "rate": c / k}
            codes = [pop.first_codes[i] for i in order[:k] if y[i]]
            noso[method][str(k)] = nosology_breakdown(codes)
        curve[method] = [list(r) for r in precision_at_top_curve(
            s, y, _curve_ks(n, config.top_k, config.curve_step))]

    groups = _age_groups(pop, scores, config, n)
    return RetroReport(config.to_dict(), n, len(pop.excluded), int(y.sum()), float(y.mean()),
                       top, groups, noso, curve)


def _age_groups(pop: Eligible, scores, config: RetroConfig, n: int) -> list[dict]:
    """Per age group: the group's share of the largest k is selected within the group.

    ``prevalence`` is the share of confirmed cases in the whole group (what blanket
    examination of the group would find); ``model_rate`` and ``baseline_rate`` are the rates
    among the group's top patients under each ranking.
    """
    k_total = max(config.top_k)
    age = np.array([w.age_at_pred for w in pop.windows])
    gid = np.digitize(age, config.age_edges)
    out = []
    for g, label in enumerate(_age_labels(config.age_edges)):
        idx = np.flatnonzero(gid == g)
        if idx.size == 0:
            continue
        y = pop.labels[idx]
        k = int(min(idx.size, max(1, round(k_total * idx.size / n))))
        rates = {}
        for method, s in scores.items():
            rates[method] = float(y[rank_order(s[idx])[:k]].sum() / k)
        out.append({"group": label, "n": int(idx.size), "confirmed": int(y.sum()),
                    "prevalence": float(y.mean()), "k": k, "model_rate": rates["model"],
                    "baseline_rate": rates["baseline"],
                    "gated": bool(idx.size >= config.min_group_size)})
    return out


def age_gate(report: RetroReport) -> bool:
    """Model rate above the group prevalence in every gated age group."""
    return all(g["model_rate"] > g["prevalence"] for g in report.age_groups if g["gated"])


def model_scorer(model, builder, km=None, aft=None) -> Scorer:
    """Scorer from a fitted classifier and the feature builder it was trained with."""
    from .boosting import predict_risk

    def score(windows):
        return predict_risk(model, builder.transform(windows, km, aft))

    return score


def truth_scorer(truth, t_pred: date, delta_pred: int = 12) -> Scorer:
    """Scorer returning the true horizon probability recorded in a synthetic truth table."""
    index = {p: i for i, p in enumerate(truth.patient_ids)}
    prob = truth.horizon_probability(t_pred, delta_pred)

    def score(windows):
        return np.array([prob[index[w.patient_id]] for w in windows])

    return score
