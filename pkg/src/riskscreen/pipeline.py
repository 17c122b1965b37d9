"""End-to-end run: split, survival fits, features, boosting, evaluation, retro report.

Every stage reads its inputs from and writes its outputs to one run directory, so stages can
be run one at a time (as the CLI subcommands do) or chained. Nothing time-dependent goes into
the artifacts; a rerun with the same configuration reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .boosting import (GBDTModel, TrainConfig, aft_as_classifier, gain_importance, predict_risk,
                       train_gbdt, write_training_log)
from .cohort import (DEFAULT_AGE_EDGES, LabeledWindow, SurvivalObservation, WindowConfig,
                     build_windows, homogeneity_censored, homogeneity_multivariate,
                     stratified_split, to_survival_observation)
from .ehr import PatientHistory, read_ehr
from .errors import PipelineError, RiskScreenError, SchemaError
from .features import (AFT_COVARIATES, FeatureBuilder, FeatureConfig, ablate_schema,
                       covariates_from_rows, read_feature_matrix, write_feature_matrix,
                       write_schema)
from .metrics import (average_precision, metric_summary, paired_bootstrap, precision_at_top,
                      precision_at_top_curve)
from .retro import RetroConfig, model_scorer, run_retro
from .survival import (AFTModel, aft_diagnostics, fit_aft_weibull, fit_kaplan_meier, read_km_csv,
                       write_km_csv)

SAMPLES = ("survival_train", "survival_test", "train", "validate", "test")
MODEL_SAMPLES = ("train", "validate", "test")
TABLE_III_FRACTIONS = (("survival_train", 0.07), ("survival_test", 0.07), ("train", 0.40),
                       ("validate", 0.23), ("test", 0.23))


class ConfigError(SchemaError):
    """Invalid run configuration (a usage error rather than a runtime failure)."""


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple = TABLE_III_FRACTIONS
    age_edges: tuple = DEFAULT_AGE_EDGES
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple((str(n), float(w)) for n, w in self.fractions))
        object.__setattr__(self, "age_edges", tuple(float(a) for a in self.age_edges))
        names = [n for n, _ in self.fractions]
        if sorted(names) != sorted(SAMPLES):
            raise ConfigError(f"split must define exactly the samples {list(SAMPLES)}")


@dataclass(frozen=True)
class HomogeneityConfig:
    n_permutations: int = 1000
    max_points: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class SurvivalConfig:
    family: str = "weibull"
    left_truncate: bool = True


@dataclass(frozen=True)
class EvaluateConfig:
    n_bootstrap: int = 1000
    level: float = 0.95
    seed: int = 0
    top_k: tuple = (100, 1000)
    curve_step: int = 10

    def __post_init__(self):
        object.__setattr__(self, "top_k", tuple(int(k) for k in self.top_k))


@dataclass
class RunConfig:
    corpus: str
    out_dir: str = "run"
    window: WindowConfig = field(default_factory=WindowConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    homogeneity: HomogeneityConfig = field(default_factory=HomogeneityConfig)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)
    features: dict = field(default_factory=lambda: {"km_features": True, "aft_features": True})
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablation: bool = True
    retro: dict | None = None  # RetroConfig fields plus "corpus"
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    _SECTIONS = {"window": WindowConfig, "split": SplitConfig, "homogeneity": HomogeneityConfig,
                 "survival": SurvivalConfig, "train": TrainConfig, "evaluate": EvaluateConfig}

    @classmethod
    def from_dict(cls, d: Mapping, base_dir=".") -> "RunConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "corpus" not in d:
            raise ConfigError("config needs a 'corpus' path")
        kw = dict(d)
        try:
            for name, typ in cls._SECTIONS.items():
                if name in kw:
                    sub = dict(kw[name])
                    bad = set(sub) - {f.name for f in fields(typ)}
                    if bad:
                        raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
                    kw[name] = typ(**sub)
            if "features" in kw:
                bad = set(kw["features"]) - {"km_features", "aft_features", "horizons"}
                if bad:
                    raise ConfigError(f"unknown keys in section 'features': {sorted(bad)}")
            cfg = cls(**kw, base_dir=Path(base_dir))
            cfg.feature_config()
            cfg.retro_config()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        d = {"corpus": self.corpus, "out_dir": self.out_dir}
        for name in self._SECTIONS:
            sec = asdict(getattr(self, name))
            if name == "window":
                sec.pop("target_block")
            d[name] = sec
        d["features"] = dict(self.features)
        d["ablation"] = self.ablation
        d["retro"] = self.retro
        return json.loads(json.dumps(d))

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path(self.out_dir)

    def feature_config(self) -> FeatureConfig:
        f = self.features
        kw = {k: f[k] for k in ("km_features", "aft_features") if k in f}
        if "horizons" in f:
            kw["horizons"] = tuple(f["horizons"])
        return FeatureConfig(**kw)

    def retro_config(self) -> RetroConfig | None:
        if not self.retro:
            return None
        kw = {k: v for k, v in self.retro.items() if k != "corpus"}
        kw.setdefault("delta_pred", self.window.delta_pred)
        kw.setdefault("delta_obs", self.window.delta_obs)
        return RetroConfig(**kw)

    @property
    def survival_features(self) -> bool:
        return self.feature_config().survival

    def seeds(self) -> dict:
        s = {"split": self.split.seed, "homogeneity": self.homogeneity.seed,
             "train": self.train.seed, "bootstrap": self.evaluate.seed}
        if self.retro:
            s["retro"] = self.retro_config().seed
        return s


# --- run directory ------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Run directory plus lazily loaded corpus and survival models."""

    def __init__(self, config: RunConfig, force: bool = False):
        self.config = config
        self.out = config.out
        self.force = force
        self._histories = None
        self._windows = None

    def file(self, name) -> Path:
        return self.out / name

    def claim(self, names):
        """Refuse to overwrite existing outputs unless forced."""
        existing = [n for n in names if self.file(n).exists()]
        if existing and not self.force:
            raise FileExistsError(f"{self.out} already holds {', '.join(existing)}; "
                                  "use --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)

    def require(self, name) -> Path:
        p = self.file(name)
        if not p.exists():
            raise FileNotFoundError(f"missing {p}; run the stage that produces it first")
        return p

    @property
    def histories(self) -> dict[str, PatientHistory]:
        if self._histories is None:
            self._histories = read_ehr(self.config.path(self.config.corpus))
        return self._histories

    @property
    def windows(self):
        if self._windows is None:
            w, ex = build_windows(self.histories, self.config.window)
            self._windows = ({x.patient_id: x for x in w}, ex)
        return self._windows

    def split(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s: [] for s in SAMPLES}
        with self.require("split_manifest.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                out[row["sample"]].append(row["patient_id"])
        return out

    def survival_models(self):
        km = read_km_csv(self.require("km_curves.csv"))
        aft = AFTModel.load(self.require("aft_model.json"))
        return km, aft

    def record(self, names):
        """Add artifact hashes to manifest.json (created on first use)."""
        path = self.file("manifest.json")
        if path.exists():
            manifest = json.loads(path.read_text())
        else:
            manifest = {"artifacts": {}}
        manifest["config"] = self.config.to_dict()
        manifest["seeds"] = self.config.seeds()
        for n in names:
            manifest["artifacts"][n] = sha256_file(self.file(n))
        if "split_manifest.csv" in names:
            manifest["samples"] = {s: len(ids) for s, ids in self.split().items()}
        manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
        path.write_text(json.dumps(manifest, indent=2) + "\n")


def _base_builder():
    return FeatureBuilder(FeatureConfig(km_features=False, aft_features=False))


def survival_observations(run: Run, ids) -> list[SurvivalObservation]:
    """Survival records with the AFT covariates measured on each patient's window."""
    W, _ = run.windows
    windows = [W[i] for i in ids]
    fm = _base_builder().transform(windows)
    X = covariates_from_rows(fm.values, fm.names, AFT_COVARIATES)
    return [to_survival_observation(run.histories[i], run.config.window, X[k],
                                    run.config.survival.left_truncate)
            for k, i in enumerate(ids)]


# --- stages -------------------------------------------------------------------------------


def stage_split(run: Run) -> list[str]:
    names = ["split_manifest.csv", "exclusions.csv", "homogeneity.json"]
    run.claim(names)
    cfg = run.config
    W, excluded = run.windows
    triples = [(w.patient_id, int(w.sex), w.age_at_pred) for w in W.values()]
    samples = stratified_split(triples, cfg.split.fractions, cfg.split.age_edges, cfg.split.seed)
    with run.file("split_manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "sample", "sex", "age_at_pred", "target"])
        for name in SAMPLES:
            for pid in sorted(samples[name]):
                x = W[pid]
                w.writerow([pid, name, int(x.sex), repr(x.age_at_pred), x.target])
    with run.file("exclusions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "reason"])
        w.writerows(sorted(excluded))

    pooled_ids = sorted(W)
    pooled_xy = [(int(W[p].sex), W[p].age_at_pred) for p in pooled_ids]
    pooled_obs = survival_observations(run, pooled_ids)
    obs_of = dict(zip(pooled_ids, pooled_obs))
    h = cfg.homogeneity
    report = {"sizes": {s: len(samples[s]) for s in SAMPLES}, "tests": {}}
    for i, name in enumerate(SAMPLES):
        ids = sorted(samples[name])
        mv = homogeneity_multivariate([(int(W[p].sex), W[p].age_at_pred) for p in ids], pooled_xy,
                                      h.n_permutations, h.seed + i, h.max_points)
        cs = homogeneity_censored([obs_of[p] for p in ids], pooled_obs)
        report["tests"][name] = {"multivariate": mv.to_dict(), "censored": cs.to_dict()}
    report["min_p_value"] = min(min(t["multivariate"]["p_value"], t["censored"]["p_value"])
                                for t in report["tests"].values())
    run.file("homogeneity.json").write_text(json.dumps(report, indent=2) + "\n")
    return names


def stage_fit_survival(run: Run) -> list[str]:
    names = ["km_curves.csv", "aft_model.json"]
    run.claim(names)
    samples = run.split()
    train = survival_observations(run, samples["survival_train"])
    test = survival_observations(run, samples["survival_test"])
    lt = run.config.survival.left_truncate
    curves = [fit_kaplan_meier(train, c, lt) for c in ("All", "Male", "Female")]
    write_km_csv(curves, run.file("km_curves.csv"))
    aft = fit_aft_weibull(train, list(AFT_COVARIATES), run.config.survival.family, use_entry=lt)
    diag = aft_diagnostics(aft, train, test, use_entry=lt)
    diag["n_train"], diag["n_events_train"] = len(train), int(sum(o.event for o in train))
    aft.diagnostics = diag
    aft.save(run.file("aft_model.json"))
    return names


def _builder(run: Run) -> FeatureBuilder:
    return FeatureBuilder(run.config.feature_config())


def stage_featurize(run: Run) -> list[str]:
    names = ["feature_schema.json"] + [f"features_{s}.csv" for s in MODEL_SAMPLES]
    run.claim(names)
    b = _builder(run)
    km, aft = run.survival_models() if run.config.survival_features else (None, None)
    W, _ = run.windows
    samples = run.split()
    write_schema(b.schema, run.file("feature_schema.json"))
    for s in MODEL_SAMPLES:
        fm = b.transform([W[p] for p in samples[s]], km, aft)
        write_feature_matrix(fm, run.file(f"features_{s}.csv"))
    return names


def _variants(run: Run) -> dict[str, list[str] | None]:
    """Model name -> feature subset (None = all columns)."""
    cfg = run.config
    if not cfg.survival_features:
        return {"ablation": None}
    out = {"full": None}
    if cfg.ablation:
        out["ablation"] = [f.name for f in ablate_schema(_builder(run).schema)]
    return out


def _load_features(run: Run, sample: str, subset):
    fm = read_feature_matrix(run.require(f"features_{sample}.csv"))
    return fm if subset is None else fm.select(subset)


def stage_train(run: Run) -> list[str]:
    variants = _variants(run)
    names = []
    for v in variants:
        names += [f"gbdt_{v}.json", f"training_log_{v}.csv", f"importance_{v}.csv"]
    run.claim(names)
    for v, subset in variants.items():
        log: list = []
        model = train_gbdt(_load_features(run, "train", subset),
                           _load_features(run, "validate", subset), run.config.train, log)
        model.save(run.file(f"gbdt_{v}.json"))
        write_training_log(log, run.file(f"training_log_{v}.csv"))
        with run.file(f"importance_{v}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "gain_share"])
            for name, g in sorted(gain_importance(model).items(), key=lambda kv: (-kv[1], kv[0])):
                w.writerow([name, repr(float(g))])
    return names


def stage_evaluate(run: Run) -> list[str]:
    names = ["metrics.json", "precision_at_top.csv", "scores_test.csv"]
    run.claim(names)
    ev = run.config.evaluate
    variants = _variants(run)
    test = read_feature_matrix(run.require("features_test.csv"))
    y = test.targets
    scores = {}
    for v, subset in variants.items():
        model = GBDTModel.load(run.require(f"gbdt_{v}.json"))
        scores[v] = predict_risk(model, test if subset is None else test.select(subset))
    if run.config.survival_features:
        _, aft = run.survival_models()
        scores["aft"] = aft_as_classifier(aft, test)
    ks = [k for k in ev.top_k if k <= len(y)]
    report = {"n_test": len(y), "n_positive": int(y.sum()), "prevalence": float(y.mean()),
              "models": {}}
    for v, s in scores.items():
        summ = metric_summary(s, y, ev.n_bootstrap, ev.level, ev.seed)
        summ["precision_at_top"] = {str(k): precision_at_top(s, y, k) for k in ks}
        report["models"][v] = summ
    if "full" in scores and "ablation" in scores:
        report["full_vs_ablation"] = paired_bootstrap(average_precision, scores["full"],
                                                      scores["ablation"], y, ev.n_bootstrap,
                                                      ev.seed)
    run.file("metrics.json").write_text(json.dumps(report, indent=2) + "\n")

    grid = sorted(set(range(ev.curve_step, len(y) + 1, ev.curve_step)) | set(ks) | {1, len(y)})
    with run.file("precision_at_top.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "k", "precision", "ci_low", "ci_high"])
        for v, s in scores.items():
            for row in precision_at_top_curve(s, y, grid, ev.level):
                w.writerow([v, *row])
    with run.file("scores_test.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "target", *scores])
        for i, pid in enumerate(test.patient_ids):
            w.writerow([pid, int(y[i]), *(repr(float(s[i])) for s in scores.values())])
    return names


def stage_retro(run: Run) -> list[str]:
    rc = run.config.retro_config()
    if rc is None:
        raise SchemaError("config has no 'retro' section")
    names = ["retro_report.json", "retro_curve.csv", "retro_age_groups.csv",
             "retro_nosology.csv", "retro_report.txt"]
    run.claim(names)
    corpus = run.config.retro.get("corpus", run.config.corpus)
    histories = read_ehr(run.config.path(corpus))
    primary = "full" if run.config.survival_features else "ablation"
    model = GBDTModel.load(run.require(f"gbdt_{primary}.json"))
    km, aft = run.survival_models() if run.config.survival_features else (None, None)
    report = run_retro(histories, model_scorer(model, _builder(run), km, aft), rc)
    report.save(run.out)
    return names


def stage_report(run: Run) -> list[str]:
    names = ["report.txt"]
    run.claim(names)
    run.file("report.txt").write_text(render_report(run.out) + "\n")
    return names


def render_report(out: Path) -> str:
    out = Path(out)
    lines = []
    hp = out / "homogeneity.json"
    if hp.exists():
        h = json.loads(hp.read_text())
        lines.append("samples")
        for s, n in h["sizes"].items():
            t = h["tests"][s]
            lines.append(f"  {s:<15}{n:>8}  p(sex, age)={t['multivariate']['p_value']:.3f}  "
                         f"p(log-rank)={t['censored']['p_value']:.3f}")
    ap = out / "aft_model.json"
    if ap.exists():
        d = json.loads(ap.read_text())
        diag = d.get("diagnostics", {})
        lines += ["", f"AFT ({d['family']}): lambda={d['baseline']['lambda']:.4g} "
                      f"rho={d['baseline']['rho']:.4g} AIC={diag.get('aic', float('nan')):.2f} "
                      f"C-index={diag.get('c_index', float('nan')):.3f}"]
        for n, c in d["beta"]["coefficients"].items():
            lines.append(f"  {n:<28}{c:>9.4f}  p={diag.get('p_value', {}).get(n, float('nan')):.3g}")
    mp = out / "metrics.json"
    if mp.exists():
        m = json.loads(mp.read_text())
        lines += ["", f"test: n={m['n_test']} positives={m['n_positive']}",
                  f"  {'model':<10}{'AP':>8}{'95% CI':>18}{'ROC AUC':>10}"]
        for v, r in m["models"].items():
            a, u = r["average_precision"], r["roc_auc"]
            lines.append(f"  {v:<10}{a['value']:>8.3f}   [{a['ci_low']:.3f}, {a['ci_high']:.3f}]"
                         f"{u['value']:>10.3f}")
        if "full_vs_ablation" in m:
            c = m["full_vs_ablation"]
            lines.append(f"  full - ablation AP: {c['mean_difference']:+.4f} "
                         f"(one-sided paired bootstrap p={c['p_value']:.4f})")
    rp = out / "retro_report.txt"
    if rp.exists():
        lines += ["", "retrospective screening", rp.read_text().rstrip()]
    return "\n".join(lines) if lines else "no artifacts found"


STAGES = {
    "split": stage_split,
    "fit-survival": stage_fit_survival,
    "featurize": stage_featurize,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "retro": stage_retro,
    "report": stage_report,
}


def run_stage(run: Run, name: str) -> list[str]:
    try:
        names = STAGES[name](run)
    except (RiskScreenError, ValueError, OSError) as exc:
        if isinstance(exc, (FileExistsError, SchemaError)):
            raise
        raise PipelineError(name, exc) from exc
    run.record(names)
    return names


def run_pipeline(config: RunConfig, force: bool = False) -> dict:
    """Run every stage in order; returns the manifest."""
    run = Run(config, force)
    if run.file("manifest.json").exists() and not force:
        raise FileExistsError(f"{run.out} already holds a run; use --force to overwrite")
    if force and run.file("manifest.json").exists():
        run.file("manifest.json").unlink()
    order = ["split", "fit-survival", "featurize", "train", "evaluate"]
    if config.retro:
        order.append("retro")
    order.append("report")
    for stage in order:
        if stage == "fit-survival" and not config.survival_features:
            continue
        run_stage(run, stage)
    return json.loads(run.file("manifest.json").read_text())
