"""From a simulated clinic to a screening list, step by step, in memory.

Run with ``python demos/walkthrough.py`` (about a minute). The CLI does the same with
files on disk: ``riskscreen init-reference --out ref && riskscreen pipeline --config
ref/run.json``.
"""
from datetime import date

import numpy as np

from riskscreen.boosting import TrainConfig, ablate_survival_features, predict_risk, train_gbdt
from riskscreen.cohort import build_windows, stratified_split, to_survival_observation
from riskscreen.features import AFT_COVARIATES, FeatureBuilder, FeatureConfig, covariates_from_rows
from riskscreen.metrics import average_precision, paired_bootstrap, roc_auc
from riskscreen.retro import RetroConfig, model_scorer, run_retro, truth_scorer, format_report
from riskscreen.survival import fit_aft_weibull, fit_kaplan_meier
from riskscreen.synth import PopulationSpec, generate_population

# 1. A population whose cancer hazard we know exactly.
spec = PopulationSpec(n_patients=6000, incidence=0.05, seed=3)
corpus = generate_population(spec)
print(f"{spec.n_patients} patients, {corpus.truth.event_in_span.sum()} with a C-code on record")

# 2. One labeled window per patient, then a split stratified by sex and age.
windows, excluded = build_windows(corpus.histories)
by_id = {w.patient_id: w for w in windows}
print(f"{len(windows)} windows, {len(excluded)} patients excluded "
      f"(e.g. {excluded[0][1]!r}), positives {np.mean([w.target for w in windows]):.3f}")
fractions = [("survival_train", 0.3), ("survival_test", 0.05), ("train", 0.35),
             ("validate", 0.1), ("test", 0.2)]
split = stratified_split([(w.patient_id, int(w.sex), w.age_at_pred) for w in windows],
                         fractions, seed=0)

# 3. Survival models on their own sample; AFT covariates are read off each window.
base = FeatureBuilder(FeatureConfig(km_features=False, aft_features=False))


def observations(ids):
    fm = base.transform([by_id[i] for i in ids])
    X = covariates_from_rows(fm.values, fm.names, AFT_COVARIATES)
    return [to_survival_observation(corpus.histories[i], covariates=X[k], left_truncate=True)
            for k, i in enumerate(ids)]


surv = observations(split["survival_train"])
km = {c: fit_kaplan_meier(surv, c, use_entry=True) for c in ("All", "Male", "Female")}
aft = fit_aft_weibull(surv, list(AFT_COVARIATES), use_entry=True)
for age in (40, 60):
    print(f"KM at age {age}: male {km['Male'](age):.3f}, female {km['Female'](age):.3f}")
for name, b in zip(aft.covariate_names, aft.coefficients):
    print(f"  AFT {name:<26}{b:+.3f}")

# 4. Features with and without the survival block, boosted trees on each.
builder = FeatureBuilder()
F = {s: builder.transform([by_id[i] for i in split[s]], km, aft)
     for s in ("train", "validate", "test")}
keep = [f.name for f in ablate_survival_features(builder.schema)]
cfg = TrainConfig(max_depth=3, n_rounds=200, early_stopping=30)
full = train_gbdt(F["train"], F["validate"], cfg)
abl = train_gbdt(F["train"].select(keep), F["validate"].select(keep), cfg)
y = F["test"].targets
s_full, s_abl = predict_risk(full, F["test"]), predict_risk(abl, F["test"].select(keep))
print(f"test AP: full {average_precision(s_full, y):.3f}, "
      f"without survival features {average_precision(s_abl, y):.3f}, "
      f"prevalence {y.mean():.3f}; ROC AUC full {roc_auc(s_full, y):.3f}")
cmp = paired_bootstrap("average_precision", s_full, s_abl, y, n_boot=500, seed=0)
print(f"one-sided paired bootstrap p = {cmp['p_value']:.3f}")

# 5. Screening at a fixed date: model vs oldest-first vs the true risk.
rc = RetroConfig(t_pred=date(2021, 12, 31), top_k=(100, 300), min_group_size=100)
report = run_retro(corpus.histories, model_scorer(full, builder, km, aft), rc)
print()
print(format_report(report))
ideal = run_retro(corpus.histories, truth_scorer(corpus.truth, rc.t_pred), rc)
print(f"\nwith the true hazard as the score: {ideal.rate('model', 300):.1%} at k=300")
