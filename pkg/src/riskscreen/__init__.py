"""Cancer-risk ranking from longitudinal EHR event streams.

Survival models (Kaplan-Meier, Weibull AFT) fitted on a held-out sample turn
each patient's history into risk features, and a gradient-boosted tree ranker
orders patients for referral. Submodules are imported lazily by the CLI; the
common entry points are re-exported here.
"""
from .errors import RiskScreenError
from .ehr import EventRecord, PatientHistory, read_ehr, write_ehr
from .cohort import WindowConfig, build_windows, label_patient, stratified_split
from .survival import AFTModel, fit_aft, fit_kaplan_meier, kaplan_meier
from .features import FeatureBuilder, FeatureConfig
from .boosting import TrainConfig, predict_risk, train_gbdt
from .metrics import average_precision, nns_to_rate, precision_at_top, roc_auc
from .synth import PopulationSpec, generate_population

__version__ = "0.1.0"
