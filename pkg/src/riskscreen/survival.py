"""Kaplan-Meier product-limit curves, parametric AFT regression and concordance.

The AFT model used throughout is

    S(t | x) = S0(t * exp(b0 + x . beta)),

with a Weibull baseline S0(u) = exp(-(u / scale)**shape) by default, or a log-logistic one
S0(u) = 1 / (1 + (u / scale)**shape). A larger linear predictor speeds up time, so it
means an earlier expected event; the linear predictor doubles as a risk score.

Fitting works on theta = (log scale, log shape, beta_1..beta_p). The intercept b0 is not
identifiable next to the scale and is held at zero while fitting; a model loaded from a file
may carry a non-zero intercept.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

from .cohort import SurvivalObservation
from .ehr import Sex
from .errors import (ConvergenceError, NotFittedError, RankDeficientError,
                     UndefinedStatisticError)

COHORTS = ("All", "Male", "Female")


# --- Kaplan-Meier -------------------------------------------------------------------------


@dataclass(frozen=True)
class KMCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    cohort: str = "All"

    def __call__(self, t):
        return km_survival_at(self, t)


def kaplan_meier(time, event, entry=None, cohort: str = "All") -> KMCurve:
    """Product-limit estimate over distinct event times.

    A subject is at risk at t_j when entry < t_j <= time, so censored subjects leave the risk
    set only after their own time and create no step.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if time.size == 0:
        raise ValueError("no observations")
    ev_times = np.unique(time[event == 1])
    s_time = np.sort(time)
    at_risk = len(time) - np.searchsorted(s_time, ev_times, side="left")
    if entry is not None:
        entry = np.asarray(entry, dtype=float)
        if np.any(entry >= time):
            raise ValueError("entry must precede the event/censoring time")
        at_risk = at_risk - (len(entry) - np.searchsorted(np.sort(entry), ev_times, side="left"))
    d = np.bincount(np.searchsorted(ev_times, time[event == 1]), minlength=len(ev_times))
    surv = np.cumprod(1.0 - d / at_risk)
    return KMCurve(ev_times, surv, at_risk, d, cohort)


def fit_kaplan_meier(observations: Sequence[SurvivalObservation], cohort: str = "All",
                     use_entry: bool = False) -> KMCurve:
    """Fit one of the cohort curves ("All", "Male" or "Female") from survival observations."""
    if cohort not in COHORTS:
        raise ValueError(f"unknown cohort {cohort!r}")
    if cohort != "All":
        want = Sex.MALE if cohort == "Male" else Sex.FEMALE
        observations = [o for o in observations if o.sex == want]
    if not observations:
        raise ValueError(f"no observations in cohort {cohort}")
    time = [o.time for o in observations]
    event = [o.event for o in observations]
    entry = [o.entry for o in observations] if use_entry else None
    return kaplan_meier(time, event, entry, cohort)


def km_survival_at(curve: KMCurve, t):
    """Right-continuous step evaluation; 1 before the first event time."""
    t_arr = np.asarray(t, dtype=float)
    idx = np.searchsorted(curve.times, t_arr, side="right")
    padded = np.concatenate([[1.0], curve.survival])
    out = padded[idx]
    return float(out) if out.ndim == 0 else out


def write_km_csv(curves: Sequence[KMCurve], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "survival", "n_at_risk", "d_events", "cohort"])
        for c in curves:
            for row in zip(c.times, c.survival, c.at_risk, c.events):
                w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3]),
                            c.cohort])


def read_km_csv(path) -> dict[str, KMCurve]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["cohort"], []).append(r)
    out = {}
    for cohort, rs in rows.items():
        out[cohort] = KMCurve(np.array([float(r["t"]) for r in rs]),
                              np.array([float(r["survival"]) for r in rs]),
                              np.array([int(r["n_at_risk"]) for r in rs]),
                              np.array([int(r["d_events"]) for r in rs]), cohort)
    return out


# --- AFT families -------------------------------------------------------------------------
# In terms of s = shape * (log t + eta - log scale), each family supplies the cumulative
# hazard H(s) = -log S0 and q(s) = log H'(s), with first and second derivatives.


def _softplus(s):
    return np.logaddexp(0.0, s)


class _Weibull:
    name = "weibull"

    @staticmethod
    def H(s):
        e = np.exp(s)
        return e, e, e

    @staticmethod
    def q(s):
        return s, np.ones_like(s), np.zeros_like(s)

    @staticmethod
    def survival(s):
        return np.exp(-np.exp(s))


class _LogLogistic:
    name = "loglogistic"

    @staticmethod
    def H(s):
        sig = expit(s)
        return _softplus(s), sig, sig * (1 - sig)

    @staticmethod
    def q(s):
        sig = expit(s)
        return log_expit(s), 1 - sig, -sig * (1 - sig)

    @staticmethod
    def survival(s):
        return expit(-s)


FAMILIES = {"weibull": _Weibull, "loglogistic": _LogLogistic}


@dataclass
class AFTModel:
    scale: float
    shape: float
    coefficients: np.ndarray
    covariate_names: list[str]
    intercept: float = 0.0
    family: str = "weibull"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("scale and shape must be positive")
        if len(self.covariate_names) != len(self.coefficients):
            raise ValueError("one name per coefficient required")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    def linear_predictor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.coefficients):
            raise ValueError(f"expected {len(self.coefficients)} covariates, got {x.shape[-1]}")
        return self.intercept + x @ self.coefficients

    def survival(self, t, x):
        return aft_survival(self, t, x)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "baseline": {"lambda": self.scale, "rho": self.shape},
            "beta": {"intercept": self.intercept,
                     "coefficients": {n: float(c) for n, c in
                                      zip(self.covariate_names, self.coefficients)}},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AFTModel":
        coefs = d["beta"]["coefficients"]
        return cls(float(d["baseline"]["lambda"]), float(d["baseline"]["rho"]),
                   np.array(list(coefs.values()), dtype=float), list(coefs),
                   float(d["beta"].get("intercept", 0.0)), d.get("family", "weibull"),
                   d.get("diagnostics", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "AFTModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aft_survival(model: AFTModel, t, x):
    """S(t | x) for scalar or array t and one covariate row or a matrix of rows."""
    if model is None:
        raise NotFittedError("AFT model is not fitted")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    eta = model.linear_predictor(x)
    fam = FAMILIES[model.family]
    with np.errstate(divide="ignore"):
        s = model.shape * (np.log(t) + eta - np.log(model.scale))
    out = np.where(t > 0, fam.survival(s), 1.0)
    return float(out) if out.ndim == 0 else out


def aic(n_params: int, loglik: float) -> float:
    return 2.0 * n_params - 2.0 * loglik


# --- likelihood ---------------------------------------------------------------------------


def aft_loglik(theta, time, event, X, family="weibull", entry=None, derivatives=2):
    """Right-censored (optionally left-truncated) log-likelihood with gradient and Hessian.

    theta = (log scale, log shape, beta...). Returns (ll, grad, hess) up to ``derivatives``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _aft_loglik(theta, time, event, X, family, entry, derivatives)


def _aft_loglik(theta, time, event, X, family, entry, derivatives):
    fam = FAMILIES[family]
    log_scale, log_shape = theta[0], theta[1]
    beta = theta[2:]
    rho = np.exp(log_shape)
    eta = X @ beta
    log_t = np.log(time)
    s = rho * (log_t + eta - log_scale)
    H, dH, d2H = fam.H(s)
    q, dq, d2q = fam.q(s)
    ll = np.sum(event * (log_shape - log_t + q) - H)
    if entry is not None:
        pos = entry > 0
        s_e = rho * (np.log(np.where(pos, entry, 1.0)) + eta - log_scale)
        He, dHe, d2He = fam.H(s_e)
        ll += np.sum(np.where(pos, He, 0.0))
    if derivatives == 0:
        return ll, None, None

    def jac(sv):
        return np.column_stack([np.full_like(sv, -rho), sv, rho * X])

    l_s = event * dq - dH
    J = jac(s)
    grad = J.T @ l_s
    grad[1] += event.sum()
    if entry is not None:
        g_e = np.where(pos, dHe, 0.0)
        J_e = jac(s_e)
        grad += J_e.T @ g_e
    if derivatives == 1:
        return ll, grad, None

    l_ss = event * d2q - d2H
    hess = (J * l_ss[:, None]).T @ J
    v = J.T @ l_s
    if entry is not None:
        h_e = np.where(pos, d2He, 0.0)
        hess += (J_e * h_e[:, None]).T @ J_e
        v = v + J_e.T @ g_e
    # d2s/(d log shape d theta) equals ds/d theta; all other second derivatives vanish
    hess[1, :] += v
    hess[:, 1] += v
    hess[1, 1] -= v[1]
    return ll, grad, hess


def _collinear_columns(X, names):
    design = np.column_stack([np.ones(len(X)), X])
    bad, rank = [], 1
    for j in range(X.shape[1]):
        cols = [0] + [k + 1 for k in range(j + 1) if names[k] not in bad]
        r = np.linalg.matrix_rank(design[:, cols])
        if r <= rank:
            bad.append(names[j])
        else:
            rank = r
    return bad


@dataclass
class FitTrace:
    loglik: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)


def fit_aft(time, event, X=None, covariate_names=None, family: str = "weibull", entry=None,
            max_iter: int = 500, tol: float = 1e-6, trace: FitTrace | None = None) -> AFTModel:
    """Maximum-likelihood AFT fit by damped Newton steps with step halving.

    Starts from beta = 0, shape = 1 and scale = median observed time. Stops when the
    gradient max-norm drops below ``tol`` or when the Newton decrement says no further gain is
    resolvable in double precision (covariates on a scale of ~100 leave a gradient floor
    above ``tol``); raises ConvergenceError after ``max_iter``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    n = len(time)
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    p = X.shape[1]
    names = list(covariate_names) if covariate_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError("one name per covariate column required")
    if np.any(time <= 0):
        raise ValueError("times must be positive")
    if event.sum() < 1:
        raise ValueError("at least one event is required")
    if entry is not None:
        entry = np.asarray(entry, dtype=float)
    if p:
        bad = _collinear_columns(X, names)
        if bad:
            raise RankDeficientError(bad)

    theta = np.zeros(p + 2)
    theta[0] = np.log(np.median(time))
    ll, grad, hess = aft_loglik(theta, time, event, X, family, entry)
    trace = trace if trace is not None else FitTrace()
    for it in range(max_iter):
        gnorm = float(np.max(np.abs(grad)))
        trace.loglik.append(float(ll))
        trace.grad_norm.append(gnorm)
        if gnorm < tol:
            break
        step = _newton_step(hess, grad)
        if 0 <= grad @ step < 1e-14 * max(1.0, abs(ll)):
            # predicted gain is below double-precision resolution of the log-likelihood
            break
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            ll_new = aft_loglik(cand, time, event, X, family, entry, derivatives=0)[0]
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed", theta.copy(), gnorm)
        theta = cand
        ll, grad, hess = aft_loglik(theta, time, event, X, family, entry)
    else:
        raise ConvergenceError(f"no convergence in {max_iter} iterations", theta.copy(),
                               float(np.max(np.abs(grad))))

    cov = _inverse_information(hess)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    z = np.divide(theta, se, out=np.full_like(theta, np.nan), where=se > 0)
    pvals = 2 * stats.norm.sf(np.abs(z))
    k = p + 2
    diag = {
        "n": int(n), "n_events": int(event.sum()), "iterations": it,
        "log_likelihood": float(ll), "n_params": k, "aic": aic(k, float(ll)),
        "gradient_max_norm": float(np.max(np.abs(grad))),
        "se": {"log_lambda": float(se[0]), "log_rho": float(se[1]),
               **{nm: float(v) for nm, v in zip(names, se[2:])}},
        "z": {nm: float(v) for nm, v in zip(names, z[2:])},
        "p_value": {nm: float(v) for nm, v in zip(names, pvals[2:])},
    }
    return AFTModel(float(np.exp(theta[0])), float(np.exp(theta[1])), theta[2:].copy(), names,
                    0.0, family, diag)


def _newton_step(hess, grad):
    neg = -hess
    mu = 0.0
    scale = max(1e-8, float(np.max(np.abs(np.diag(neg)))))
    for _ in range(30):
        try:
            L = np.linalg.cholesky(neg + mu * np.eye(len(grad)))
        except np.linalg.LinAlgError:
            mu = max(1e-8 * scale, mu * 10)
            continue
        return np.linalg.solve(L.T, np.linalg.solve(L, grad))
    return grad / scale


def _inverse_information(hess):
    try:
        return np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(-hess)


def _obs_arrays(observations: Sequence[SurvivalObservation]):
    time = np.array([o.time for o in observations], dtype=float)
    event = np.array([o.event for o in observations], dtype=float)
    if observations and observations[0].covariates is not None:
        X = np.array([o.covariates for o in observations], dtype=float)
    else:
        X = np.zeros((len(observations), 0))
    entry = np.array([o.entry for o in observations], dtype=float)
    return time, event, X, entry


def fit_aft_weibull(train: Sequence[SurvivalObservation], covariate_names=None,
                    family: str = "weibull", use_entry: bool = False, **kw) -> AFTModel:
    time, event, X, entry = _obs_arrays(train)
    return fit_aft(time, event, X, covariate_names, family,
                   entry if use_entry else None, **kw)


def concordance_index(risk, time, event) -> float:
    """Harrell's C: over pairs with an event at t_i < t_j, the share where risk_i > risk_j.

    Score ties count one half; pairs tied on time are not comparable.
    """
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if not (len(risk) == len(time) == len(event)):
        raise ValueError("risk, time and event must have equal lengths")
    order = np.argsort(time, kind="stable")
    t_sorted, r_sorted = time[order], risk[order]
    conc = 0.0
    pairs = 0
    for i in np.flatnonzero(event == 1):
        start = np.searchsorted(t_sorted, time[i], side="right")
        later = r_sorted[start:]
        if later.size == 0:
            continue
        pairs += later.size
        conc += np.sum(later < risk[i]) + 0.5 * np.sum(later == risk[i])
    if pairs == 0:
        raise UndefinedStatisticError("no comparable pairs")
    return float(conc / pairs)


def concordance_from_observations(risk, observations: Sequence[SurvivalObservation]) -> float:
    return concordance_index(risk, [o.time for o in observations], [o.event for o in observations])


def aft_diagnostics(model: AFTModel, train: Sequence[SurvivalObservation],
                    heldout: Sequence[SurvivalObservation] | None = None,
                    use_entry: bool = False) -> dict:
    """z-tests, AIC, likelihood-ratio test against the covariate-free model, held-out C-index."""
    time, event, X, entry = _obs_arrays(train)
    entry = entry if use_entry else None
    theta = np.concatenate([[np.log(model.scale) - model.intercept, np.log(model.shape)],
                            model.coefficients])
    ll, _, hess = aft_loglik(theta, time, event, X, model.family, entry)
    se = np.sqrt(np.clip(np.diag(_inverse_information(hess)), 0, None))[2:]
    z = np.divide(model.coefficients, se, out=np.full(len(se), np.nan), where=se > 0)
    k = len(theta)
    if X.shape[1]:
        null = fit_aft(time, event, None, None, model.family, entry)
        ll0 = null.diagnostics["log_likelihood"]
    else:
        ll0 = ll
    lr = 2.0 * (ll - ll0)
    out = {
        "log_likelihood": float(ll), "n_params": k, "aic": aic(k, float(ll)),
        "coefficients": {n: float(c) for n, c in zip(model.covariate_names, model.coefficients)},
        "se": {n: float(s) for n, s in zip(model.covariate_names, se)},
        "z": {n: float(v) for n, v in zip(model.covariate_names, z)},
        "p_value": {n: float(2 * stats.norm.sf(abs(v))) for n, v in
                    zip(model.covariate_names, z)},
        "lr_statistic": float(lr),
        "lr_p_value": float(stats.chi2.sf(lr, X.shape[1])) if X.shape[1] else 1.0,
    }
    if heldout is not None:
        _, _, Xh, _ = _obs_arrays(heldout)
        out["c_index"] = concordance_from_observations(model.linear_predictor(Xh), heldout)
    model.diagnostics.update(out)
    return out
