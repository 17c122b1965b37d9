"""Gradient-boosted decision trees for binary classification (logistic loss).

Trees are grown level by level on binned features. Exact mode uses one bin per distinct
value, so every possible threshold (midpoint between neighbouring values) is considered;
histogram mode caps features at ``max_bins`` quantile bins. Each split learns where missing
values go by trying both sides. Leaf values are second-order (Newton) steps with L2
shrinkage, scaled by the learning rate.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import NotFittedError, SchemaMismatchError
from .features import (FeatureBuilder, FeatureConfig, FeatureMatrix, FeatureSpec, ablate_schema,
                       covariates_from_rows)
from .metrics import average_precision
from .survival import FAMILIES, AFTModel


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 6
    n_rounds: int = 500
    learning_rate: float = 0.05
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    subsample: float = 1.0
    early_stopping: int | None = 50
    seed: int = 0
    tree_method: str = "auto"  # "exact", "hist" or "auto"
    max_bins: int = 256
    exact_max_rows: int = 50_000
    balance_classes: bool = False

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")
        if self.tree_method not in ("exact", "hist", "auto"):
            raise ValueError(f"unknown tree_method {self.tree_method!r}")


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray  # go left when x < threshold
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            r, nd = rows[active], node[active]
            x = X[r, f[active]]
            go_left = np.where(np.isnan(x), self.missing_left[nd], x < self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])

    def to_dict(self) -> dict:
        nodes = []
        for i in range(len(self.feature)):
            leaf = self.feature[i] < 0
            nodes.append({
                "feature": int(self.feature[i]),
                "threshold": None if leaf else float(self.threshold[i]),
                "missing_dir": None if leaf else ("left" if self.missing_left[i] else "right"),
                "left": int(self.left[i]), "right": int(self.right[i]),
                "leaf_value": float(self.value[i]) if leaf else None,
                "gain": float(self.gain[i]),
            })
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        nodes = d["nodes"]
        return cls(
            np.array([n["feature"] for n in nodes], dtype=np.int64),
            np.array([np.nan if n["threshold"] is None else n["threshold"] for n in nodes]),
            np.array([n["missing_dir"] == "left" for n in nodes]),
            np.array([n["left"] for n in nodes], dtype=np.int64),
            np.array([n["right"] for n in nodes], dtype=np.int64),
            np.array([0.0 if n["leaf_value"] is None else n["leaf_value"] for n in nodes]),
            np.array([n.get("gain", 0.0) for n in nodes]),
        )


@dataclass
class GBDTModel:
    feature_names: list[str]
    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += t.apply(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> dict:
        return {"format": "gbdt-logistic-v1", "feature_names": self.feature_names,
                "base_score": self.base_score, "learning_rate": self.learning_rate,
                "metadata": self.metadata, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "GBDTModel":
        return cls(list(d["feature_names"]), float(d["base_score"]), float(d["learning_rate"]),
                   [Tree.from_dict(t) for t in d["trees"]], d.get("metadata", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GBDTModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- binning ------------------------------------------------------------------------------


class _Binner:
    """Per-feature cut points; bin = number of cuts <= x, missing gets the last slot."""

    def __init__(self, X: np.ndarray, max_bins: int | None):
        self.cuts = []
        for j in range(X.shape[1]):
            col = X[:, j]
            vals = np.unique(col[~np.isnan(col)])
            if max_bins is None or len(vals) <= max_bins:
                cuts = (vals[:-1] + vals[1:]) / 2 if len(vals) > 1 else np.empty(0)
            else:
                qs = np.quantile(col[~np.isnan(col)], np.linspace(0, 1, max_bins + 1)[1:-1])
                cuts = np.unique(qs)
                # a cut equal to the maximum would leave its right side empty
                cuts = cuts[cuts > vals[0]]
                cuts = cuts[cuts <= vals[-1]]
            self.cuts.append(cuts)
        self.n_bins = np.array([len(c) + 1 for c in self.cuts])  # regular bins per feature
        self.offsets = np.concatenate([[0], np.cumsum(self.n_bins + 1)[:-1]])
        self.total = int((self.n_bins + 1).sum())

    def transform(self, X: np.ndarray) -> np.ndarray:
        B = np.empty(X.shape, dtype=np.int32)
        for j, cuts in enumerate(self.cuts):
            col = X[:, j]
            b = np.searchsorted(cuts, col, side="right")
            b[np.isnan(col)] = self.n_bins[j]
            B[:, j] = b
        return B


# --- training -----------------------------------------------------------------------------


def _logloss(y, f, w):
    return float(np.sum(w * (np.logaddexp(0, f) - y * f)) / np.sum(w))


class _Grower:
    """Level-wise tree growth on binned data.

    Histograms are built with one bincount per level over (node, feature, bin) slots; only
    the smaller child of each split is counted, the sibling comes from the parent by
    subtraction. Split search scans the non-empty slots only.
    """

    def __init__(self, binner: _Binner, B: np.ndarray, cfg: TrainConfig):
        self.binner = binner
        self.B = B
        self.cfg = cfg
        self.act = np.flatnonzero(binner.n_bins > 1)  # features that can be split at all
        nb = binner.n_bins[self.act]
        width = nb + 1
        off = np.concatenate([[0], np.cumsum(width)[:-1]]).astype(np.int64)
        self.TB = int(width.sum())
        self.Fa = len(self.act)
        self.flat = B[:, self.act].astype(np.int64) + off[None, :]
        self.slot_feat = np.repeat(np.arange(self.Fa), width)
        self.slot_bin = np.arange(self.TB) - off[self.slot_feat]
        self.slot_miss = self.slot_bin == nb[self.slot_feat]

    def _hist(self, row_sets, g, h):
        K, TB, Fa = len(row_sets), self.TB, self.Fa
        rows = np.concatenate(row_sets)
        local = np.repeat(np.arange(K, dtype=np.int64), [len(r) for r in row_sets])
        idx = (local[:, None] * TB + self.flat[rows]).ravel()
        size = K * TB
        cnt = np.bincount(idx, minlength=size).reshape(K, TB)
        G = np.bincount(idx, np.repeat(g[rows], Fa), minlength=size).reshape(K, TB)
        H = np.bincount(idx, np.repeat(h[rows], Fa), minlength=size).reshape(K, TB)
        return [(cnt[i], G[i], H[i]) for i in range(K)]

    def _scan(self, hists, Gt, Ht):
        """Best (feature, bin, missing_left, gain) per node, or None."""
        cfg, lam, TB = self.cfg, self.cfg.reg_lambda, self.TB
        K = len(hists)
        parts = [np.flatnonzero(c) for c, _, _ in hists]
        nz = np.concatenate([q + i * TB for i, q in enumerate(parts)])  # by node, then slot
        if len(nz) == 0:
            return [None] * K
        G = np.concatenate([x[q] for (_, x, _), q in zip(hists, parts)])
        H = np.concatenate([x[q] for (_, _, x), q in zip(hists, parts)])
        node = nz // TB
        slot = nz - node * TB
        feat = self.slot_feat[slot]
        miss = self.slot_miss[slot]
        seg = node * self.Fa + feat
        new_seg = np.concatenate([[True], seg[1:] != seg[:-1]])
        seg_id = np.cumsum(new_seg) - 1
        start = np.flatnonzero(new_seg)
        greg, hreg = np.where(miss, 0.0, G), np.where(miss, 0.0, H)
        cg, ch = np.cumsum(greg), np.cumsum(hreg)
        gl = cg - (cg - greg)[start][seg_id]
        hl = ch - (ch - hreg)[start][seg_id]
        gm = np.bincount(seg_id, np.where(miss, G, 0.0))[seg_id]
        hm = np.bincount(seg_id, np.where(miss, H, 0.0))[seg_id]
        end = np.concatenate([start[1:], [len(nz)]]) - 1
        last_reg = end - miss[end]
        valid = ~miss & (np.arange(len(nz)) < last_reg[seg_id])
        Gn, Hn = Gt[node], Ht[node]
        parent = Gn * Gn / (Hn + lam)
        best_gain = np.full(len(nz), -np.inf)
        best_ml = np.zeros(len(nz), dtype=bool)
        for ml in (False, True):
            GL = gl + gm if ml else gl
            HL = hl + hm if ml else hl
            GR, HR = Gn - GL, Hn - HL
            ok = valid & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
            with np.errstate(invalid="ignore"):
                gain = np.where(ok, GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent, -np.inf)
            better = gain > best_gain
            best_gain = np.where(better, gain, best_gain)
            best_ml = np.where(better, ml, best_ml)
        node_start = np.flatnonzero(np.concatenate([[True], node[1:] != node[:-1]]))
        node_max = np.maximum.reduceat(best_gain, node_start)
        out = [None] * K
        hit = np.flatnonzero((best_gain == np.repeat(node_max, np.diff(np.r_[node_start, len(nz)])))
                             & (best_gain > 1e-12))
        if len(hit):
            _, first = np.unique(node[hit], return_index=True)
            for e in hit[first]:  # first maximum per node: lowest feature index wins
                out[node[e]] = (int(self.act[feat[e]]), int(self.slot_bin[slot[e]]),
                                bool(best_ml[e]), float(best_gain[e]))
        return out

    def grow(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray):
        cfg, lam = self.cfg, self.cfg.reg_lambda
        feature, thr, thr_bin, miss_left, left, right, value, gain = ([] for _ in range(8))

        def new_node():
            for lst, v in ((feature, -1), (thr, np.nan), (thr_bin, -1), (miss_left, True),
                           (left, -1), (right, -1), (value, 0.0), (gain, 0.0)):
                lst.append(v)
            return len(feature) - 1

        # frontier entries: (node id, rows, histogram or None)
        root = new_node()
        can_split = self.TB > 0 and cfg.max_depth > 0
        frontier = [(root, rows, self._hist([rows], g, h)[0] if can_split else None)]
        for depth in range(cfg.max_depth + 1):
            if not frontier:
                break
            Gt = np.array([g[r].sum() for _, r, _ in frontier])
            Ht = np.array([h[r].sum() for _, r, _ in frontier])
            cand = [i for i, (_, r, hist) in enumerate(frontier)
                    if hist is not None and len(r) >= 2 and Ht[i] >= 2 * cfg.min_child_weight]
            best = [None] * len(frontier)
            if cand:
                found = self._scan([frontier[i][2] for i in cand], Gt[cand], Ht[cand])
                for i, b in zip(cand, found):
                    best[i] = b
            children = []
            for i, (nd, r, hist) in enumerate(frontier):
                if best[i] is None:
                    value[nd] = -cfg.learning_rate * Gt[i] / (Ht[i] + lam)
                    continue
                j, k, ml, gn = best[i]
                bins = self.B[r, j]
                go_left = np.where(bins == self.binner.n_bins[j], ml, bins <= k)
                lc, rc = new_node(), new_node()
                feature[nd], thr_bin[nd], miss_left[nd], gain[nd] = j, k, ml, gn
                thr[nd] = self.binner.cuts[j][k]
                left[nd], right[nd] = lc, rc
                children.append((lc, r[go_left], rc, r[~go_left], hist))
            frontier = []
            need_hist = depth + 1 < cfg.max_depth
            small_sets = []
            for lc, lr, rc, rr, _ in children:
                small_sets.append(lr if len(lr) <= len(rr) else rr)
            small_h = self._hist(small_sets, g, h) if (need_hist and children) else None
            for n_, (lc, lr, rc, rr, parent) in enumerate(children):
                if not need_hist:
                    frontier += [(lc, lr, None), (rc, rr, None)]
                    continue
                sc, sg, sh = small_h[n_]
                pc, pg, ph = parent
                other = (pc - sc, pg - sg, ph - sh)
                if len(lr) <= len(rr):
                    frontier += [(lc, lr, (sc, sg, sh)), (rc, rr, other)]
                else:
                    frontier += [(lc, lr, other), (rc, rr, (sc, sg, sh))]

        tree = Tree(np.array(feature, dtype=np.int64), np.array(thr), np.array(miss_left),
                    np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                    np.array(value), np.array(gain))
        return tree, np.array(thr_bin, dtype=np.int64)


def _apply_binned(tree: Tree, thr_bin: np.ndarray, B: np.ndarray, n_bins: np.ndarray):
    node = np.zeros(len(B), dtype=np.int64)
    rows = np.arange(len(B))
    while True:
        f = tree.feature[node]
        active = f >= 0
        if not active.any():
            return tree.value[node]
        r, nd = rows[active], node[active]
        fa = f[active]
        b = B[r, fa]
        go_left = np.where(b == n_bins[fa], tree.missing_left[nd], b <= thr_bin[nd])
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])


def _check_binary(y):
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be binary")
    if y.min() == y.max():
        raise ValueError("training set has a single class")
    return y.astype(float)


def train_gbdt(train: FeatureMatrix, validate: FeatureMatrix | None = None,
               config: TrainConfig = TrainConfig(), log: list | None = None) -> GBDTModel:
    """Stagewise logistic-loss boosting with early stopping on validation average precision.

    ``log``, if given, receives one dict per round (train/validate loss and AP).
    """
    y = _check_binary(train.targets)
    X = np.asarray(train.values, dtype=float)
    if validate is not None:
        if list(validate.names) != list(train.names):
            raise SchemaMismatchError("train and validate schemas differ")
        Xv, yv = np.asarray(validate.values, dtype=float), np.asarray(validate.targets, float)
        use_val = 0 < yv.sum() < len(yv)
    else:
        use_val = False
    cfg = config
    method = cfg.tree_method
    if method == "auto":
        method = "exact" if len(X) < cfg.exact_max_rows else "hist"
    binner = _Binner(X, None if method == "exact" else cfg.max_bins)
    B = binner.transform(X)
    grower = _Grower(binner, B, cfg)

    w = np.ones_like(y)
    if cfg.balance_classes:
        w[y == 1] = (y == 0).sum() / (y == 1).sum()
    prior = float(np.sum(w * y) / np.sum(w))
    base = float(np.log(prior / (1 - prior)))
    model = GBDTModel(list(train.names), base, cfg.learning_rate,
                      metadata={"config": asdict(cfg), "tree_method": method})
    f = np.full(len(y), base)
    fv = np.full(len(Xv), base) if use_val else None
    rng = np.random.default_rng(cfg.seed)
    all_rows = np.arange(len(y))
    best_ap, best_round = -np.inf, -1
    for r in range(cfg.n_rounds):
        p = expit(f)
        g, h = (p - y) * w, np.maximum(p * (1 - p), 1e-16) * w
        rows = all_rows
        if cfg.subsample < 1:
            rows = np.sort(rng.choice(len(y), max(1, int(round(cfg.subsample * len(y)))),
                                      replace=False))
        tree, thr_bin = grower.grow(rows, g, h)
        model.trees.append(tree)
        f += _apply_binned(tree, thr_bin, B, binner.n_bins)
        entry = {"round": r + 1, "train_logloss": _logloss(y, f, w)}
        if use_val:
            fv += tree.apply(Xv)
            ap = average_precision(fv, yv)
            entry.update(validate_logloss=_logloss(yv, fv, np.ones_like(yv)), validate_ap=ap)
            if ap > best_ap:
                best_ap, best_round = ap, r
            elif cfg.early_stopping is not None and r - best_round >= cfg.early_stopping:
                if log is not None:
                    log.append(entry)
                break
        if log is not None:
            log.append(entry)
    if use_val and cfg.early_stopping is not None:
        model.trees = model.trees[:best_round + 1]
    model.metadata.update(rounds_trained=len(model.trees),
                          best_round=(best_round + 1) if use_val else None,
                          best_validate_ap=float(best_ap) if use_val else None)
    return model


def _matrix_for(model: GBDTModel, features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        if list(features.names) != list(model.feature_names):
            raise SchemaMismatchError("feature schema does not match the model")
        return np.asarray(features.values, dtype=float)
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.feature_names):
        raise SchemaMismatchError(f"expected {len(model.feature_names)} features, got {X.shape[1]}")
    return X


def predict_risk(model: GBDTModel, features) -> np.ndarray:
    """Event probability sigmoid(base_score + sum of tree outputs)."""
    if model is None:
        raise NotFittedError("no model")
    return model.predict_proba(_matrix_for(model, features))


def gain_importance(model: GBDTModel) -> dict[str, float]:
    """Total split gain per feature, normalised to sum to 100."""
    total = np.zeros(len(model.feature_names))
    for t in model.trees:
        split = t.feature >= 0
        np.add.at(total, t.feature[split], t.gain[split])
    s = total.sum()
    if s > 0:
        total = total * (100.0 / s)
    return dict(zip(model.feature_names, total.tolist()))


def used_features(model: GBDTModel) -> set[int]:
    return {int(f) for t in model.trees for f in t.feature if f >= 0}


def permutation_importance(model: GBDTModel, data: FeatureMatrix, n_repeats: int = 5,
                           seed: int = 0, metric=average_precision, return_std: bool = False):
    """Mean drop in ``metric`` when one column is shuffled; unused features score 0."""
    X = _matrix_for(model, data)
    y = np.asarray(data.targets)
    base = metric(model.decision_function(X), y)
    rng = np.random.default_rng(seed)
    used = used_features(model)
    means, stds = {}, {}
    for j, name in enumerate(model.feature_names):
        if j not in used:
            means[name], stds[name] = 0.0, 0.0
            continue
        drops = []
        Xp = X.copy()
        for _ in range(n_repeats):
            Xp[:, j] = X[rng.permutation(len(X)), j]
            drops.append(base - metric(model.decision_function(Xp), y))
        means[name], stds[name] = float(np.mean(drops)), float(np.std(drops))
    return (means, stds) if return_std else means


def ablate_survival_features(schema: Sequence[FeatureSpec]) -> list[FeatureSpec]:
    """The same schema without the survival-model (group i) features."""
    return ablate_schema(schema)


def aft_horizon_probability(aft: AFTModel, age, x, horizon: float = 1.0) -> np.ndarray:
    """P(event in (age, age + horizon] | event-free at age) = 1 - S(age+h|x) / S(age|x)."""
    if aft is None:
        raise NotFittedError("AFT model is not fitted")
    fam = FAMILIES[aft.family]
    age = np.asarray(age, dtype=float)
    eta = aft.linear_predictor(x)
    log_scale = np.log(aft.scale)

    def cumhaz(t):
        with np.errstate(divide="ignore"):
            s = aft.shape * (np.log(t) + eta - log_scale)
        return np.where(t > 0, fam.H(s)[0], 0.0)

    return -np.expm1(-(cumhaz(age + horizon) - cumhaz(age)))


def aft_as_classifier(aft: AFTModel, windows, horizon: float = 1.0) -> np.ndarray:
    """Rank patients by the AFT model's conditional event probability over the horizon.

    ``windows`` is a sequence of labeled windows or a feature matrix holding the covariates.
    """
    if aft is None:
        raise NotFittedError("AFT model is not fitted")
    if not isinstance(windows, FeatureMatrix):
        windows = FeatureBuilder(FeatureConfig(km_features=False, aft_features=False)).transform(windows)
    x = covariates_from_rows(windows.values, windows.names, aft.covariate_names)
    age = windows.column("age_at_pred")
    return aft_horizon_probability(aft, age, x, horizon)


def write_training_log(log: Sequence[dict], path):
    keys = ["round", "train_logloss", "validate_logloss", "validate_ap"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for e in log:
            w.writerow({k: (repr(e[k]) if isinstance(e.get(k), float) else e.get(k, ""))
                        for k in keys})
