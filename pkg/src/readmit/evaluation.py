"""Threshold and ranking metrics, stratified k-fold cross-validation and
bottom-up greedy feature selection scored by mean(MCC, AUC)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DataTable
from .learner import ForestParams, fit_forest
from .preprocess import (FittedPreprocessor, PreprocessConfig, fit as fit_preprocessor, refit,
                         transform, undersample)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    recall = sensitivity

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def _check_pair(y, p):
    y = np.asarray(y)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"labels and scores must be 1-D of equal length, got {y.shape} and {p.shape}")
    if len(y) == 0:
        raise ValueError("empty input")
    return y.astype(np.int64), p


def confusion(y, p, threshold: float = 0.5) -> ConfusionMatrix:
    """Confusion counts with a row predicted positive iff ``p >= threshold``."""
    y, p = _check_pair(y, p)
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0 when any marginal of the table is empty."""
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def auc(y, scores) -> float:
    """ROC AUC from the Mann-Whitney statistic with average ranks for ties."""
    y, s = _check_pair(y, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: only one class present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(y, scores) -> float:
    """Step-wise area under the precision-recall curve.

    Rows are visited by descending score (stable on input order); each
    positive contributes ``precision_at_k / n_pos``.
    """
    y, s = _check_pair(y, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision undefined: no positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / n_pos)


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    apr: float
    mcc: float
    balanced_accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def selection_score(self) -> float:
        return (self.mcc + self.auc) / 2.0


METRIC_NAMES = tuple(f.name for f in fields(MetricsReport) if f.name != "threshold")


def full_metrics(y, p, threshold: float = 0.5) -> MetricsReport:
    """All reported metrics for one set of predictions.

    AUC and APR are NaN when the set has a single class (their ranking
    definitions need both classes); threshold metrics are always defined.
    """
    y, p = _check_pair(y, p)
    cm = confusion(y, p, threshold)
    both = 0 < y.sum() < len(y)
    prec, rec, spec = cm.precision, cm.recall, cm.specificity
    return MetricsReport(
        auc=auc(y, p) if both else math.nan,
        apr=average_precision(y, p) if y.sum() > 0 else math.nan,
        mcc=mcc(cm),
        balanced_accuracy=(rec + spec) / 2.0,
        precision=prec,
        recall=rec,
        specificity=spec,
        f1=2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0,
        threshold=threshold,
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise mean, ignoring NaN entries."""
    values = {}
    for name in METRIC_NAMES:
        col = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        values[name] = float(np.mean(col[~np.isnan(col)])) if (~np.isnan(col)).any() else math.nan
    return MetricsReport(**values, threshold=reports[0].threshold)


def roc_points(y, scores) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) at every distinct score, highest threshold first."""
    y, s = _check_pair(y, scores)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    out = [(math.inf, 0.0, 0.0)]
    for i in last:
        out.append((float(s[i]), _ratio(fps[i], n_neg), _ratio(tps[i], n_pos)))
    return out


def pr_points(y, scores) -> list[tuple[float, float, float]]:
    """(threshold, recall, precision) at every distinct score."""
    y, s = _check_pair(y, scores)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    n_pos = y.sum()
    return [(float(s[i]), _ratio(tps[i], n_pos), tps[i] / (i + 1)) for i in last]


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def stratified_kfold(y, k: int, seed: int) -> np.ndarray:
    """Fold index per row; each class is shuffled then dealt round-robin."""
    y = np.asarray(y).astype(np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    counts = [int(np.sum(y == c)) for c in (0, 1)]
    if k > min(counts):
        raise ValueError(f"k={k} exceeds the minority class count {min(counts)}")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in (1, 0):
        idx = rng.permutation(np.flatnonzero(y == c))
        folds[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return folds


def _fold_assignment(y, k, seed):
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=2)
    if k <= counts.min():
        return stratified_kfold(y, k, seed)
    if k > len(y):
        raise ValueError(f"k={k} exceeds the number of rows {len(y)}")
    # too few minority rows to stratify (e.g. leave-one-out): plain shuffled folds
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    folds[rng.permutation(len(y))] = np.arange(len(y)) % k
    return folds


@dataclass
class CVResult:
    folds: list[MetricsReport]
    mean: MetricsReport
    assignment: np.ndarray
    oof_proba: np.ndarray

    @property
    def score(self) -> float:
        """Selection score (MCC + AUC) / 2 of the fold-mean metrics."""
        return self.mean.selection_score

    def to_dict(self) -> dict:
        return {"folds": [r.to_dict() for r in self.folds], "mean": self.mean.to_dict()}


def cross_validate(table: DataTable, params: ForestParams, k: int = 10, seed: int = 0,
                   features: Sequence[str] | None = None, undersample_ratio=None,
                   preprocess: PreprocessConfig | FittedPreprocessor | None = None,
                   threshold: float = 0.5,
                   threads: int = 1) -> CVResult:
    """k-fold cross-validation of a random forest.

    ``table`` is normally already preprocessed. Passing ``preprocess`` (a
    config, or a fitted preprocessor whose column layout is reused) fits
    preprocessing on each training portion and replays it on the held-out
    fold instead. Undersampling touches training portions only; every
    fold is scored on its natural class distribution.
    """
    y = table.y
    assignment = _fold_assignment(y, k, seed)
    reports = []
    oof = np.empty(table.n_rows)
    for fold in range(k):
        test_rows = np.flatnonzero(assignment == fold)
        train_rows = np.flatnonzero(assignment != fold)
        train, test = table.take(train_rows), table.take(test_rows)
        if preprocess is not None:
            if isinstance(preprocess, FittedPreprocessor):
                pre = refit(preprocess, train)
            else:
                pre = fit_preprocessor(train, preprocess)
            train, test = transform(pre, train), transform(pre, test)
        if undersample_ratio is not None:
            train = undersample(train, undersample_ratio, seed=_fold_seed(seed, fold))
        names = features if features is not None else train.schema.features
        X_tr, y_tr, names = train.feature_matrix(names)
        X_te, y_te, _ = test.feature_matrix(names)
        model = fit_forest(X_tr, y_tr, params, names, threads=threads)
        proba = model.predict_proba(X_te)
        oof[test_rows] = proba
        reports.append(full_metrics(y_te, proba, threshold))
    return CVResult(reports, mean_report(reports), assignment, oof)


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7919, fold]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Greedy forward selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionRound:
    feature: str
    score: float
    fold_metrics: list[MetricsReport]
    candidates: dict[str, float] = field(default_factory=dict)


@dataclass
class SelectionTrace:
    rounds: list[SelectionRound]
    stop_reason: str

    @property
    def picks(self) -> list[tuple[str, float]]:
        return [(r.feature, r.score) for r in self.rounds]

    @property
    def selected(self) -> list[str]:
        return [r.feature for r in self.rounds]

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "rounds": [
                {
                    "round": i + 1,
                    "feature": r.feature,
                    "score": r.score,
                    "fold_metrics": [m.to_dict() for m in r.fold_metrics],
                    "candidates": r.candidates,
                }
                for i, r in enumerate(self.rounds)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["round,feature,score"]
        for i, r in enumerate(self.rounds):
            lines.append(f"{i + 1},{_csv_field(r.feature)},{r.score!r}")
        return "\n".join(lines) + "\n"


def _csv_field(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def _finite(obj):
    """Replace non-finite floats with strings so output stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def recompute_score(fold_metrics: Sequence[MetricsReport]) -> float:
    m = mean_report(fold_metrics)
    return (m.mcc + m.auc) / 2.0


def greedy_forward_select(table: DataTable, params: ForestParams, k: int = 10, seed: int = 0,
                          max_features: int | None = None, min_gain: float = 0.0,
                          undersample_ratio=None, candidates: Sequence[str] | None = None,
                          threads: int = 1) -> SelectionTrace:
    """Bottom-up greedy selection.

    Starting from an empty bucket, each round cross-validates one forest per
    remaining feature on ``bucket + [feature]`` and keeps the feature with
    the best ``(MCC@0.5 + AUC) / 2`` (ties to the earlier feature). The
    search stops when the best gain falls below ``min_gain`` or the bucket
    reaches ``max_features``. A candidate whose cross-validation fails or
    yields an undefined metric scores ``-inf``.
    """
    pool = list(table.schema.features if candidates is None else candidates)
    if not pool:
        raise ValueError("greedy selection needs at least one feature")
    cap = len(pool) if max_features is None else min(max_features, len(pool))
    bucket: list[str] = []
    rounds: list[SelectionRound] = []
    best_so_far = -math.inf
    stop = "all features selected"
    while len(bucket) < cap:
        scored = {}
        best = None
        for name in pool:
            if name in bucket:
                continue
            try:
                cv = cross_validate(table, params, k, seed, features=bucket + [name],
                                    undersample_ratio=undersample_ratio, threads=threads)
                score = cv.score if not math.isnan(cv.score) else -math.inf
            except ValueError as exc:
                log.debug("candidate %s failed: %s", name, exc)
                cv, score = None, -math.inf
            scored[name] = score
            if best is None or score > best[1]:
                best = (name, score, cv)
        name, score, cv = best
        gain = score - best_so_far
        if score == -math.inf:
            stop = "no remaining candidate could be scored (all -inf)"
            break
        if gain < min_gain:
            stop = f"best gain {gain:.6g} below min_gain {min_gain:g} (candidate {name})"
            break
        bucket.append(name)
        best_so_far = score
        rounds.append(SelectionRound(name, score, cv.folds, scored))
        log.info("round %d: picked %s (score %.4f)", len(bucket), name, score)
    else:
        if cap < len(pool):
            stop = f"reached max_features={cap}"
    return SelectionTrace(rounds, stop)
