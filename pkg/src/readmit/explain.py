"""Exact Shapley attributions for trees and forests.

The value of a feature coalition ``S`` for a tree is the path-dependent
conditional expectation: at a split on a feature in ``S`` follow the row,
otherwise average both children weighted by training cover.
:func:`tree_shap` computes the Shapley values of that game in polynomial
time; :func:`brute_shapley` enumerates every coalition and serves as its
oracle.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .learner import RandomForestModel, Tree

BRUTE_FORCE_LIMIT = 15


def tree_value_function(tree: Tree, x, subset) -> float:
    subset = set(subset)

    def value(node):
        f = tree.feature[node]
        if f < 0:
            return float(tree.value[node])
        left, right = tree.left[node], tree.right[node]
        if f in subset:
            return value(left if x[f] <= tree.threshold[node] else right)
        return (tree.cover[left] * value(left) + tree.cover[right] * value(right)) / tree.cover[node]

    return value(0)


def brute_shapley(tree: Tree, x) -> np.ndarray:
    """Shapley values by enumerating every coalition of the tree's features."""
    used = tree.used_features()
    m = len(used)
    if m > BRUTE_FORCE_LIMIT:
        raise ValueError(f"tree uses {m} features; brute force is limited to {BRUTE_FORCE_LIMIT}")
    phi = np.zeros(tree.n_features)
    cache = {}

    def v(s):
        if s not in cache:
            cache[s] = tree_value_function(tree, x, s)
        return cache[s]

    for j in used:
        others = [f for f in used if f != j]
        total = 0.0
        for size in range(m):
            weight = math.factorial(size) * math.factorial(m - size - 1) / math.factorial(m)
            for s in itertools.combinations(others, size):
                s = frozenset(s)
                total += weight * (v(s | {j}) - v(s))
        phi[j] = total
    return phi


# ---------------------------------------------------------------------------
# Polynomial path-dependent algorithm
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _extend(feat, zero, one, pw, base, depth, zero_frac, one_frac, index):
    feat[base + depth] = index
    zero[base + depth] = zero_frac
    one[base + depth] = one_frac
    pw[base + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[base + i + 1] += one_frac * pw[base + i] * (i + 1) / (depth + 1)
        pw[base + i] = zero_frac * pw[base + i] * (depth - i) / (depth + 1)


@njit(cache=True, nogil=True)
def _unwind(feat, zero, one, pw, base, depth, index):
    one_frac = one[base + index]
    zero_frac = zero[base + index]
    nxt = pw[base + depth]
    for i in range(depth - 1, -1, -1):
        if one_frac != 0.0:
            tmp = pw[base + i]
            pw[base + i] = nxt * (depth + 1) / ((i + 1) * one_frac)
            nxt = tmp - pw[base + i] * zero_frac * (depth - i) / (depth + 1)
        else:
            pw[base + i] = pw[base + i] * (depth + 1) / (zero_frac * (depth - i))
    for i in range(index, depth):
        feat[base + i] = feat[base + i + 1]
        zero[base + i] = zero[base + i + 1]
        one[base + i] = one[base + i + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(zero, one, pw, base, depth, index):
    one_frac = one[base + index]
    zero_frac = zero[base + index]
    nxt = pw[base + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_frac != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one_frac)
            total += tmp
            nxt = pw[base + i] - tmp * zero_frac * (depth - i) / (depth + 1)
        else:
            total += pw[base + i] / zero_frac / ((depth - i) / (depth + 1))
    return total


# numba's on-disk cache mishandles self-recursive functions (cached loads
# crash), so the recursive kernel and its caller are compiled per process
@njit(nogil=True)
def _recurse(node, x, phi, feature, threshold, left, right, cover, value,
             feat, zero, one, pw, parent_base, depth, zero_frac, one_frac, index):
    # each recursion level works on a private copy of the path segment
    base = parent_base + depth
    for i in range(depth):
        feat[base + i] = feat[parent_base + i]
        zero[base + i] = zero[parent_base + i]
        one[base + i] = one[parent_base + i]
        pw[base + i] = pw[parent_base + i]
    _extend(feat, zero, one, pw, base, depth, zero_frac, one_frac, index)
    f = feature[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(zero, one, pw, base, depth, i)
            phi[feat[base + i]] += w * (one[base + i] - zero[base + i]) * value[node]
        return
    if x[f] <= threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    incoming_zero = 1.0
    incoming_one = 1.0
    k = 0
    while k <= depth:
        if feat[base + k] == f:
            break
        k += 1
    if k <= depth:
        incoming_zero = zero[base + k]
        incoming_one = one[base + k]
        _unwind(feat, zero, one, pw, base, depth, k)
        depth -= 1
    _recurse(hot, x, phi, feature, threshold, left, right, cover, value,
             feat, zero, one, pw, base, depth + 1,
             cover[hot] / cover[node] * incoming_zero, incoming_one, f)
    _recurse(cold, x, phi, feature, threshold, left, right, cover, value,
             feat, zero, one, pw, base, depth + 1,
             cover[cold] / cover[node] * incoming_zero, 0.0, f)


@njit(nogil=True)
def _shap_rows(X, out, feature, threshold, left, right, cover, value, max_depth):
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    feat = np.empty(size, dtype=np.int64)
    zero = np.empty(size)
    one = np.empty(size)
    pw = np.empty(size)
    for r in range(X.shape[0]):
        _recurse(0, X[r], out[r], feature, threshold, left, right, cover, value,
                 feat, zero, one, pw, 0, 0, 1.0, 1.0, -1)


def _tree_into(tree: Tree, X: np.ndarray, out: np.ndarray) -> None:
    _shap_rows(X, out, tree.feature, tree.threshold, tree.left, tree.right,
               tree.cover, tree.value, tree.depth)


def tree_shap(tree: Tree, x) -> np.ndarray:
    """Shapley values of one row for one tree; they sum to ``f(x) - E[f]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise ValueError(f"expected a row of {tree.n_features} values, got shape {x.shape}")
    out = np.zeros((1, tree.n_features))
    _tree_into(tree, x[None, :], out)
    return out[0]


@dataclass
class ShapMatrix:
    values: np.ndarray
    base_value: float
    feature_names: list[str]

    def local_accuracy_error(self, prediction) -> float:
        return float(np.max(np.abs(self.base_value + self.values.sum(axis=1) - prediction)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# base_value={self.base_value!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.feature_names)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ShapMatrix":
        first, rest = text.split("\n", 1)
        if not first.startswith("# base_value="):
            raise ValueError("missing base_value header line")
        rows = list(csv.reader(io.StringIO(rest)))
        names, body = rows[0], [r for r in rows[1:] if r]
        values = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(names))
        return cls(values, float(first.split("=", 1)[1]), names)


def forest_shap(model: RandomForestModel, X, threads: int = 1) -> ShapMatrix:
    """Mean of per-tree attributions; ``base_value`` is the mean tree expectation."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} columns, got shape {X.shape}")

    def run(rows):
        block = np.zeros((len(rows), model.n_features))
        part = np.ascontiguousarray(X[rows])
        for tree in model.trees:
            _tree_into(tree, part, block)
        return block

    chunks = np.array_split(np.arange(len(X)), max(1, min(threads, len(X))))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run, chunks))
    else:
        blocks = [run(c) for c in chunks]
    total = np.concatenate(blocks) if blocks else np.zeros((0, model.n_features))
    return ShapMatrix(total / len(model.trees), model.expected_value, list(model.feature_names))


# ---------------------------------------------------------------------------
# Rankings and beeswarm data
# ---------------------------------------------------------------------------

@dataclass
class FeatureRanking:
    items: list[tuple[str, float]]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    def to_csv(self) -> str:
        lines = ["rank,feature,mean_abs_shap"]
        lines += [f"{i + 1},{_quote(n)},{v!r}" for i, (n, v) in enumerate(self.items)]
        return "\n".join(lines) + "\n"


def _quote(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def _rank(means: dict[str, float], top_k: int | None) -> FeatureRanking:
    items = sorted(means.items(), key=lambda kv: (-kv[1], kv[0]))
    return FeatureRanking(items if top_k is None else items[:top_k])


def summary_ranking(shap: ShapMatrix, top_k: int | None = 20) -> FeatureRanking:
    """Features by mean absolute attribution, descending; ties by name."""
    means = {}
    for j, name in enumerate(shap.feature_names):
        col = np.ascontiguousarray(np.abs(shap.values[:, j]))
        means[name] = float(col.mean()) if len(col) else 0.0
    return _rank(means, top_k)


def beeswarm_export(shap: ShapMatrix, X, top_k: int | None = 20, raw=None) -> str:
    """Long-format CSV ``feature,row,value,attribution[,raw_value]``.

    ``X`` holds the feature values the model saw (standardised), in
    ``shap.feature_names`` order; ``raw`` optionally maps a feature name to
    its pre-standardisation values. Features appear in ranking order.
    """
    X = np.asarray(X, dtype=np.float64)
    ranking = summary_ranking(shap, top_k)
    col = {n: j for j, n in enumerate(shap.feature_names)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["feature", "row", "value", "attribution"] + (["raw_value"] if raw is not None else [])
    w.writerow(header)
    for name in ranking.names:
        j = col[name]
        raw_col = None if raw is None else raw.get(name)
        for i in range(len(X)):
            row = [name, i, repr(float(X[i, j])), repr(float(shap.values[i, j]))]
            if raw is not None:
                row.append("" if raw_col is None else _raw_cell(raw_col[i]))
            w.writerow(row)
    return buf.getvalue()


def _raw_cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if not isinstance(v, str) else v


def ranking_from_beeswarm(text: str, top_k: int | None = None) -> FeatureRanking:
    order: list[str] = []
    rows: dict[str, list[float]] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        name = rec["feature"]
        if name not in rows:
            rows[name] = []
            order.append(name)
        rows[name].append(abs(float(rec["attribution"])))
    means = {n: float(np.ascontiguousarray(rows[n]).mean()) for n in order}
    return _rank(means, top_k)
