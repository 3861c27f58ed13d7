"""CART decision trees and a bootstrap-aggregated random forest.

Trees are stored as flat preorder arrays (``feature``, ``threshold``,
``left``, ``right``, ``cover``, ``value``). Every node keeps its training
``cover`` so that Shapley explanations can marginalise over the tree.
A row goes left at an internal node when ``x[feature] <= threshold``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

MODEL_FORMAT = "readmit-forest"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Malformed or incompatible serialized model."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 80
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | str = "auto"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        fps = self.features_per_split
        if isinstance(fps, str):
            if fps not in ("auto", "all"):
                raise ValueError(f"features_per_split must be an int, 'auto' or 'all', got {fps!r}")
        elif fps < 1:
            raise ValueError("features_per_split must be >= 1")

    def resolve_mtry(self, n_features: int) -> int:
        fps = self.features_per_split
        if fps == "auto":
            return max(1, int(round(math.sqrt(n_features))))
        if fps == "all":
            return n_features
        return min(int(fps), n_features)

    def replace(self, **kw) -> "ForestParams":
        return ForestParams(**{**asdict(self), **kw})


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    value: np.ndarray
    n_features: int

    @classmethod
    def from_arrays(cls, feature, threshold, left, right, cover, value, n_features) -> "Tree":
        arrs = [np.ascontiguousarray(feature, dtype=np.int64),
                np.ascontiguousarray(threshold, dtype=np.float64),
                np.ascontiguousarray(left, dtype=np.int64),
                np.ascontiguousarray(right, dtype=np.int64),
                np.ascontiguousarray(cover, dtype=np.float64),
                np.ascontiguousarray(value, dtype=np.float64)]
        for a in arrs:
            a.setflags(write=False)
        return cls(*arrs, n_features=int(n_features))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    @property
    def expected_value(self) -> float:
        """Cover-weighted mean of the leaf values."""
        leaves = self.feature < 0
        return float(np.dot(self.cover[leaves], self.value[leaves]) / self.cover[0])

    def used_features(self) -> list[int]:
        return sorted({int(f) for f in self.feature if f >= 0})

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf each row of ``X`` reaches."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def check(self) -> None:
        """Raise ``ValueError`` if structural invariants are violated."""
        for i in range(self.n_nodes):
            if not 0.0 <= self.value[i] <= 1.0:
                raise ValueError(f"node {i}: value {self.value[i]} outside [0, 1]")
            f = self.feature[i]
            if f < 0:
                continue
            if f >= self.n_features:
                raise ValueError(f"node {i}: feature index {f} >= {self.n_features}")
            l, r = self.left[i], self.right[i]
            if self.cover[i] != self.cover[l] + self.cover[r]:
                raise ValueError(f"node {i}: cover {self.cover[i]} != {self.cover[l]} + {self.cover[r]}")


# ---------------------------------------------------------------------------
# Induction
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _build(X, y, sample, max_depth, min_leaf, mtry, seed):
    np.random.seed(seed)
    m = sample.shape[0]
    p = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    cover = np.zeros(cap, dtype=np.float64)
    value = np.zeros(cap, dtype=np.float64)

    work = sample.copy()
    buf = np.empty(m, dtype=np.int64)
    vals = np.empty(m, dtype=np.float64)
    labs = np.empty(m, dtype=np.int64)

    # stack rows: start, end, depth, parent, is_left
    stack = np.empty((cap, 5), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = m
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    count = 0
    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        node = count
        count += 1
        if parent >= 0:
            if stack[top, 4] == 1:
                left[parent] = node
            else:
                right[parent] = node
        n = end - start
        pos = 0
        for i in range(start, end):
            pos += y[work[i]]
        cover[node] = n
        value[node] = pos / n
        if pos == 0 or pos == n or depth == max_depth or n < 2 * min_leaf:
            continue

        perm = np.random.permutation(p)
        found = False
        best_score = np.inf
        best_f = -1
        best_t = 0.0
        for fi in range(p):
            if fi >= mtry and found:
                break
            f = perm[fi]
            for i in range(n):
                vals[i] = X[work[start + i], f]
            order = np.argsort(vals[:n])
            for i in range(n):
                labs[i] = y[work[start + order[i]]]
            pos_l = 0
            for i in range(n - 1):
                pos_l += labs[i]
                v0 = vals[order[i]]
                v1 = vals[order[i + 1]]
                if v0 == v1:
                    continue
                n_l = i + 1
                n_r = n - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                pos_r = pos - pos_l
                score = pos_l * (n_l - pos_l) / n_l + pos_r * (n_r - pos_r) / n_r
                t = 0.5 * (v0 + v1)
                if t >= v1:
                    t = v0
                better = False
                if not found or score < best_score:
                    better = True
                elif score == best_score:
                    if f < best_f or (f == best_f and t < best_t):
                        better = True
                if better:
                    found = True
                    best_score = score
                    best_f = f
                    best_t = t
        if not found:
            continue

        feature[node] = best_f
        threshold[node] = best_t
        nl = 0
        nr = 0
        for i in range(start, end):
            s = work[i]
            if X[s, best_f] <= best_t:
                work[start + nl] = s
                nl += 1
            else:
                buf[nr] = s
                nr += 1
        for i in range(nr):
            work[start + nl + i] = buf[i]
        # right pushed first so the left subtree is numbered first (preorder)
        stack[top, 0] = start + nl
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + nl
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1
    return (feature[:count], threshold[:count], left[:count], right[:count],
            cover[:count], value[:count])


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if len(X) == 0:
        raise ValueError("cannot fit on empty input")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must be binary 0/1")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X, np.ascontiguousarray(y, dtype=np.int64)


def _tree_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _grow(X, y, params: ForestParams, rng: np.random.Generator, bootstrap: bool) -> Tree:
    n, p = X.shape
    sample = rng.integers(0, n, size=n) if bootstrap else np.arange(n, dtype=np.int64)
    seed = int(rng.integers(0, 2**31 - 1))
    depth = -1 if params.max_depth is None else int(params.max_depth)
    arrays = _build(X, y, sample.astype(np.int64), depth, int(params.min_samples_leaf),
                    params.resolve_mtry(p), seed)
    return Tree.from_arrays(*arrays, n_features=p)


def fit_tree(X, y, params: ForestParams = ForestParams(features_per_split="all"),
             rng: np.random.Generator | None = None) -> Tree:
    """Grow one CART tree on all rows of ``(X, y)`` (no bootstrap).

    Splits minimise the summed Gini impurity of the children; candidate
    thresholds are midpoints between consecutive distinct values. Ties go
    to the lowest feature index, then the lowest threshold.
    """
    X, y = _check_xy(X, y)
    rng = _tree_stream(params.seed, 0) if rng is None else rng
    return _grow(X, y, params, rng, bootstrap=False)


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: tuple[Tree, ...]
    params: ForestParams
    feature_names: tuple[str, ...]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got shape {X.shape}")
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    @property
    def expected_value(self) -> float:
        return float(sum(t.expected_value for t in self.trees) / len(self.trees))

    def dumps(self) -> str:
        return serialize_model(self)

    def save(self, path) -> None:
        Path(path).write_text(serialize_model(self), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RandomForestModel":
        return deserialize_model(Path(path).read_text(encoding="utf-8"))


def fit_forest(X, y, params: ForestParams = ForestParams(), feature_names: Sequence[str] | None = None,
               threads: int = 1) -> RandomForestModel:
    """Fit ``params.n_trees`` trees, each on its own bootstrap sample.

    Tree ``t`` draws from a random stream keyed on ``(params.seed, t)``, so
    the model does not depend on ``threads``.
    """
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present to fit a forest")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValueError(f"{len(names)} feature names for {X.shape[1]} columns")

    def grow(t):
        return _grow(X, y, params, _tree_stream(params.seed, t), params.bootstrap)

    if threads > 1 and params.n_trees > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = tuple(pool.map(grow, range(params.n_trees)))
    else:
        trees = tuple(grow(t) for t in range(params.n_trees))
    return RandomForestModel(trees, params, names)


def predict_proba(model: RandomForestModel, X) -> np.ndarray:
    return model.predict_proba(X)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _encode_tree(tree: Tree) -> list:
    nodes = []
    for i in range(tree.n_nodes):
        f = int(tree.feature[i])
        cover = float(tree.cover[i])
        cover = int(cover) if cover.is_integer() else cover
        if f < 0:
            nodes.append([-1, None, cover, float(tree.value[i])])
        else:
            nodes.append([f, float(tree.threshold[i]), cover, float(tree.value[i])])
    return nodes


def _decode_tree(nodes, n_features: int, where: str) -> Tree:
    n = len(nodes)
    if n == 0:
        raise ModelFormatError(f"{where}: empty tree")
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    cover = np.zeros(n)
    value = np.zeros(n)
    stack: list[int] = []
    for i, node in enumerate(nodes):
        try:
            f, thr, cov, val = node
            f = int(f)
            cover[i] = float(cov)
            value[i] = float(val)
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"{where}, node {i}: malformed entry {node!r}") from exc
        if stack:
            p = stack[-1]
            if left[p] < 0:
                left[p] = i
            else:
                right[p] = i
                stack.pop()
        elif i > 0:
            raise ModelFormatError(f"{where}, node {i}: trailing node after a complete tree")
        if f >= 0:
            if f >= n_features:
                raise ModelFormatError(f"{where}, node {i}: feature index {f} out of range")
            if thr is None:
                raise ModelFormatError(f"{where}, node {i}: internal node without threshold")
            feature[i] = f
            threshold[i] = float(thr)
            stack.append(i)
    if stack:
        raise ModelFormatError(f"{where}: truncated tree, node {stack[-1]} lacks children")
    return Tree.from_arrays(feature, threshold, left, right, cover, value, n_features)


def serialize_model(model: RandomForestModel) -> str:
    params = asdict(model.params)
    header = json.dumps({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": params,
        "feature_names": list(model.feature_names),
        "n_trees": len(model.trees),
    }, indent=1)
    trees = ",\n".join(json.dumps(_encode_tree(t), separators=(",", ":")) for t in model.trees)
    # trees appended as one line each so diffs stay readable
    return header[:-2] + ',\n "trees": [\n' + trees + "\n ]\n}\n"


def deserialize_model(text: str) -> RandomForestModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file parse error at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a readmit forest model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"model version {d.get('version')!r} unsupported (expected {MODEL_VERSION})")
    try:
        params = ForestParams(**d["params"])
        names = tuple(d["feature_names"])
        raw_trees = d["trees"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model header invalid: {exc}") from exc
    if len(raw_trees) != d.get("n_trees", len(raw_trees)) or not raw_trees:
        raise ModelFormatError(f"expected {d.get('n_trees')} trees, found {len(raw_trees)}")
    trees = tuple(_decode_tree(t, len(names), f"tree {k}") for k, t in enumerate(raw_trees))
    return RandomForestModel(trees, params, names)
