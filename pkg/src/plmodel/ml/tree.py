"""CART regression tree with exact (sorted-value midpoint) split search.

Each node keeps, per feature, its samples as a contiguous slice of a
presorted index array, so a split costs one stable partition per feature.
Ties are broken by lowest feature index, then lowest threshold.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from ._codec import pack, unpack

LEAF = -1

# on-disk dtype per node field
_FIELDS = {"feature": "|i1", "threshold": "<f8", "left": "<i4", "right": "<i4",
           "value": "<f8", "count": "<i4"}


@dataclass(frozen=True)
class DtrConfig:
    max_depth: int | None = 30
    min_samples_split: int = 2
    criterion: str = "mse"

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.criterion != "mse":
            raise ValueError("only the mse criterion is supported")

    def to_dict(self):
        return asdict(self)


@njit(cache=True)
def _build(x, y, max_depth, min_split, max_features, seed):
    n, p = x.shape
    if max_features < p:
        np.random.seed(seed)
    order = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        order[f] = np.argsort(x[:, f], kind="mergesort")
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    goes_left = np.zeros(n, dtype=np.bool_)
    tmp = np.empty(n, dtype=np.int64)
    feats = np.arange(p)

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start
        ids0 = order[0, start:end]
        total = 0.0
        for i in range(m):
            total += y[ids0[i]]
        mean = total / m
        value[node] = mean
        count[node] = m
        tot = 0.0
        tot2 = 0.0
        for i in range(m):
            r = y[ids0[i]] - mean
            tot += r
            tot2 += r * r
        if m < min_split or (max_depth >= 0 and depth >= max_depth) or tot2 <= 0.0:
            continue

        if max_features < p:
            feats = np.sort(np.random.permutation(p)[:max_features])
        best = tot2 - 1e-12 * tot2
        best_f = -1
        best_thr = 0.0
        best_nl = 0
        for fi in range(feats.shape[0]):
            f = feats[fi]
            ids = order[f, start:end]
            sl = 0.0
            sl2 = 0.0
            for i in range(m - 1):
                r = y[ids[i]] - mean
                sl += r
                sl2 += r * r
                xi = x[ids[i], f]
                xn = x[ids[i + 1], f]
                if xn <= xi:
                    continue
                nl = i + 1
                nr = m - nl
                sr = tot - sl
                child = (sl2 - sl * sl / nl) + ((tot2 - sl2) - sr * sr / nr)
                if child < best:
                    best = child
                    best_f = f
                    thr = 0.5 * (xi + xn)
                    if thr >= xn:
                        thr = xi
                    best_thr = thr
                    best_nl = nl
        if best_f < 0:
            continue

        ids = order[best_f, start:end]
        for i in range(m):
            goes_left[ids[i]] = x[ids[i], best_f] <= best_thr
        for f in range(p):
            a = 0
            b = best_nl
            for i in range(start, end):
                s = order[f, i]
                if goes_left[s]:
                    tmp[a] = s
                    a += 1
                else:
                    tmp[b] = s
                    b += 1
            order[f, start:end] = tmp[:m]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        st_node[top] = rc
        st_start[top] = start + best_nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = start + best_nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True)
def _predict(x, feature, threshold, left, right, value):
    out = np.empty(x.shape[0])
    for r in range(x.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if x[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@dataclass(frozen=True)
class TreeArrays:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        return _predict(x, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        return {k: pack(getattr(self, k), _FIELDS[k]) for k in _FIELDS}

    @classmethod
    def from_dict(cls, d) -> "TreeArrays":
        out = {}
        for k, code in _FIELDS.items():
            a = unpack(d[k])
            out[k] = np.ascontiguousarray(a, dtype=np.int64 if code[1] == "i" else float)
            if out[k].ndim != 1:
                raise ValueError(f"tree field {k} must be one-dimensional")
        n = len(out["feature"])
        if any(len(v) != n for v in out.values()):
            raise ValueError("tree arrays differ in length")
        inner = out["feature"] != LEAF
        for k in ("left", "right"):
            if np.any((out[k][inner] <= 0) | (out[k][inner] >= n)):
                raise ValueError("tree child index out of range")
        return cls(**out)


def grow_tree(x, y, max_depth: int | None = 30, min_samples_split: int = 2,
              max_features: int | None = None, seed: int = 0) -> TreeArrays:
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("empty training set")
    if len(y) != len(x):
        raise ValueError("feature/target length mismatch")
    p = x.shape[1]
    mf = p if max_features is None else max(1, min(int(max_features), p))
    arrays = _build(x, y, -1 if max_depth is None else int(max_depth), int(min_samples_split), mf, int(seed))
    return TreeArrays(*arrays)


class DecisionTreeModel:
    model_type = "dtr"

    def __init__(self, tree: TreeArrays, config: DtrConfig, n_features: int):
        self.tree = tree
        self.config = config
        self.n_features = n_features

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected feature matrix with {self.n_features} columns, got {x.shape}")
        return self.tree.predict(x)

    def params_dict(self) -> dict:
        return {"n_features": self.n_features, "tree": self.tree.to_dict()}

    @classmethod
    def from_params(cls, hyper: dict, params: dict) -> "DecisionTreeModel":
        return cls(TreeArrays.from_dict(params["tree"]), DtrConfig(**hyper), params["n_features"])


def dtr_train(x, y, cfg: DtrConfig = DtrConfig()) -> DecisionTreeModel:
    tree = grow_tree(x, y, cfg.max_depth, cfg.min_samples_split)
    return DecisionTreeModel(tree, cfg, np.asarray(x).shape[1])


def dtr_predict(model: DecisionTreeModel, features) -> np.ndarray:
    return model.predict(features)
