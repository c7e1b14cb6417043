"""K-nearest-neighbour regression with Manhattan distance on min-max features.

Neighbours are ranked by (distance, training index), so ties at the k-th
distance go to the lowest training index.  A k-d tree supplies candidate
neighbours; the final ranking uses exact distances recomputed here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._codec import pack, unpack
from ..dataset import Normalizer, fit_normalizer


@dataclass(frozen=True)
class KnnConfig:
    k: int = 30
    metric: str = "manhattan"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric != "manhattan":
            raise ValueError("only the manhattan metric is supported")

    def to_dict(self):
        return asdict(self)


class KnnModel:
    model_type = "knn"

    def __init__(self, normalizer: Normalizer, points: np.ndarray, targets: np.ndarray, config: KnnConfig):
        self.normalizer = normalizer
        self.points = np.ascontiguousarray(points, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.config = config
        self._tree = None

    @property
    def n_features(self) -> int:
        return self.points.shape[1]

    def neighbors(self, features) -> np.ndarray:
        """(n_queries, k) training indices of the nearest neighbours."""
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected feature matrix with {self.n_features} columns, got {x.shape}")
        k = self.config.k
        if k > len(self.points):
            raise ValueError(f"k exceeds training size (k={k}, n={len(self.points)})")
        q = self.normalizer.apply(x)
        out = np.empty((len(q), k), dtype=np.int64)
        if len(q) == 0:
            return out
        if k == len(self.points):
            for i in range(len(q)):
                out[i] = self._rank(q[i], np.arange(len(self.points)))[:k]
            return out
        if self._tree is None:
            self._tree = cKDTree(self.points)
        dist, _ = self._tree.query(q, k=k, p=1)
        dist = dist.reshape(len(q), k)
        radius = dist[:, -1] * (1.0 + 1e-9) + 1e-12
        cands = self._tree.query_ball_point(q, radius, p=1)
        for i in range(len(q)):
            out[i] = self._rank(q[i], np.asarray(cands[i], dtype=np.int64))[:k]
        return out

    def _rank(self, qi, cand):
        d = np.abs(self.points[cand] - qi).sum(axis=1)
        return cand[np.lexsort((cand, d))]

    def predict(self, features) -> np.ndarray:
        nb = self.neighbors(features)
        return self.targets[nb].mean(axis=1)

    def params_dict(self) -> dict:
        return {"normalizer": self.normalizer.to_dict(), "points": pack(self.points),
                "targets": pack(self.targets)}

    @classmethod
    def from_params(cls, hyper: dict, params: dict) -> "KnnModel":
        return cls(Normalizer.from_dict(params["normalizer"]), unpack(params["points"]).astype(float),
                   unpack(params["targets"]).astype(float), KnnConfig(**hyper))


def knn_fit(x, y, cfg: KnnConfig = KnnConfig()) -> KnnModel:
    x = np.asarray(x, dtype=float)
    if len(x) < cfg.k:
        raise ValueError(f"k exceeds training size (k={cfg.k}, n={len(x)})")
    norm = fit_normalizer(x)
    return KnnModel(norm, norm.apply(x), np.asarray(y, dtype=float).copy(), cfg)


def knn_predict(model: KnnModel, features) -> np.ndarray:
    return model.predict(features)
