"""Bagged regression forest; prediction is the plain mean of tree outputs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tree import TreeArrays, grow_tree


@dataclass(frozen=True)
class RfrConfig:
    n_estimators: int = 100
    max_depth: int | None = 30
    min_samples_split: int = 2
    bootstrap: bool = True
    feature_subsampling: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def to_dict(self):
        return asdict(self)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Per-tree generator; independent of the order trees are built in."""
    return np.random.default_rng([seed, index])


class RandomForestModel:
    model_type = "rfr"

    def __init__(self, trees: list[TreeArrays], config: RfrConfig, n_features: int):
        self.trees = trees
        self.config = config
        self.n_features = n_features

    def tree_predictions(self, features) -> np.ndarray:
        x = self._check(features)
        return np.stack([t.predict(x) for t in self.trees])

    def predict(self, features) -> np.ndarray:
        x = self._check(features)
        acc = np.zeros(len(x))
        for t in self.trees:
            acc = acc + t.predict(x)
        return acc / len(self.trees)

    def _check(self, features):
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected feature matrix with {self.n_features} columns, got {x.shape}")
        return x

    def params_dict(self) -> dict:
        return {"n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_params(cls, hyper: dict, params: dict) -> "RandomForestModel":
        return cls([TreeArrays.from_dict(t) for t in params["trees"]], RfrConfig(**hyper), params["n_features"])


def rfr_train(x, y, cfg: RfrConfig = RfrConfig(), progress=None) -> RandomForestModel:
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("empty training set")
    n, p = x.shape
    max_features = max(1, int(math.sqrt(p))) if cfg.feature_subsampling else None
    trees = []
    for t in range(cfg.n_estimators):
        rng = tree_rng(cfg.seed, t)
        if cfg.bootstrap:
            idx = rng.integers(0, n, n)
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        split_seed = int(rng.integers(0, 2**31 - 1))
        trees.append(grow_tree(xb, yb, cfg.max_depth, cfg.min_samples_split, max_features, split_seed))
        if progress and (t + 1) % 10 == 0:
            progress(f"forest: {t + 1}/{cfg.n_estimators} trees")
    return RandomForestModel(trees, cfg, p)


def rfr_predict(model: RandomForestModel, features) -> np.ndarray:
    return model.predict(features)
