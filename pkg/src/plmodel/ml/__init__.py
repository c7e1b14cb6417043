"""Regressors, model files and cross-validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .. import metrics
from ..dataset import Dataset, SplitSpec, fit_normalizer, kfold_indices, validation_split
from ..scene import atomic_write_text
from .forest import RandomForestModel, RfrConfig, rfr_predict, rfr_train
from .knn import KnnConfig, KnnModel, knn_fit, knn_predict
from .mlp import (MlpModel, TrainConfig, TrainingError, mlp_forward, mlp_grad_check, mlp_init,
                  mlp_train)
from .tree import DecisionTreeModel, DtrConfig, dtr_predict, dtr_train

MODEL_FILE_VERSION = 1

MODEL_TYPES = {
    "dtr": (DecisionTreeModel, DtrConfig),
    "rfr": (RandomForestModel, RfrConfig),
    "knn": (KnnModel, KnnConfig),
    "mlp": (MlpModel, TrainConfig),
}


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Model type plus hyperparameters; ``config`` None means the defaults."""

    model_type: str
    config: object = None
    validation: SplitSpec = field(default_factory=SplitSpec)

    def resolved(self):
        if self.model_type not in MODEL_TYPES:
            raise ValueError(f"unknown model type {self.model_type!r}")
        return self.config if self.config is not None else MODEL_TYPES[self.model_type][1]()


def train_model(spec: ModelSpec, train: Dataset, progress=None):
    """Fit a model of ``spec.model_type`` on ``train``.

    The MLP holds out a validation share of ``train`` and learns on
    min-max normalized inputs fitted on the remaining rows.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    cfg = spec.resolved()
    x, y = train.features, train.target
    if spec.model_type == "dtr":
        return dtr_train(x, y, cfg)
    if spec.model_type == "rfr":
        return rfr_train(x, y, cfg, progress=progress)
    if spec.model_type == "knn":
        return knn_fit(x, y, cfg)
    fit, val = validation_split(train, spec.validation)
    norm = fit_normalizer(fit.features)
    model = mlp_init(cfg.seed)
    model.normalizer = norm
    trained = mlp_train(model, norm.apply(fit.features), fit.target,
                        norm.apply(val.features), val.target, cfg, progress=progress)
    trained.normalizer = norm
    return trained


def model_to_dict(model) -> dict:
    return {
        "version": MODEL_FILE_VERSION,
        "model_type": model.model_type,
        "hyperparameters": model.config.to_dict(),
        "parameters": model.params_dict(),
    }


def dumps_model(model) -> str:
    return json.dumps(model_to_dict(model), separators=(",", ":")) + "\n"


def save_model(model, path) -> None:
    atomic_write_text(path, dumps_model(model))


def model_from_dict(doc: dict):
    if not isinstance(doc, dict) or doc.get("version") != MODEL_FILE_VERSION:
        raise ModelFileError("unsupported or missing model file version")
    kind = doc.get("model_type")
    if kind not in MODEL_TYPES:
        raise ModelFileError(f"unknown model_type {kind!r}")
    cls = MODEL_TYPES[kind][0]
    try:
        return cls.from_params(doc["hyperparameters"], doc["parameters"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed {kind} model file: {exc!r}") from exc


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(doc)


@dataclass(frozen=True)
class CrossValidationResult:
    folds: list
    mean: dict

    def fold_rmse(self) -> list[float]:
        return [f["rmse_db"] for f in self.folds]


def cross_validate(spec: ModelSpec, ds: Dataset, k: int = 10, seed: int = 42) -> CrossValidationResult:
    """Fresh model per fold; per-fold and mean RMSE / MAPE / MSLE / rho."""
    folds = []
    for train_idx, hold_idx in kfold_indices(len(ds), k, seed):
        model = train_model(spec, ds.subset(train_idx))
        hold = ds.subset(hold_idx)
        pred = model.predict(hold.features)
        try:
            rho = metrics.pearson(hold.target, pred)
        except ValueError:
            rho = None
        folds.append({
            "n": len(hold),
            "rmse_db": metrics.rmse(hold.target, pred),
            "mape_pct": metrics.mape(hold.target, pred),
            "msle": metrics.msle(hold.target, pred),
            "rho": rho,
        })
    mean = {}
    for key in ("rmse_db", "mape_pct", "msle", "rho"):
        vals = [f[key] for f in folds if f[key] is not None]
        mean[key] = sum(vals) / len(vals) if vals else None
    return CrossValidationResult(folds, mean)


__all__ = [
    "CrossValidationResult", "DecisionTreeModel", "DtrConfig", "KnnConfig", "KnnModel", "MlpModel",
    "ModelFileError", "ModelSpec", "RandomForestModel", "RfrConfig", "TrainConfig", "TrainingError",
    "cross_validate", "dtr_predict", "dtr_train", "dumps_model", "knn_fit", "knn_predict", "load_model",
    "mlp_forward", "mlp_grad_check", "mlp_init", "mlp_train", "model_from_dict", "rfr_predict",
    "rfr_train", "save_model", "train_model",
]
