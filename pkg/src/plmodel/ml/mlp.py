"""Feed-forward regressor: sigmoid hidden layers, linear output, Adam on MSE.

Inputs are expected min-max normalized; targets (dB) are used as-is.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..dataset import Normalizer

LAYERS = (8, 128, 128, 64, 32, 1)


class TrainingError(RuntimeError):
    """Raised when training diverges."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 1000
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 42
    patience: int | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MlpModel:
    model_type = "mlp"

    def __init__(self, weights, biases, normalizer: Normalizer | None = None,
                 config: TrainConfig | None = None):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.normalizer = normalizer
        self.config = config or TrainConfig()
        self.history: dict[str, list[float]] = {"train_mse": [], "val_mse": []}

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    def params(self):
        return self.weights + self.biases

    def copy(self) -> "MlpModel":
        m = MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                     self.normalizer, self.config)
        m.history = {k: list(v) for k, v in self.history.items()}
        return m

    def forward(self, x) -> np.ndarray:
        """Network output for already-normalized inputs."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected input with {self.n_features} columns, got {x.shape}")
        out = _forward(self.weights, self.biases, x)[-1][:, 0]
        if not np.all(np.isfinite(out)):
            raise TrainingError("non-finite network output (diverged parameters)")
        return out

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if self.normalizer is not None:
            x = self.normalizer.apply(x)
        return self.forward(x)

    def params_dict(self) -> dict:
        return {
            "layers": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "normalizer": None if self.normalizer is None else self.normalizer.to_dict(),
            "history": self.history,
        }

    @classmethod
    def from_params(cls, hyper: dict, params: dict) -> "MlpModel":
        norm = params.get("normalizer")
        m = cls(params["weights"], params["biases"], None if norm is None else Normalizer.from_dict(norm),
                TrainConfig(**hyper))
        m.history = {k: list(v) for k, v in params.get("history", {}).items()}
        return m


def mlp_init(seed: int = 42, layers=LAYERS) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _forward(weights, biases, x):
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if i == last else _sigmoid(z)
        acts.append(h)
    return acts


def mse_loss(model: MlpModel, x, y) -> float:
    out = _forward(model.weights, model.biases, np.asarray(x, dtype=float))[-1][:, 0]
    return float(np.mean((out - y) ** 2))


def gradients(weights, biases, x, y):
    """Loss and analytic MSE gradients (weights first, then biases)."""
    acts = _forward(weights, biases, x)
    out = acts[-1][:, 0]
    diff = out - y
    loss = float(np.mean(diff * diff))
    delta = (2.0 / len(y)) * diff[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            a = acts[i]
            delta = (delta @ weights[i].T) * a * (1.0 - a)
    return loss, gw + gb


def mlp_forward(model: MlpModel, features) -> np.ndarray:
    return model.forward(features)


def mlp_train(model: MlpModel, x, y, x_val=None, y_val=None, cfg: TrainConfig = TrainConfig(),
              progress=None) -> MlpModel:
    """Mini-batch Adam.  Returns a new model with ``history`` filled per epoch."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    model.config = cfg
    model.history = {"train_mse": [], "val_mse": []}
    # one flat parameter buffer; the model's arrays become views into it
    params = model.params()
    flat = np.concatenate([p.ravel() for p in params])
    views, off = [], 0
    for p in params:
        views.append(flat[off:off + p.size].reshape(p.shape))
        off += p.size
    nw = len(model.weights)
    model.weights, model.biases = views[:nw], views[nw:]
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    g = np.empty_like(flat)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    best_val, best_flat, stale = np.inf, None, 0
    n = len(x)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = gradients(model.weights, model.biases, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch + 1}, step {step + 1}")
            running += loss * len(idx)
            step += 1
            np.concatenate([gi.ravel() for gi in grads], out=g)
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            flat -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        train_mse = running / n
        model.history["train_mse"].append(train_mse)
        if x_val is not None and len(x_val):
            val = mse_loss(model, x_val, y_val)
            if not np.isfinite(val):
                raise TrainingError(f"validation loss became non-finite at epoch {epoch + 1}")
            model.history["val_mse"].append(val)
            if cfg.patience is not None:
                if val < best_val:
                    best_val, stale = val, 0
                    best_flat = flat.copy()
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
        if progress and (epoch + 1) % max(1, cfg.epochs // 10) == 0:
            progress(f"mlp epoch {epoch + 1}/{cfg.epochs}: train mse {train_mse:.4f}")
    if best_flat is not None:
        flat[...] = best_flat
    if not np.all(np.isfinite(flat)):
        raise TrainingError("parameters became non-finite")
    return model


def mlp_grad_check(model: MlpModel, x, y, n_params: int = 100, seed: int = 0, step: float = 1e-6,
                   gradient_fn=gradients) -> float:
    """Max relative difference between analytic and central-difference gradients.

    ``gradient_fn`` is injectable so corrupted backprop can be checked.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("gradient check needs a non-empty batch")
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    _, analytic = gradient_fn(weights, biases, x, y)
    params = weights + biases
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = flat - offsets[li]
        p = params[li].reshape(-1)
        orig = p[local]
        p[local] = orig + step
        o_up = _forward(weights, biases, x)[-1][:, 0]
        p[local] = orig - step
        o_down = _forward(weights, biases, x)[-1][:, 0]
        p[local] = orig
        # (o+ - y)^2 - (o- - y)^2 factored, so large dB losses do not cancel
        g_n = float(np.mean((o_up - o_down) * (o_up + o_down - 2.0 * y))) / (2.0 * step)
        g_a = float(analytic[li].reshape(-1)[local])
        if not (np.isfinite(g_n) and np.isfinite(g_a)):
            return np.inf
        worst = max(worst, abs(g_a - g_n) / max(abs(g_a) + abs(g_n), 1e-12))
    return worst
