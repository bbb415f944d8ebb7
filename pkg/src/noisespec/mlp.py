"""From-scratch multilayer perceptron regression of NSD parameters.

Fully-connected rectifier network with an affine output head, trained by
mini-batch gradient descent with Adam, inverted dropout, coupled weight decay
and patience-based early stopping.  The estimator follows the scikit-learn
fit/predict protocol so it composes with the wider ecosystem; the numerics
(forward pass, backpropagation, Adam) are implemented here directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .physics import NsdParams

MODEL_FORMAT_VERSION = "noisespec-mlp-1"

LEARNING_RATES = (1e-2, 1e-3, 1e-4)
BATCH_SIZES = (2, 4, 8, 16, 32)
DROPOUTS = (0.0, 0.2, 0.5)
WEIGHT_DECAYS = (0.0, 1e-6, 1e-5, 1e-4, 1e-3)


class TrainingDivergedError(RuntimeError):
    """Validation risk became non-finite during training."""


@dataclass(frozen=True)
class MlpConfig:
    hidden_layer_count: int
    hidden_dim: int
    learning_rate: float
    batch_size: int
    dropout: float = 0.0
    weight_decay: float = 0.0
    max_epochs: int = 300
    patience: int = 10

    def __post_init__(self):
        if not 1 <= self.hidden_layer_count < 32:
            raise ValueError(f"hidden_layer_count {self.hidden_layer_count} outside [1, 32)")
        if not 1 <= self.hidden_dim < 1024:
            raise ValueError(f"hidden_dim {self.hidden_dim} outside [1, 1024)")
        if self.learning_rate not in LEARNING_RATES:
            raise ValueError(f"learning_rate must be one of {LEARNING_RATES}")
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch_size must be one of {BATCH_SIZES}")
        if self.dropout not in DROPOUTS:
            raise ValueError(f"dropout must be one of {DROPOUTS}")
        if self.weight_decay not in WEIGHT_DECAYS:
            raise ValueError(f"weight_decay must be one of {WEIGHT_DECAYS}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


# hyperparameters selected by validation search for each pulse-count cap
TUNED_CONFIGS: dict[int, MlpConfig] = {
    1: MlpConfig(1, 2, 1e-2, 16, 0.0, 1e-3),
    8: MlpConfig(5, 328, 1e-4, 4, 0.0, 1e-4),
    16: MlpConfig(2, 133, 1e-3, 8, 0.0, 1e-6),
    24: MlpConfig(3, 224, 1e-4, 2, 0.0, 1e-4),
    32: MlpConfig(3, 145, 1e-4, 4, 0.0, 1e-5),
    40: MlpConfig(3, 286, 1e-4, 4, 0.0, 1e-4),
    48: MlpConfig(3, 38, 1e-3, 8, 0.0, 1e-4),
}


@dataclass
class MlpParams:
    """Per-layer weight matrices (in_dim x out_dim) and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def init_params(layer_dims: list[int], rng: np.random.Generator) -> MlpParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward(params: MlpParams, x: np.ndarray,
            dropout_masks: list[np.ndarray] | None = None):
    """Network output plus cached pre-activations and activations.

    x is (batch, in_dim) or (in_dim,).  Hidden layers apply ReLU; the output
    layer is affine.  dropout_masks, when given, multiply each hidden
    activation (inverted-dropout masks carry the 1/(1-p) scale already).
    """
    single = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dim {h.shape[1]} != network input {params.weights[0].shape[0]}")
    n_layers = len(params.weights)
    pre, acts = [], [h]
    for idx, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        if idx < n_layers - 1:
            h = np.maximum(z, 0.0)
            if dropout_masks is not None:
                h = h * dropout_masks[idx]
        else:
            h = z
        acts.append(h)
    out = h[0] if single else h
    return out, (pre, acts)


def mse_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error over outputs (and batch rows when 2-D)."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    return float(np.mean((y_hat - y) ** 2))


def gradients(params: MlpParams, x: np.ndarray, y: np.ndarray,
              weight_decay: float = 0.0,
              dropout_masks: list[np.ndarray] | None = None):
    """Exact gradients of batch-mean MSE + weight_decay * sum ||W||^2.

    Returns (grads, loss) where grads mirrors MlpParams.  The decay term
    applies to weights only.  ReLU subgradient at 0 is 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    y_hat, (pre, acts) = forward(params, x, dropout_masks)
    batch, q = y_hat.shape
    loss = mse_loss(y_hat, y)
    if weight_decay:
        loss += weight_decay * sum(float(np.sum(w * w)) for w in params.weights)

    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    delta = 2.0 * (y_hat - y) / (batch * q)
    for idx in range(n_layers - 1, -1, -1):
        grad_w[idx] = acts[idx].T @ delta
        if weight_decay:
            grad_w[idx] += 2.0 * weight_decay * params.weights[idx]
        grad_b[idx] = delta.sum(axis=0)
        if idx > 0:
            delta = delta @ params.weights[idx].T
            if dropout_masks is not None:
                delta = delta * dropout_masks[idx - 1]
            delta = delta * (pre[idx - 1] > 0.0)
    grads = MlpParams(grad_w, grad_b)
    if any(not np.all(np.isfinite(g)) for g in grad_w + grad_b):
        raise TrainingDivergedError("non-finite gradient")
    return grads, loss


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""

    m: MlpParams
    v: MlpParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams) -> "AdamState":
        zeros = lambda: MlpParams([np.zeros_like(w) for w in params.weights],
                                  [np.zeros_like(b) for b in params.biases])
        return cls(m=zeros(), v=zeros())


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams,
              learning_rate: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for ms, vs, ps, gs in ((state.m.weights, state.v.weights, params.weights, grads.weights),
                           (state.m.biases, state.v.biases, params.biases, grads.biases)):
        for m, v, p, g in zip(ms, vs, ps, gs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


class ParamScaler:
    """Min-max scaling of the three regression targets to [0, 1]."""

    def __init__(self, mins, maxs):
        self.mins = np.asarray(mins, dtype=float)
        self.maxs = np.asarray(maxs, dtype=float)
        if np.any(self.maxs <= self.mins):
            raise ValueError("scaler needs maxs > mins")

    def scale(self, y):
        return (np.asarray(y, dtype=float) - self.mins) / (self.maxs - self.mins)

    def unscale(self, y):
        return np.asarray(y, dtype=float) * (self.maxs - self.mins) + self.mins


class MlpRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around the from-scratch network.

    fit(X, y) trains on scaled targets with Adam and early stopping; a
    validation set may be passed explicitly (X_val, y_val), otherwise a
    seeded 3:1 tail split of the training data is used.  target_ranges, when
    given as (mins, maxs), pins the target scaling (the sampling ranges of
    the dataset); otherwise the ranges are taken from y.
    """

    def __init__(self, hidden_layer_count=2, hidden_dim=133, learning_rate=1e-3,
                 batch_size=8, dropout=0.0, weight_decay=0.0, max_epochs=300,
                 patience=10, seed=0, target_ranges=None):
        self.hidden_layer_count = hidden_layer_count
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.target_ranges = target_ranges

    @property
    def config(self) -> MlpConfig:
        return MlpConfig(self.hidden_layer_count, self.hidden_dim,
                         self.learning_rate, self.batch_size, self.dropout,
                         self.weight_decay, self.max_epochs, self.patience)

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self.config
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        if (X_val is None) != (y_val is None):
            raise ValueError("pass both X_val and y_val or neither")
        if X_val is None:
            n_val = max(1, len(X) // 4)
            X, X_val = X[:-n_val], X[-n_val:]
            y, y_val = y[:-n_val], y[-n_val:]
        else:
            X_val = check_array(X_val, dtype=np.float64)
            y_val = check_array(y_val, dtype=np.float64, ensure_2d=False)
            if y_val.ndim == 1:
                y_val = y_val[:, None]

        if self.target_ranges is not None:
            mins, maxs = self.target_ranges
        else:
            mins, maxs = y.min(axis=0), y.max(axis=0)
            flat = maxs <= mins
            maxs = np.where(flat, mins + 1.0, maxs)
        scaler = ParamScaler(mins, maxs)
        ys = scaler.scale(y)
        ys_val = scaler.scale(y_val)

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        dims = [X.shape[1]] + [cfg.hidden_dim] * cfg.hidden_layer_count + [y.shape[1]]
        params = init_params(dims, rng)
        adam = AdamState.for_params(params)

        best_val = np.inf
        best_params = params.copy()
        best_epoch = -1
        history = []
        stale = 0
        n = len(X)
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                masks = None
                if cfg.dropout > 0.0:
                    keep = 1.0 - cfg.dropout
                    masks = [
                        (rng.random((len(batch), d)) < keep) / keep
                        for d in dims[1:-1]
                    ]
                grads, _ = gradients(params, X[batch], ys[batch],
                                     cfg.weight_decay, masks)
                adam_step(adam, params, grads, cfg.learning_rate)

            train_risk = mse_loss(forward(params, X)[0], ys)
            val_risk = mse_loss(forward(params, X_val)[0], ys_val)
            history.append((train_risk, val_risk))
            if not np.isfinite(val_risk):
                raise TrainingDivergedError(
                    f"validation risk {val_risk} at epoch {epoch}")
            if val_risk < best_val:
                best_val = val_risk
                best_params = params.copy()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

        self.params_ = best_params
        self.scaler_ = scaler
        self.history_ = history
        self.best_epoch_ = best_epoch
        self.best_val_risk_ = best_val
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        out, _ = forward(self.params_, X)
        return self.scaler_.unscale(out)


def fit_model(dataset, n_bar: int, config: MlpConfig, seed: int) -> MlpRegressor:
    """Train on the dataset's train split, early-stop on its validation split."""
    from .dataset import feature_matrix

    x_tr, y_tr = feature_matrix(dataset, n_bar, "train")
    x_va, y_va = feature_matrix(dataset, n_bar, "validation")
    ranges = (dataset.ranges.lower(), dataset.ranges.upper())
    model = MlpRegressor(seed=seed, target_ranges=ranges,
                         **{f.name: getattr(config, f.name) for f in fields(MlpConfig)})
    model.fit(x_tr, y_tr, x_va, y_va)
    model.omega_c_ = dataset.ranges.omega_c
    model.dataset_seed_ = dataset.seed
    model.n_bar_ = n_bar
    return model


# clamps keeping wild network outputs physically valid for curve simulation
_MIN_SIGMA_MHZ = 1e-4


def predict_params(model: MlpRegressor, x, omega_c: float | None = None) -> NsdParams:
    """NSD parameter estimate for one feature vector.

    Inference is deterministic (no dropout).  Outputs are clamped to the
    physical domain (s0, amplitude >= 0; sigma >= 1e-4 MHz) so downstream
    curve simulation stays well-posed.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_params takes a single feature vector")
    est = model.predict(x[None, :])[0]
    if omega_c is None:
        omega_c = getattr(model, "omega_c_", None)
    if omega_c is None:
        raise ValueError("omega_c not attached to model; pass it explicitly")
    return NsdParams(s0=max(float(est[0]), 0.0),
                     amplitude=max(float(est[1]), 0.0),
                     sigma=max(float(est[2]), _MIN_SIGMA_MHZ),
                     omega_c=omega_c)


# ---------------------------------------------------------------------------
# hyperparameter random search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    layer_range: tuple[int, int] = (1, 32)
    dim_range: tuple[int, int] = (1, 1024)
    learning_rates: tuple[float, ...] = LEARNING_RATES
    batch_sizes: tuple[int, ...] = BATCH_SIZES
    dropouts: tuple[float, ...] = DROPOUTS
    weight_decays: tuple[float, ...] = WEIGHT_DECAYS


def _log_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Integer drawn log-uniformly from [lo, hi)."""
    if hi - lo <= 1:
        return lo
    u = rng.uniform(math.log(lo), math.log(hi))
    return min(int(math.exp(u)), hi - 1)


def sample_config(space: SearchSpace, rng: np.random.Generator,
                  max_epochs: int, patience: int) -> MlpConfig:
    return MlpConfig(
        hidden_layer_count=_log_uniform_int(rng, *space.layer_range),
        hidden_dim=_log_uniform_int(rng, *space.dim_range),
        learning_rate=float(rng.choice(space.learning_rates)),
        batch_size=int(rng.choice(space.batch_sizes)),
        dropout=float(rng.choice(space.dropouts)),
        weight_decay=float(rng.choice(space.weight_decays)),
        max_epochs=max_epochs,
        patience=patience,
    )


def random_search(dataset, n_bar: int, space: SearchSpace, trials: int,
                  seed: int, max_epochs: int = 40, patience: int = 5,
                  log=None):
    """Uniform random search; returns (best MlpConfig, trial records).

    Each trial trains with a reduced epoch budget on its own seeded stream;
    the winner has minimal validation risk, ties broken by parameter count
    then trial index.  Diverged trials are skipped and recorded.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    records = []
    best_key = None
    best_config = None
    for trial in range(trials):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, trial))))
        config = sample_config(space, rng, max_epochs, patience)
        try:
            model = fit_model(dataset, n_bar, config, seed=trial)
            risk = model.best_val_risk_
            count = model.params_.count()
            records.append({"trial": trial, "config": config, "val_risk": risk,
                            "param_count": count, "status": "ok"})
            key = (risk, count, trial)
            if best_key is None or key < best_key:
                best_key, best_config = key, config
        except TrainingDivergedError as exc:
            records.append({"trial": trial, "config": config,
                            "val_risk": float("inf"), "status": f"failed: {exc}"})
            if log is not None:
                log(f"trial {trial} failed: {exc}")
    if best_config is None:
        raise TrainingDivergedError("all search trials diverged")
    return best_config, records


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(model: MlpRegressor, path) -> None:
    check_is_fitted(model, "params_")
    cfg = model.config
    dims = model.params_.layer_dims
    lines = [
        f"format = {MODEL_FORMAT_VERSION}",
        f"input_dim = {dims[0]}",
        f"layer_dims = {' '.join(str(d) for d in dims)}",
        f"hidden_layer_count = {cfg.hidden_layer_count}",
        f"hidden_dim = {cfg.hidden_dim}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"batch_size = {cfg.batch_size}",
        f"dropout = {cfg.dropout!r}",
        f"weight_decay = {cfg.weight_decay!r}",
        f"max_epochs = {cfg.max_epochs}",
        f"patience = {cfg.patience}",
        f"seed = {model.seed}",
        f"n_bar = {getattr(model, 'n_bar_', 0)}",
        f"dataset_seed = {getattr(model, 'dataset_seed_', 0)}",
        f"omega_c_rad_per_us = {getattr(model, 'omega_c_', 0.0)!r}",
        "scale_min = " + " ".join(repr(float(v)) for v in model.scaler_.mins),
        "scale_max = " + " ".join(repr(float(v)) for v in model.scaler_.maxs),
    ]
    for w, b in zip(model.params_.weights, model.params_.biases):
        for row in w:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


class ModelFormatError(ValueError):
    pass


_MODEL_HEADER_KEYS = ["format", "input_dim", "layer_dims", "hidden_layer_count",
                      "hidden_dim", "learning_rate", "batch_size", "dropout",
                      "weight_decay", "max_epochs", "patience", "seed", "n_bar",
                      "dataset_seed", "omega_c_rad_per_us", "scale_min", "scale_max"]


def load_model(path) -> MlpRegressor:
    lines = Path(path).read_text().splitlines()
    header = {}
    for i, key in enumerate(_MODEL_HEADER_KEYS):
        if i >= len(lines) or "=" not in lines[i]:
            raise ModelFormatError(f"missing header line for {key!r}")
        name, _, value = lines[i].partition("=")
        if name.strip() != key:
            raise ModelFormatError(f"expected key {key!r}, found {name.strip()!r}")
        header[key] = value.strip()
    if header["format"] != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format {header['format']!r}")

    dims = [int(v) for v in header["layer_dims"].split()]
    if dims[0] != int(header["input_dim"]) or len(dims) < 2:
        raise ModelFormatError("layer_dims inconsistent with input_dim")
    expected_hidden = int(header["hidden_layer_count"])
    if len(dims) != expected_hidden + 2:
        raise ModelFormatError("layer_dims inconsistent with hidden_layer_count")
    if any(d != int(header["hidden_dim"]) for d in dims[1:-1]):
        raise ModelFormatError("hidden dims do not chain with hidden_dim")

    body = lines[len(_MODEL_HEADER_KEYS):]
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(dims, dims[1:]):
        need = fan_in + 1
        if pos + need > len(body):
            raise ModelFormatError("weight block truncated")
        block = body[pos:pos + need]
        pos += need
        try:
            w = np.array([[float(v) for v in row.split()] for row in block[:-1]])
            b = np.array([float(v) for v in block[-1].split()])
        except ValueError:
            raise ModelFormatError("non-numeric weight entry") from None
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ModelFormatError(
                f"weight block shape {w.shape} does not chain ({fan_in}, {fan_out})")
        weights.append(w)
        biases.append(b)
    if any(row.strip() for row in body[pos:]):
        raise ModelFormatError("trailing data after weight blocks")

    model = MlpRegressor(
        hidden_layer_count=expected_hidden,
        hidden_dim=int(header["hidden_dim"]),
        learning_rate=float(header["learning_rate"]),
        batch_size=int(header["batch_size"]),
        dropout=float(header["dropout"]),
        weight_decay=float(header["weight_decay"]),
        max_epochs=int(header["max_epochs"]),
        patience=int(header["patience"]),
        seed=int(header["seed"]),
    )
    model.params_ = MlpParams(weights, biases)
    model.scaler_ = ParamScaler([float(v) for v in header["scale_min"].split()],
                                [float(v) for v in header["scale_max"].split()])
    model.history_ = []
    model.best_epoch_ = -1
    model.best_val_risk_ = float("nan")
    model.n_features_in_ = dims[0]
    model.n_outputs_ = dims[-1]
    model.n_bar_ = int(header["n_bar"])
    model.dataset_seed_ = int(header["dataset_seed"])
    model.omega_c_ = float(header["omega_c_rad_per_us"])
    return model
