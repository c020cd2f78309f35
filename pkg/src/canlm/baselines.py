"""Classical baselines: a logit-link linear model on engineered per-window
aggregates and a small 1-D convolutional classifier on raw signal matrices.

Both consume decoded signals directly (not the LM token vocabulary) and train
with the same balanced class weighting as the fine-tuned model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import minimize
from torch import nn

from canlm.errors import TaskError
from canlm.schema import CONTINUOUS, ENUMERATED, SignalSchema
from canlm.trips import VALID, TripLog


# ---------------------------------------------------------------------------
# Feature engineering
# ---------------------------------------------------------------------------

CONT_AGGREGATES = 4  # min, max, mean, max |one-step diff|
ENUM_AGGREGATES = 2  # mode index, transition count


def feature_vector_length(schema: SignalSchema) -> int:
    return CONT_AGGREGATES * len(schema.continuous_features()) + ENUM_AGGREGATES * len(schema.enumerated_features())


def engineer_features(trip: TripLog, start: int, schema: SignalSchema) -> tuple[np.ndarray, int]:
    """Fixed per-window aggregates; sentinel cells are skipped and counted.

    Continuous features contribute (min, max, mean, max |diff|) over valid
    values; enumerated features contribute (mode state index, transition
    count). Features with no valid cell in the window contribute zeros.
    """
    w = schema.frames_per_window
    sl = slice(start, start + w)
    out = np.zeros(feature_vector_length(schema))
    skipped = 0
    pos = 0
    for spec in schema.continuous_features():
        vals = trip.cont[spec.name][sl]
        ok = trip.flags[spec.name][sl] == VALID
        skipped += int((~ok).sum())
        v = vals[ok]
        if v.size:
            out[pos : pos + 3] = (v.min(), v.max(), v.mean())
            if v.size >= 2:
                out[pos + 3] = np.abs(np.diff(v)).max()
        pos += CONT_AGGREGATES
    for spec in schema.enumerated_features():
        idx = trip.enum[spec.name][sl]
        ok = trip.flags[spec.name][sl] == VALID
        skipped += int((~ok).sum())
        s = idx[ok]
        if s.size:
            counts = np.bincount(s, minlength=len(spec.states))
            out[pos] = int(np.argmax(counts))  # ties resolve to the smallest index
            out[pos + 1] = int((np.diff(s) != 0).sum())
        pos += ENUM_AGGREGATES
    return out, skipped


def build_feature_matrix(corpus, labels, schema: SignalSchema, binary: bool = True):
    """Engineered features for every labeled window; y per the task kind."""
    from canlm.datagen import EventLabel  # noqa: F401  (type reference)

    by_key = {t.key: t for t in corpus}
    X = np.empty((len(labels), feature_vector_length(schema)))
    y = np.empty(len(labels), dtype=np.int64)
    total_skipped = 0
    for i, l in enumerate(labels):
        X[i], skipped = engineer_features(by_key[(l.vehicle_id, l.trip_id)], l.window_start, schema)
        total_skipped += skipped
        y[i] = int(l.is_collision) if binary else l.impact_class
    return X, y, total_skipped


# ---------------------------------------------------------------------------
# GLM (logit link) with ridge regularization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlmConfig:
    ridge: float = 1e-4
    tol: float = 1e-6  # infinity-norm gradient tolerance
    max_iter: int = 500
    class_weighted: bool = True


@dataclass
class GlmModel:
    weights: np.ndarray  # [n_features + 1, n_classes]; row 0 is the intercept
    mean: np.ndarray
    scale: np.ndarray
    n_classes: int
    converged: bool
    final_grad_norm: float

    def scores(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return self.weights[0] + Z @ self.weights[1:]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.scores(X).argmax(axis=1)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        s = self.scores(X)
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)


def train_glm(X, y, config: GlmConfig = GlmConfig()) -> GlmModel:
    """Weighted multinomial logistic regression (binary = 2-class case).

    Deterministic: zero init, L-BFGS with analytic gradient, ridge penalty on
    non-intercept weights. Non-convergence warns with the final gradient norm
    but still returns the fit.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.isfinite(X).all():
        raise TaskError("feature matrix contains non-finite values")
    classes = np.unique(y)
    if classes.size < 2:
        raise TaskError("unsatisfiable task: need at least 2 classes in the labels")
    k = int(y.max()) + 1
    n, d = X.shape

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = np.column_stack([np.ones(n), (X - mean) / scale])

    if config.class_weighted:
        counts = np.bincount(y, minlength=k).astype(np.float64)
        w_class = np.where(counts > 0, n / (k * np.maximum(counts, 1)), 0.0)
        sw = w_class[y]
        sw = sw / sw.mean()
    else:
        sw = np.ones(n)

    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def objective(flat):
        W = flat.reshape(d + 1, k)
        S = Z @ W
        S -= S.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(S).sum(axis=1))
        nll = -(sw * (S[np.arange(n), y] - logZ)).sum() / n
        P = np.exp(S - logZ[:, None])
        G = Z.T @ ((P - onehot) * sw[:, None]) / n
        nll += 0.5 * config.ridge * float((W[1:] ** 2).sum())
        G[1:] += config.ridge * W[1:]
        return nll, G.ravel()

    res = minimize(
        objective,
        np.zeros((d + 1) * k),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "ftol": 1e-14, "gtol": config.tol},
    )
    _, grad = objective(res.x)
    grad_norm = float(np.abs(grad).max())
    converged = grad_norm <= config.tol * 10  # L-BFGS pgtol semantics are per-projection
    if not converged:
        warnings.warn(f"GLM did not reach gradient tolerance: |grad|_inf = {grad_norm:.3e}", stacklevel=2)
    return GlmModel(
        weights=res.x.reshape(d + 1, k),
        mean=mean,
        scale=scale,
        n_classes=k,
        converged=converged,
        final_grad_norm=grad_norm,
    )


# ---------------------------------------------------------------------------
# 1-D CNN over [time, features] windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CnnConfig:
    channels: tuple[int, int] = (32, 64)
    kernel: int = 3
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    deterministic: bool = True


class _Cnn(nn.Module):
    def __init__(self, n_features: int, n_classes: int, cfg: CnnConfig):
        super().__init__()
        c1, c2 = cfg.channels
        pad = cfg.kernel // 2
        self.net = nn.Sequential(
            nn.Conv1d(n_features, c1, cfg.kernel, padding=pad),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(c1, c2, cfg.kernel, padding=pad),
            nn.ReLU(),
            nn.AdaptiveAvgPool1d(1),
        )
        self.head = nn.Linear(c2, n_classes)

    def forward(self, x):  # x: [batch, time, features]
        z = self.net(x.transpose(1, 2)).squeeze(-1)
        return self.head(z)


@dataclass
class CnnModel:
    module: _Cnn
    n_classes: int

    def predict(self, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self.module.eval()
        out = np.empty(len(X), dtype=np.int64)
        with torch.no_grad():
            for lo in range(0, len(X), batch_size):
                chunk = torch.as_tensor(X[lo : lo + batch_size], dtype=torch.float32)
                out[lo : lo + len(chunk)] = self.module(chunk).argmax(dim=-1).numpy()
        return out


def build_cnn_windows(corpus, labels, schema: SignalSchema, calib, binary: bool = True):
    """Numeric [time, features] window matrices: normalized continuous values
    and integer-coded enumerations; invalid cells become -1."""
    by_key = {t.key: t for t in corpus}
    w = schema.frames_per_window
    feats = [f for f in schema.features if f.kind in (CONTINUOUS, ENUMERATED)]
    X = np.empty((len(labels), w, len(feats)), dtype=np.float32)
    y = np.empty(len(labels), dtype=np.int64)
    for i, l in enumerate(labels):
        trip = by_key[(l.vehicle_id, l.trip_id)]
        sl = slice(l.window_start, l.window_start + w)
        for j, spec in enumerate(feats):
            ok = trip.flags[spec.name][sl] == VALID
            if spec.kind == CONTINUOUS:
                fc = calib.per_feature[spec.name]
                rng = max(fc.emp_max - fc.emp_min, 1e-12)
                col = np.clip((trip.cont[spec.name][sl] - fc.emp_min) / rng, 0.0, 1.0)
            else:
                col = trip.enum[spec.name][sl].astype(np.float32)
            X[i, :, j] = np.where(ok, col, -1.0)
        y[i] = int(l.is_collision) if binary else l.impact_class
    return X, y


def train_cnn(X: np.ndarray, y: np.ndarray, n_classes: int, cfg: CnnConfig = CnnConfig()) -> CnnModel:
    """Seeded training of the temporal-convolution classifier with weighted loss."""
    if X.ndim != 3:
        raise TaskError("CNN input must be [n, time, features]")
    if np.unique(y).size < 2:
        raise TaskError("unsatisfiable task: need at least 2 classes in the labels")
    if cfg.deterministic:
        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.manual_seed(cfg.seed)
    module = _Cnn(X.shape[2], n_classes, cfg)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    weights = torch.as_tensor(
        np.where(counts > 0, y.size / (n_classes * np.maximum(counts, 1)), 0.0), dtype=torch.float32
    )
    optimizer = torch.optim.AdamW(module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss(weight=weights)
    data = torch.as_tensor(X, dtype=torch.float32)
    target = torch.as_tensor(y)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC33]))
    module.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(X), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(module(data[idx]), target[idx])
            loss.backward()
            optimizer.step()
    return CnnModel(module=module, n_classes=n_classes)
