"""Per-cell fusion classifier: standardize -> linear -> relu -> linear -> softmax.

Trained with plain SGD on an uncertainty-weighted cross-entropy whose
normalization by the total weight makes the loss invariant to rescaling the
weights.  Gradients are derived by hand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .features import FeatureGrid
from .grid import BevGrid
from .pseudo_label import VOID, PseudoLabelGrid

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
STD_FLOOR = 1e-6
PARAM_NAMES = ("feature_mean", "feature_std", "W1", "b1", "W2", "b2")
TRAINABLE = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True, eq=False)
class ModelParams:
    W1: np.ndarray  # (hidden, D)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (K, hidden)
    b2: np.ndarray  # (K,)
    feature_mean: np.ndarray  # (D,)
    feature_std: np.ndarray  # (D,)
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        h, d = self.W1.shape
        k = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (k, h) or self.b2.shape != (k,):
            raise ValueError("inconsistent layer shapes")
        if self.feature_mean.shape != (d,) or self.feature_std.shape != (d,):
            raise ValueError("standardization vectors do not match input dimension")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.feature_std < STD_FLOOR):
            raise ValueError(f"feature_std must be at least {STD_FLOOR}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def equals(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality of every array."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


def init(D: int, K: int, hidden: int = 32, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights from a seeded PCG64 stream, zero biases, identity standardization."""
    if min(D, K, hidden) < 1:
        raise ValueError(f"dimensions must be positive, got D={D}, K={K}, hidden={hidden}")
    rng = np.random.Generator(np.random.PCG64(seed))
    a1 = np.sqrt(6.0 / (D + hidden))
    a2 = np.sqrt(6.0 / (hidden + K))
    W1 = rng.uniform(-a1, a1, size=(hidden, D))
    W2 = rng.uniform(-a2, a2, size=(K, hidden))
    return ModelParams(
        W1, np.zeros(hidden), W2, np.zeros(K), np.zeros(D), np.ones(D),
        hyper={"seed": seed, "hidden": hidden},
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for an (N, D) feature matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected (N, {params.input_dim}) features, got {x.shape}")
    xs = (x - params.feature_mean) / params.feature_std
    hid = np.maximum(xs @ params.W1.T + params.b1, 0.0)
    return softmax(hid @ params.W2.T + params.b2)


def grid_matrix(features: FeatureGrid) -> np.ndarray:
    """(H*W, D) view of a feature grid, cells in row-major order."""
    v = features.values
    return v.reshape(v.shape[0], -1).T


def forward_grid(params: ModelParams, features: FeatureGrid) -> BevGrid:
    if features.channels != params.input_dim:
        raise ValueError(f"model expects {params.input_dim} channels, grid has {features.channels}")
    probs = forward(params, grid_matrix(features))
    H, W = features.spec.shape
    return BevGrid(features.spec, probs.T.reshape(params.num_classes, H, W))


def weighted_ce_loss(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """sum_c w_c * -ln p_c[y_c] / sum_c w_c, or 0 when all weights vanish.

    ``probs`` is (N, K); labels of zero-weight cells are ignored.
    """
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return 0.0
    active = weights > 0
    lab = np.asarray(labels)[active].astype(np.int64)
    p = probs[active][np.arange(len(lab)), lab]
    return float(np.sum(weights[active] * -np.log(np.maximum(p, PROB_FLOOR))) / total)


@dataclass(frozen=True, eq=False)
class TrainBatch:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    weights: np.ndarray  # (N,)


def _loss_and_grad(arrays: dict[str, np.ndarray], x, y, w) -> tuple[float, dict[str, np.ndarray]]:
    """Core of :func:`loss_and_grad` on raw arrays; every weight in ``w`` is positive."""
    total = w.sum()
    n = len(y)
    rows = np.arange(n)
    std = arrays["feature_std"]
    W1, W2 = arrays["W1"], arrays["W2"]
    xs = (x - arrays["feature_mean"]) / std
    pre = xs @ W1.T + arrays["b1"]
    hid = np.maximum(pre, 0.0)
    probs = softmax(hid @ W2.T + arrays["b2"])
    py = probs[rows, y]
    loss = float(np.sum(w * -np.log(np.maximum(py, PROB_FLOOR))) / total)

    # d loss / d logits; the clamp has zero slope below the floor
    g_logits = probs
    g_logits[rows, y] -= 1.0
    clamped = py < PROB_FLOOR
    if clamped.any():
        g_logits[clamped] = 0.0
    g_logits *= (w / total)[:, None]

    grads = {"W2": g_logits.T @ hid, "b2": g_logits.sum(axis=0)}
    g_pre = (g_logits @ W2) * (pre > 0)
    grads["W1"] = g_pre.T @ xs
    grads["b1"] = g_pre.sum(axis=0)
    g_xs = g_pre @ W1
    grads["feature_mean"] = -g_xs.sum(axis=0) / std
    grads["feature_std"] = -(g_xs * xs).sum(axis=0) / std
    return loss, grads


def loss_and_grad(params: ModelParams, batch: TrainBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted cross-entropy and its exact gradient with respect to every parameter array."""
    w = np.asarray(batch.weights, dtype=np.float64)
    active = w > 0
    if not active.any():
        return 0.0, {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    # zero-weight cells are dropped up front so their labels (possibly void) never matter
    x = np.asarray(batch.features, dtype=np.float64)[active]
    y = np.asarray(batch.labels)[active].astype(np.int64)
    return _loss_and_grad(params.arrays(), x, y, w[active])


def _training_cells(
    dataset: Sequence[tuple[FeatureGrid, PseudoLabelGrid]], use_weights: bool
) -> TrainBatch:
    xs, ys, ws = [], [], []
    for feats, labels in dataset:
        if feats.spec.shape != labels.spec.shape:
            raise ValueError("feature and label grids differ in shape")
        lab = labels.label.ravel()
        known = lab != VOID
        w = labels.weight.ravel() if use_weights else known.astype(np.float64)
        keep = known & (w > 0)
        xs.append(grid_matrix(feats)[keep])
        ys.append(lab[keep].astype(np.int64))
        ws.append(w[keep])
    return TrainBatch(np.concatenate(xs), np.concatenate(ys), np.concatenate(ws))


def standardize_from(params: ModelParams, features: np.ndarray) -> ModelParams:
    """Set per-feature mean/std (std floored) from an (N, D) training matrix."""
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), STD_FLOOR)
    return replace(params, feature_mean=mean, feature_std=std)


def dataset_loss(params: ModelParams, batch: TrainBatch) -> float:
    return weighted_ce_loss(forward(params, batch.features), batch.labels, batch.weights)


def train(
    params: ModelParams,
    dataset: Sequence[tuple[FeatureGrid, PseudoLabelGrid]],
    epochs: int = 30,
    lr: float = 0.05,
    batch_cells: int = 256,
    seed: int = 0,
    use_weights: bool = True,
) -> tuple[ModelParams, list[float]]:
    """Mini-batch SGD over all labeled cells of the dataset.

    Standardization statistics are fitted to the training cells before the
    first step.  The trace holds the full-dataset loss after each epoch.
    With ``use_weights=False`` every labeled cell gets weight 1.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    data = _training_cells(dataset, use_weights)
    if len(data.labels) == 0:
        raise ValueError("dataset has no labeled cells with positive weight")
    if data.labels.max() >= params.num_classes:
        raise ValueError(f"label {int(data.labels.max())} out of range for {params.num_classes} classes")
    params = standardize_from(params, data.features)
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {name: arr.copy() for name, arr in params.arrays().items()}
    n = len(data.labels)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_cells):
            idx = order[start : start + batch_cells]
            _, grads = _loss_and_grad(arrays, data.features[idx], data.labels[idx], data.weights[idx])
            for name in TRAINABLE:
                arrays[name] -= lr * grads[name]
        params = replace(params, **{name: arrays[name].copy() for name in TRAINABLE})
        trace.append(dataset_loss(params, data))
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    hyper = dict(params.hyper, lr=lr, epochs=epochs, seed=seed, batch_cells=batch_cells)
    return replace(params, hyper=hyper), trace


def predict_grid(params: ModelParams, features: FeatureGrid) -> tuple[np.ndarray, np.ndarray, BevGrid]:
    """Dense (label, confidence, probabilities) for every cell."""
    probs = forward_grid(params, features)
    label = np.argmax(probs.values, axis=0).astype(np.uint8)
    return label, probs.values.max(axis=0), probs
