"""RMSE objective and the mini-batch Adam loop shared by all perception models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import Adam, NonFiniteError, check_finite

log = logging.getLogger(__name__)


def rmse_loss(prediction, label) -> float:
    """sqrt(sum_t (pred_t - label_t)^2 / T) for one sample."""
    p = np.asarray(prediction, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"prediction has {p.size} values, label has {y.size}")
    return float(np.sqrt(np.sum((p - y) ** 2) / p.size))


def batch_rmse(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-sample RMSE of a batch and its gradient w.r.t. ``pred``."""
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {y.shape}")
    diff = pred - y
    t = pred.shape[1]
    r = np.sqrt(np.sum(diff * diff, axis=1) / t)
    safe = np.where(r > 0, r, 1.0)
    grad = np.where(r[:, None] > 0, diff / (t * safe[:, None]), 0.0) / len(r)
    return float(r.mean()), grad


def per_sample_rmse(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean((pred - y) ** 2, axis=1))


def predict_batched(net, params, prepared, n: int, batch_size: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        pred, _ = net.forward(params, net.make_batch(prepared, idx))
        outs.append(pred)
    return np.concatenate(outs) if outs else np.zeros((0, net.d_out))


@dataclass
class TrainHistory:
    initial_train_rmse: float = float("nan")
    train_rmse: list[float] = field(default_factory=list)
    test_rmse: list[float] = field(default_factory=list)


def train_perception(net, params, prepared, Y, epochs: int, batch_size: int = 64, seed=None,
                     learning_rate: float = 1e-3, test: tuple | None = None, optimizer: Adam | None = None,
                     target_scale=None):
    """Mini-batch Adam on mean RMSE; ``params`` is updated in place.

    ``prepared`` comes from ``net.prepare``; ``test`` is an optional
    ``(prepared, Y)`` pair evaluated after every epoch. Reported losses are
    multiplied column-wise by ``target_scale`` when given (to undo target
    standardization). Returns ``(params, history, optimizer)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n = len(Y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = optimizer or Adam(params.tensors(), learning_rate)
    hist = TrainHistory()

    scale = 1.0 if target_scale is None else np.asarray(target_scale, dtype=np.float64)

    def evaluate(prep, y):
        if not len(y):
            return float("nan")
        return float(per_sample_rmse(predict_batched(net, params, prep, len(y)) * scale, y * scale).mean())

    hist.initial_train_rmse = evaluate(prepared, Y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = net.make_batch(prepared, idx)
            pred, cache = net.forward(params, batch)
            loss, grad = batch_rmse(pred, Y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite perception loss at epoch {epoch}")
            grads = net.backward(params, batch, cache, grad)
            opt.step(grads)
        hist.train_rmse.append(evaluate(prepared, Y))
        hist.test_rmse.append(evaluate(*test) if test is not None else float("nan"))
        check_finite("train rmse", np.array(hist.train_rmse[-1]))
        log.debug("epoch %d train %.6g test %.6g", epoch, hist.train_rmse[-1], hist.test_rmse[-1])
    return params, hist, opt


def train_test_split_indices(n: int, seed, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle then an 80/20 (by default) split."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(train_fraction * n))) if n else 0
    return np.sort(order[:n_train]), np.sort(order[n_train:])
