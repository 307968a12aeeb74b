"""scikit-learn compatible regressors wrapping the perception networks.

TacGNN consumes a sequence of :class:`~taxelgraph.pointset.PointSet`
frames; the baselines consume the fixed-length raw taxel matrix.
Targets are standardized per column internally and reported back in
their original units.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from ..diffcore import read_checkpoint, write_checkpoint
from ..pointset import DEFAULT_K, PointSet
from .baselines import CNNNet, GCNNet, MLPNet, default_grid_shape
from .tacgnn import TacGNNNet
from .training import per_sample_rmse, predict_batched, train_perception


class PerceptionRegressor(RegressorMixin, BaseEstimator):
    kind = ""

    def _build_net(self, X, d_out):
        raise NotImplementedError

    def _validate_X(self, X):
        return check_array(X, dtype=np.float64)

    def _validate_y(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if not np.all(np.isfinite(y)):
            raise ValueError("labels must be finite")
        return y

    def initialize(self, X, d_out: int, y_mean=None, y_scale=None):
        """Kaiming-initialize without training (the frozen starting model).

        ``X`` only fixes input geometry for the baselines; it may be None for TacGNN.
        """
        self.net_ = self._build_net(X, d_out)
        self.params_ = self.net_.init_params(self.random_state)
        self.y_mean_ = np.zeros(d_out) if y_mean is None else np.asarray(y_mean, dtype=np.float64)
        self.y_scale_ = np.ones(d_out) if y_scale is None else np.asarray(y_scale, dtype=np.float64)
        self.n_outputs_ = d_out
        self.optimizer_ = None
        self.history_ = None
        return self

    def fit(self, X, y, X_test=None, y_test=None):
        X = self._validate_X(X)
        y = self._validate_y(y)
        if len(y) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if len(X) != len(y):
            raise ValueError(f"{len(X)} frames but {len(y)} labels")
        warm = self.warm_start and hasattr(self, "params_")
        if not warm:
            mean = y.mean(axis=0) if self.standardize_targets else np.zeros(y.shape[1])
            std = y.std(axis=0) if self.standardize_targets else np.ones(y.shape[1])
            if self.standardize_targets:
                # a constant column falls back to its own magnitude, then to 1
                mag = np.abs(mean)
                std = np.where(std > 1e-12, std, np.where(mag > 1e-12, mag, 1.0))
            self.initialize(X, y.shape[1], mean, std)
        elif y.shape[1] != self.n_outputs_:
            raise ValueError("label width changed between warm-started fits")
        test = None
        if X_test is not None and y_test is not None and len(y_test):
            test = (self.net_.prepare(self._validate_X(X_test)), self._scale(self._validate_y(y_test)))
        prepared = self.net_.prepare(X)
        seed = None if self.random_state is None else int(self.random_state) + 7919 * getattr(self, "n_fits_", 0)
        _, hist, self.optimizer_ = train_perception(
            self.net_, self.params_, prepared, self._scale(y), self.epochs, self.batch_size, seed,
            self.learning_rate, test, self.optimizer_ if warm else None, target_scale=self.y_scale_)
        self.history_ = hist
        self.n_fits_ = getattr(self, "n_fits_", 0) + 1
        return self

    def _scale(self, y):
        return (y - self.y_mean_) / self.y_scale_

    def predict(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")
        X = self._validate_X(X)
        pred = predict_batched(self.net_, self.params_, self.net_.prepare(X), len(X))
        return pred * self.y_scale_ + self.y_mean_

    def rmse(self, X, y, columns=None) -> float:
        """Mean per-sample RMSE in label units, optionally over a column subset."""
        y = self._validate_y(y)
        pred = self.predict(X)
        if columns is not None:
            pred, y = pred[:, columns], y[:, columns]
        return float(per_sample_rmse(pred, y).mean())

    # -- checkpoints --
    def _hyper(self) -> dict:
        return {}

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        tensors = dict(self.params_.tensors())
        tensors["target.mean"] = self.y_mean_
        tensors["target.scale"] = self.y_scale_
        tensors.update(self._extra_tensors())
        meta = {"kind": self.kind, "D_out": self.n_outputs_}
        meta.update(self._hyper())
        write_checkpoint(path, tensors, meta)

    def _extra_tensors(self) -> dict:
        return {}

    def _load_tensors(self, tensors: dict):
        own = self.params_.tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
        for name, arr in own.items():
            arr[...] = tensors[name].reshape(arr.shape)
        self.y_mean_ = tensors["target.mean"].ravel().copy()
        self.y_scale_ = tensors["target.scale"].ravel().copy()


class TacGNNRegressor(PerceptionRegressor):
    """Dynamic hierarchical graph network over activated taxels."""

    kind = "tacgnn"

    def __init__(self, channels=32, k=DEFAULT_K, ratio=0.5, length_scale=0.01, epochs=50, batch_size=64,
                 learning_rate=1e-3, standardize_targets=True, warm_start=False, random_state=None):
        self.channels = channels
        self.k = k
        self.ratio = ratio
        self.length_scale = length_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.standardize_targets = standardize_targets
        self.warm_start = warm_start
        self.random_state = random_state

    def _validate_X(self, X):
        frames = list(X)
        for f in frames:
            if not isinstance(f, PointSet):
                raise TypeError("TacGNNRegressor expects PointSet frames")
        return frames

    def _build_net(self, X, d_out):
        return TacGNNNet(d_out, self.channels, self.k, self.ratio, self.length_scale)

    def _hyper(self):
        return {"C": self.channels, "k": self.k, "ratio": self.ratio, "length_scale": self.length_scale}


class MLPRegressor(PerceptionRegressor):
    """Flat MLP over the full raw taxel vector."""

    kind = "mlp"

    def __init__(self, hidden=(64, 64, 64), epochs=50, batch_size=64, learning_rate=1e-3,
                 standardize_targets=True, warm_start=False, random_state=None):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.standardize_targets = standardize_targets
        self.warm_start = warm_start
        self.random_state = random_state

    def _build_net(self, X, d_out):
        self.n_features_in_ = np.shape(X)[1]
        return MLPNet(self.n_features_in_, d_out, self.hidden)

    def _hyper(self):
        return {"n_taxels": self.n_features_in_, "hidden": "x".join(map(str, self.hidden))}


class CNNRegressor(PerceptionRegressor):
    """Two-layer CNN over taxels packed row-major into a grid."""

    kind = "cnn"

    def __init__(self, grid_shape=None, epochs=50, batch_size=64, learning_rate=1e-3,
                 standardize_targets=True, warm_start=False, random_state=None):
        self.grid_shape = grid_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.standardize_targets = standardize_targets
        self.warm_start = warm_start
        self.random_state = random_state

    def _build_net(self, X, d_out):
        self.n_features_in_ = np.shape(X)[1]
        self.grid_shape_ = tuple(self.grid_shape or default_grid_shape(self.n_features_in_))
        return CNNNet(self.n_features_in_, d_out, self.grid_shape_)

    def _hyper(self):
        return {"n_taxels": self.n_features_in_, "grid_shape": "x".join(map(str, self.grid_shape_))}


class GCNRegressor(PerceptionRegressor):
    """Message passing on a static kNN graph over all taxel rest positions."""

    kind = "gcn"

    def __init__(self, rest_positions=None, channels=32, k=DEFAULT_K, length_scale=0.01, epochs=50,
                 batch_size=64, learning_rate=1e-3, standardize_targets=True, warm_start=False,
                 random_state=None):
        self.rest_positions = rest_positions
        self.channels = channels
        self.k = k
        self.length_scale = length_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.standardize_targets = standardize_targets
        self.warm_start = warm_start
        self.random_state = random_state

    def _build_net(self, X, d_out):
        if self.rest_positions is None:
            raise ValueError("GCNRegressor needs rest_positions")
        rest = np.asarray(self.rest_positions, dtype=np.float64)
        self.n_features_in_ = len(rest)
        if X is not None and np.shape(X)[1] != len(rest):
            raise ValueError("raw frames do not match the number of rest positions")
        return GCNNet(rest, d_out, self.channels, self.k, self.length_scale)

    def _hyper(self):
        return {"C": self.channels, "k": self.k, "length_scale": self.length_scale, "n_taxels": self.n_features_in_}

    def _extra_tensors(self):
        return {"static.rest_positions": np.asarray(self.rest_positions, dtype=np.float64)}


REGRESSORS = {cls.kind: cls for cls in (TacGNNRegressor, MLPRegressor, CNNRegressor, GCNRegressor)}


def make_regressor(kind: str, layout=None, **kwargs) -> PerceptionRegressor:
    """Build a regressor by kind name; ``layout`` supplies GCN rest positions."""
    if kind not in REGRESSORS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(REGRESSORS)}")
    if kind == "gcn" and "rest_positions" not in kwargs:
        if layout is None:
            raise ValueError("gcn needs a layout or rest_positions")
        kwargs["rest_positions"] = layout.rest_positions()
    return REGRESSORS[kind](**kwargs)


def load_regressor(path) -> PerceptionRegressor:
    tensors, meta = read_checkpoint(Path(path))
    kind = meta.get("kind")
    if kind not in REGRESSORS:
        raise ValueError(f"checkpoint has unknown model kind {kind!r}")
    d_out = int(meta["D_out"])
    if kind == "tacgnn":
        est = TacGNNRegressor(channels=int(meta["C"]), k=int(meta["k"]), ratio=float(meta["ratio"]),
                              length_scale=float(meta["length_scale"]))
        est.initialize(None, d_out)
    elif kind == "mlp":
        hidden = tuple(int(h) for h in meta["hidden"].split("x"))
        est = MLPRegressor(hidden=hidden)
        est.initialize(np.zeros((1, int(meta["n_taxels"]))), d_out)
    elif kind == "cnn":
        grid = tuple(int(v) for v in meta["grid_shape"].split("x"))
        est = CNNRegressor(grid_shape=grid)
        est.initialize(np.zeros((1, int(meta["n_taxels"]))), d_out)
    else:
        est = GCNRegressor(rest_positions=tensors["static.rest_positions"], channels=int(meta["C"]),
                           k=int(meta["k"]), length_scale=float(meta["length_scale"]))
        est.initialize(None, d_out)
    est._load_tensors(tensors)
    return est
