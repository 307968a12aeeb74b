"""Baseline perception models that consume the full fixed-length taxel vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..diffcore import MlpParams, kaiming_init, mlp_backward, mlp_forward
from ..pointset import DEFAULT_K, PointSet, frame_hierarchy, neighbor_table
from .tacgnn import N_LAYERS, TacGNNParams, batch_backward, batch_forward, init_tacgnn, make_batch

MLP_HIDDEN = (64, 64, 64)
CNN_CHANNELS = (32, 16)
CNN_DENSE = 128


def _as_raw(raw_frame, n_taxels: int) -> np.ndarray:
    x = np.asarray(raw_frame, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != n_taxels:
        raise ValueError(f"raw frame has {x.shape[1]} values, layout has {n_taxels}")
    return x


# -- flat MLP ---------------------------------------------------------------

def init_mlp_baseline(n_taxels: int, d_out: int, hidden=MLP_HIDDEN, seed=None) -> MlpParams:
    return kaiming_init([n_taxels, *hidden, d_out], seed)


def mlp_baseline_forward(params: MlpParams, raw_frame) -> np.ndarray:
    x = _as_raw(raw_frame, params.layer_sizes[0])
    out, _ = mlp_forward(params, x)
    return out[0] if np.ndim(raw_frame) == 1 else out


class MLPNet:
    kind = "mlp"

    def __init__(self, n_taxels: int, d_out: int, hidden=MLP_HIDDEN):
        self.n_taxels, self.d_out, self.hidden = n_taxels, d_out, tuple(hidden)

    def init_params(self, seed):
        return init_mlp_baseline(self.n_taxels, self.d_out, self.hidden, seed)

    def prepare(self, X):
        return _as_raw(X, self.n_taxels)

    def make_batch(self, prepared, idx):
        return prepared[idx]

    def forward(self, params, batch):
        return mlp_forward(params, batch)

    def backward(self, params, batch, cache, grad):
        g, _ = mlp_backward(params, cache, grad)
        return g.tensors()


# -- CNN on a packed grid ----------------------------------------------------

def default_grid_shape(n_taxels: int) -> tuple[int, int]:
    h = math.ceil(math.sqrt(n_taxels))
    return h, math.ceil(n_taxels / h)


def pack_grid(raw: np.ndarray, grid_shape) -> np.ndarray:
    """Row-major packing of taxels (ascending id) into (B, H, W), zero padded."""
    h, w = grid_shape
    raw = np.atleast_2d(raw)
    if h * w < raw.shape[1]:
        raise ValueError(f"grid {h}x{w} smaller than {raw.shape[1]} taxels")
    out = np.zeros((raw.shape[0], h * w))
    out[:, :raw.shape[1]] = raw
    return out.reshape(-1, h, w)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches of a 3x3 same-padded convolution."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    b, h, w, c = shape
    cols = cols.reshape(b, h, w, 9, c)
    xp = np.zeros((b, h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, dy * 3 + dx, :]
    return xp[:, 1:-1, 1:-1, :]


@dataclass
class CNNParams:
    """Two 3x3 conv layers (kernels stored as (9*C_in, C_out)) and a dense head."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    dense: MlpParams
    grid_shape: tuple[int, int]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"conv1.w": self.conv1_w, "conv1.b": self.conv1_b, "conv2.w": self.conv2_w, "conv2.b": self.conv2_b}
        out.update(self.dense.tensors("dense."))
        return out


def init_cnn(grid_shape, d_out: int, channels=CNN_CHANNELS, dense=CNN_DENSE, seed=None) -> CNNParams:
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    h, w = grid_shape
    return CNNParams(
        rng.normal(0, math.sqrt(2 / 9), (9, c1)), np.zeros(c1),
        rng.normal(0, math.sqrt(2 / (9 * c1)), (9 * c1, c2)), np.zeros(c2),
        kaiming_init([c2 * h * w, dense, d_out], rng), tuple(grid_shape))


def cnn_forward_batch(params: CNNParams, grids: np.ndarray):
    b, h, w = grids.shape
    x = grids[..., None]
    p1 = _im2col(x)
    z1 = p1 @ params.conv1_w + params.conv1_b
    a1 = np.maximum(z1, 0.0)
    c1 = params.conv1_w.shape[1]
    p2 = _im2col(a1.reshape(b, h, w, c1))
    z2 = p2 @ params.conv2_w + params.conv2_b
    a2 = np.maximum(z2, 0.0)
    out, dcache = mlp_forward(params.dense, a2.reshape(b, -1))
    return out, (p1, z1, p2, z2, dcache, (b, h, w, c1))


def cnn_backward_batch(params: CNNParams, cache, grad) -> dict:
    p1, z1, p2, z2, dcache, shape = cache
    g_dense, g = mlp_backward(params.dense, dcache, grad)
    g = g.reshape(z2.shape) * (z2 > 0)
    g_w2, g_b2 = p2.T @ g, g.sum(0)
    g = _col2im(g @ params.conv2_w.T, shape).reshape(z1.shape) * (z1 > 0)
    g_w1, g_b1 = p1.T @ g, g.sum(0)
    out = {"conv1.w": g_w1, "conv1.b": g_b1, "conv2.w": g_w2, "conv2.b": g_b2}
    out.update(g_dense.tensors("dense."))
    return out


def cnn_grid_forward(params: CNNParams, raw_frame, grid_shape=None) -> np.ndarray:
    grid_shape = tuple(grid_shape or params.grid_shape)
    if grid_shape != tuple(params.grid_shape):
        raise ValueError("grid shape differs from the one the parameters were built for")
    single = np.ndim(raw_frame) == 1
    out, _ = cnn_forward_batch(params, pack_grid(np.asarray(raw_frame, dtype=np.float64), grid_shape))
    return out[0] if single else out


class CNNNet:
    kind = "cnn"

    def __init__(self, n_taxels: int, d_out: int, grid_shape=None):
        self.n_taxels, self.d_out = n_taxels, d_out
        self.grid_shape = tuple(grid_shape) if grid_shape else default_grid_shape(n_taxels)

    def init_params(self, seed):
        return init_cnn(self.grid_shape, self.d_out, seed=seed)

    def prepare(self, X):
        return pack_grid(_as_raw(X, self.n_taxels), self.grid_shape)

    def make_batch(self, prepared, idx):
        return prepared[idx]

    def forward(self, params, batch):
        return cnn_forward_batch(params, batch)

    def backward(self, params, batch, cache, grad):
        return cnn_backward_batch(params, cache, grad)


# -- static graph -------------------------------------------------------------

class GCNNet:
    """Message passing over a kNN graph fixed once from taxel rest positions.

    Every taxel is a node (inactive ones carry zero pressure) and no
    downsampling happens, so the graph never changes between frames.
    """

    kind = "gcn"

    def __init__(self, rest_positions, d_out: int, channels: int = 32, k: int = DEFAULT_K,
                 length_scale: float = 0.01):
        self.rest_positions = np.asarray(rest_positions, dtype=np.float64)
        self.d_out, self.channels, self.k, self.length_scale = d_out, channels, k, length_scale
        n = len(self.rest_positions)
        self.n_taxels = n
        base = PointSet(np.arange(n), self.rest_positions, np.zeros(n))
        self.hierarchy = frame_hierarchy(base, N_LAYERS, k, sample=False)

    def static_neighbors(self) -> np.ndarray:
        return neighbor_table(self.rest_positions, np.arange(self.n_taxels), self.k)

    def init_params(self, seed) -> TacGNNParams:
        return init_tacgnn(self.d_out, self.channels, seed, self.k, 1.0, self.length_scale)

    def prepare(self, X):
        return _as_raw(X, self.n_taxels)

    def make_batch(self, prepared, idx):
        rows = prepared[idx]
        return make_batch([self.hierarchy] * len(rows), self.length_scale, list(rows))

    def forward(self, params, batch):
        return batch_forward(params, batch)

    def backward(self, params, batch, cache, grad):
        return batch_backward(params, batch, cache, grad)


def gcn_static_forward(net: GCNNet, params: TacGNNParams, raw_frame) -> np.ndarray:
    raw = _as_raw(raw_frame, net.n_taxels)
    out, _ = net.forward(params, net.make_batch(raw, np.arange(len(raw))))
    return out[0] if np.ndim(raw_frame) == 1 else out
