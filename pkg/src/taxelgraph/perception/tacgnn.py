"""Hierarchical dynamic-graph network over activated taxels.

encode -> 3 x (edge messages, max aggregation, FPS downsampling) -> max
readout -> prediction MLP. Graph structure is computed from taxel positions
only, so it is built once per frame and reused across parameter updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..diffcore import MlpParams, kaiming_init, mlp_backward, mlp_forward
from ..pointset import DEFAULT_K, FrameHierarchy, PointSet, TactileGraph, frame_hierarchy

N_LAYERS = 3


@dataclass
class TacGNNParams:
    encoder: MlpParams
    layer_mlps: list[MlpParams]
    head: MlpParams
    channels: int = 32
    d_out: int = 6
    k: int = DEFAULT_K
    ratio: float = 0.5
    length_scale: float = 0.01

    def __post_init__(self):
        c = self.channels
        if len(self.layer_mlps) != N_LAYERS:
            raise ValueError(f"expected {N_LAYERS} message layers")
        if self.encoder.layer_sizes[0] != 4 or self.encoder.layer_sizes[-1] != c:
            raise ValueError("encoder must map 4 -> C")
        for p in self.layer_mlps:
            if p.layer_sizes[0] != 2 * c + 3 or p.layer_sizes[-1] != c:
                raise ValueError("message MLPs must map 2C+3 -> C")
        if self.head.layer_sizes[0] != c or self.head.layer_sizes[-1] != self.d_out:
            raise ValueError("head must map C -> D_out")

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.encoder.tensors("enc.")
        for i, p in enumerate(self.layer_mlps):
            out.update(p.tensors(f"msg{i}."))
        out.update(self.head.tensors("head."))
        return out

    def hyper(self) -> dict:
        return {"C": self.channels, "D_out": self.d_out, "k": self.k, "ratio": self.ratio,
                "length_scale": self.length_scale}


def init_tacgnn(d_out: int = 6, channels: int = 32, seed=None, k: int = DEFAULT_K, ratio: float = 0.5,
                length_scale: float = 0.01) -> TacGNNParams:
    rng = np.random.default_rng(seed)
    c = channels
    enc = kaiming_init([4, c], rng, activate_output=True)
    layers = [kaiming_init([2 * c + 3, c, c], rng) for _ in range(N_LAYERS)]
    head = kaiming_init([c, c, d_out], rng)
    return TacGNNParams(enc, layers, head, c, d_out, k, ratio, length_scale)


def grads_to_dict(enc: MlpParams, layers: Sequence[MlpParams], head: MlpParams) -> dict[str, np.ndarray]:
    out = enc.tensors("enc.")
    for i, p in enumerate(layers):
        out.update(p.tensors(f"msg{i}."))
    out.update(head.tensors("head."))
    return out


def node_inputs(points: PointSet, length_scale: float) -> np.ndarray:
    return np.concatenate([points.positions / length_scale, points.pressures[:, None]], axis=1)


def encode_nodes(params: TacGNNParams, points: PointSet) -> np.ndarray:
    """Initial node features h0 (N x C) from [position, pressure]."""
    if len(points) == 0:
        return np.zeros((0, params.channels))
    out, _ = mlp_forward(params.encoder, node_inputs(points, params.length_scale))
    return out


# -- batched message passing -----------------------------------------------

def _message_forward(phi: MlpParams, h: np.ndarray, nbr: np.ndarray, rel: np.ndarray):
    m, k = nbr.shape
    c = h.shape[1]
    inp = np.empty((m, k, 2 * c + 3))
    inp[:, :, :c] = h[:, None, :]
    inp[:, :, c:2 * c] = h[nbr]
    inp[:, :, 2 * c:] = rel
    msg, cache = mlp_forward(phi, inp.reshape(m * k, -1))
    msg = msg.reshape(m, k, -1)
    arg = np.argmax(msg, axis=1)  # lowest slot on ties
    agg = np.take_along_axis(msg, arg[:, None, :], axis=1)[:, 0, :]
    return agg, (cache, arg, nbr, c)


def _message_backward(phi: MlpParams, state, grad_agg: np.ndarray):
    cache, arg, nbr, c = state
    m, k = nbr.shape
    g_msg = np.zeros((m, k, grad_agg.shape[1]))
    np.put_along_axis(g_msg, arg[:, None, :], grad_agg[:, None, :], axis=1)
    g_phi, g_inp = mlp_backward(phi, cache, g_msg.reshape(m * k, -1))
    g_inp = g_inp.reshape(m, k, -1)
    g_h = g_inp[:, :, :c].sum(axis=1)
    np.add.at(g_h, nbr.ravel(), g_inp[:, :, c:2 * c].reshape(m * k, c))
    return g_phi, g_h


def message_layer(phi: MlpParams, graph: TactileGraph, length_scale: float = 0.01) -> np.ndarray:
    """One round of edge messages and max aggregation on a single graph.

    Message for edge j -> i is ``phi([h_i, h_j, x_j - x_i])``; a node with no
    incoming edge aggregates its own zero-offset self-message.
    """
    h = np.asarray(graph.features, dtype=np.float64)
    n = len(graph.points)
    if h.shape[0] != n or h.shape[1] * 2 + 3 != phi.layer_sizes[0]:
        raise ValueError("feature matrix does not match graph / message MLP width")
    if n == 0:
        return np.zeros((0, phi.layer_sizes[-1]))
    k = max([len(nb) for nb in graph.neighbors] + [1])
    nbr = np.empty((n, k), dtype=np.int64)
    for i, nb in enumerate(graph.neighbors):
        nb = np.asarray(nb, dtype=np.int64)
        if len(nb) == 0:
            nb = np.array([i])
        nbr[i] = np.concatenate([nb, np.repeat(nb[:1], k - len(nb))])
    pos = graph.points.positions / length_scale
    rel = pos[nbr] - pos[:, None, :]
    agg, _ = _message_forward(phi, h, nbr, rel)
    return agg


@dataclass
class GraphBatch:
    """Concatenated hierarchy arrays for a batch of frames."""

    n_frames: int
    inputs: np.ndarray
    neighbors: list[np.ndarray]
    rel: list[np.ndarray]
    select: list[np.ndarray]
    readout: np.ndarray
    empty: np.ndarray


def make_batch(hierarchies: Sequence[FrameHierarchy], length_scale: float,
               pressures: Sequence[np.ndarray] | None = None) -> GraphBatch:
    """Stack per-frame hierarchies into global index arrays.

    ``pressures`` optionally overrides each frame's pressure channel (used by
    the static-graph baseline, whose frames share one hierarchy).
    """
    n_layers = len(hierarchies[0].neighbors) if hierarchies else N_LAYERS
    inputs = []
    nbrs = [[] for _ in range(n_layers)]
    rels = [[] for _ in range(n_layers)]
    sels = [[] for _ in range(n_layers)]
    offsets = np.zeros(n_layers + 1, dtype=np.int64)
    final = []
    for f, h in enumerate(hierarchies):
        pos = h.frame.positions / length_scale
        pr = h.frame.pressures if pressures is None else pressures[f]
        inputs.append(np.concatenate([pos, np.asarray(pr, dtype=np.float64)[:, None]], axis=1))
        for l in range(n_layers):
            p = pos[h.nodes[l]]
            nb = h.neighbors[l]
            nbrs[l].append(nb + offsets[l])
            rels[l].append(p[nb] - p[:, None, :])
            sels[l].append(h.select[l] + offsets[l])
            offsets[l] += len(h.nodes[l])
        final.append(np.arange(len(h.nodes[-1])) + offsets[-1])
        offsets[-1] += len(h.nodes[-1])
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
    maxn = max([len(f) for f in final] + [1])
    readout = np.zeros((len(hierarchies), maxn), dtype=np.int64)
    empty = np.zeros(len(hierarchies), dtype=bool)
    for f, idx in enumerate(final):
        if len(idx) == 0:
            empty[f] = True
            continue
        readout[f, :len(idx)] = idx
        readout[f, len(idx):] = idx[0]
    k = hierarchies[0].neighbors[0].shape[1] if hierarchies else DEFAULT_K
    return GraphBatch(
        len(hierarchies),
        cat(inputs, (0, 4)),
        [cat(x, (0, k)).astype(np.int64) for x in nbrs],
        [cat(x, (0, k, 3)) for x in rels],
        [cat(x, (0,)).astype(np.int64) for x in sels],
        readout, empty)


def batch_forward(params: TacGNNParams, batch: GraphBatch):
    c = params.channels
    h, enc_cache = (mlp_forward(params.encoder, batch.inputs) if len(batch.inputs)
                    else (np.zeros((0, c)), None))
    layer_states = []
    for l, phi in enumerate(params.layer_mlps):
        if len(h) == 0:
            layer_states.append(None)
            continue
        agg, st = _message_forward(phi, h, batch.neighbors[l], batch.rel[l])
        layer_states.append((st, len(agg)))
        h = agg[batch.select[l]]
    if len(h):
        gathered = h[batch.readout]
        arg = np.argmax(gathered, axis=1)
        glob = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
    else:
        arg = None
        glob = np.zeros((batch.n_frames, c))
    glob = np.where(batch.empty[:, None], 0.0, glob)
    pred, head_cache = mlp_forward(params.head, glob)
    return pred, (enc_cache, layer_states, arg, len(h), head_cache)


def batch_backward(params: TacGNNParams, batch: GraphBatch, cache, grad_pred: np.ndarray) -> dict:
    enc_cache, layer_states, arg, n_final, head_cache = cache
    c = params.channels
    g_head, g_glob = mlp_backward(params.head, head_cache, grad_pred)
    g_glob = np.where(batch.empty[:, None], 0.0, g_glob)
    g_h = np.zeros((n_final, c))
    if n_final:
        g_gath = np.zeros((batch.n_frames, batch.readout.shape[1], c))
        np.put_along_axis(g_gath, arg[:, None, :], g_glob[:, None, :], axis=1)
        np.add.at(g_h, batch.readout.ravel(), g_gath.reshape(-1, c))
    g_layers = [None] * len(params.layer_mlps)
    for l in range(len(params.layer_mlps) - 1, -1, -1):
        phi = params.layer_mlps[l]
        if layer_states[l] is None:
            g_layers[l] = phi.zeros_like()
            continue
        st, n_l = layer_states[l]
        g_agg = np.zeros((n_l, c))
        g_agg[batch.select[l]] = g_h
        g_layers[l], g_h = _message_backward(phi, st, g_agg)
    if enc_cache is not None:
        g_enc, _ = mlp_backward(params.encoder, enc_cache, g_h)
    else:
        g_enc = params.encoder.zeros_like()
    return grads_to_dict(g_enc, g_layers, g_head)


def hierarchy_for(params: TacGNNParams, frame: PointSet) -> FrameHierarchy:
    return frame_hierarchy(frame, N_LAYERS, params.k, params.ratio)


def tacgnn_forward(params: TacGNNParams, frame: PointSet):
    """Prediction (D_out,) for one frame, plus the cache for backward.

    Points are processed in taxel-id order, which makes the output exactly
    invariant to the order they are supplied in.
    """
    batch = make_batch([hierarchy_for(params, frame)], params.length_scale)
    pred, cache = batch_forward(params, batch)
    return pred[0], (batch, cache)


def tacgnn_backward(params: TacGNNParams, cache, grad_pred: np.ndarray) -> dict:
    batch, inner = cache
    return batch_backward(params, batch, inner, np.asarray(grad_pred, dtype=np.float64).reshape(1, -1))


class TacGNNNet:
    """Training adapter: frames -> cached hierarchies -> batched passes."""

    kind = "tacgnn"

    def __init__(self, d_out: int, channels: int = 32, k: int = DEFAULT_K, ratio: float = 0.5,
                 length_scale: float = 0.01):
        self.d_out, self.channels, self.k, self.ratio, self.length_scale = d_out, channels, k, ratio, length_scale

    def init_params(self, seed) -> TacGNNParams:
        return init_tacgnn(self.d_out, self.channels, seed, self.k, self.ratio, self.length_scale)

    def prepare(self, X: Sequence[PointSet]) -> list[FrameHierarchy]:
        return [frame_hierarchy(f, N_LAYERS, self.k, self.ratio) for f in X]

    def make_batch(self, prepared, idx) -> GraphBatch:
        return make_batch([prepared[i] for i in idx], self.length_scale)

    def forward(self, params, batch):
        return batch_forward(params, batch)

    def backward(self, params, batch, cache, grad):
        return batch_backward(params, batch, cache, grad)


def _bind_flat(params: TacGNNParams) -> tuple[np.ndarray, list[str]]:
    """Re-home every tensor as a view into one flat buffer (same values)."""
    mlps = [("enc.", params.encoder)] + [(f"msg{i}.", p) for i, p in enumerate(params.layer_mlps)]
    mlps.append(("head.", params.head))
    names = list(params.tensors())
    buf = np.concatenate([t.ravel() for t in params.tensors().values()])
    pos = 0
    for _, mlp in mlps:
        for i in range(len(mlp.weights)):
            for lst in (mlp.weights, mlp.biases):
                a = lst[i]
                lst[i] = buf[pos:pos + a.size].reshape(a.shape)
                pos += a.size
    # tensors() order is w0, b0, w1, b1 ... per MLP, matching the loop above
    return buf, names


def tacgnn_gradient_check(params: TacGNNParams, frame: PointSet, label, step: float = 1e-5) -> float:
    """Finite-difference check of d RMSE(tacgnn(frame), label) / d params.

    Returns the max relative error over all parameters. ``params`` keeps its
    values but its tensors become views into a shared buffer.
    """
    from ..diffcore import gradient_check
    from .training import batch_rmse

    buf, names = _bind_flat(params)
    batch = make_batch([hierarchy_for(params, frame)], params.length_scale)
    y = np.asarray(label, dtype=np.float64).reshape(1, -1)

    def value(x):
        buf[:] = x
        pred, _ = batch_forward(params, batch)
        return batch_rmse(pred, y)[0]

    def analytic(x):
        buf[:] = x
        pred, cache = batch_forward(params, batch)
        grads = batch_backward(params, batch, cache, batch_rmse(pred, y)[1])
        return np.concatenate([grads[n].ravel() for n in names])

    x0 = buf.copy()
    try:
        return gradient_check(value, x0, step, analytic)
    finally:
        buf[:] = x0
