"""Small reverse-mode compute core.

Dense float64 matrices are plain ``numpy.ndarray`` objects. Every
differentiable operation comes as a ``*_forward`` returning a cache and a
``*_backward`` consuming it, so composite models chain them by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CKPT_MAGIC = "TAXELGRAPH-CKPT v1"


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


@dataclass
class MlpParams:
    """Weights of a fully connected ReLU network.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i + 1])`` and
    hidden layers use ReLU. The output layer is linear unless
    ``activate_output`` is set.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activate_output: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}, expected "
                                 f"{(self.layer_sizes[i], self.layer_sizes[i + 1])}")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activate_output)

    def zeros_like(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activate_output)


def kaiming_init(layer_sizes: Iterable[int], rng_seed=None, *, activate_output: bool = False,
                 output_gain: float = 1.0) -> MlpParams:
    """He-normal weights (variance 2/fan_in), zero biases.

    ``rng_seed`` may be an int, ``None`` or a ``numpy.random.Generator``.
    ``output_gain`` scales the last layer's weights (1 keeps plain Kaiming).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output width")
    if any(s < 1 for s in sizes):
        raise ValueError("layer widths must be >= 1")
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if i == len(sizes) - 2:
            w *= output_gain
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases, activate_output)


@dataclass
class MlpCache:
    params_id: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match input width {params.layer_sizes[0]}")
    inputs, preacts = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if (i < last or params.activate_output) else z
    return h, MlpCache(id(params), inputs, preacts)


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Return ``(param_grads, input_grad)`` for an upstream gradient."""
    if cache.params_id != id(params) or len(cache.inputs) != len(params.weights):
        raise ValueError("cache does not belong to these parameters")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"gradient shape {g.shape} != output shape {cache.preacts[-1].shape}")
    last = len(params.weights) - 1
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(last, -1, -1):
        if i < last or params.activate_output:
            g = g * (cache.preacts[i] > 0.0)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return MlpParams(list(params.layer_sizes), gw, gb, params.activate_output), g


def max_reduce_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise maximum and the (lowest) row index attaining it."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("max_reduce_rows needs a matrix with at least one row")
    idx = np.argmax(m, axis=0)  # first occurrence on ties
    return m[idx, np.arange(m.shape[1])], idx


def max_reduce_rows_backward(grad: np.ndarray, argmax: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, len(argmax)))
    out[argmax, np.arange(len(argmax))] = grad
    return out


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        check_finite(f"gradient {name}", g)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    eps_t = state.epsilon * math.sqrt(1 - b2 ** t)
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        # eps_t makes this identical to m_hat / (sqrt(v_hat) + eps)
        params[name] -= lr_t * m / (np.sqrt(v) + eps_t)


class Adam:
    """Adam over a dict of named arrays, mutated in place."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


def gradient_check(fun: Callable, x0, step: float = 1e-5, analytic=None) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``fun(x)`` returns the scalar value, or ``(value, gradient)`` when
    ``analytic`` is omitted (the gradient is then taken at ``x0``).
    """
    x0 = np.array(x0, dtype=np.float64)

    def value(x):
        v = fun(x)
        return float(v[0] if isinstance(v, tuple) else v)

    if analytic is None:
        _, analytic = fun(x0.copy())
    elif callable(analytic):
        analytic = analytic(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    x = x0.copy()
    flat = x.reshape(-1)
    base = x0.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        flat[i] = base[i] + step
        fp = value(x)
        flat[i] = base[i] - step
        fm = value(x)
        flat[i] = base[i]
        numeric[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def flatten_params(params: Mapping[str, np.ndarray], names: list[str] | None = None) -> np.ndarray:
    names = list(params) if names is None else names
    if not names:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[n]) for n in names])


def unflatten_params(vec: np.ndarray, like: Mapping[str, np.ndarray],
                     names: list[str] | None = None) -> dict[str, np.ndarray]:
    names = list(like) if names is None else names
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = np.asarray(vec[pos:pos + size], dtype=np.float64).reshape(like[n].shape).copy()
        pos += size
    if pos != len(vec):
        raise ValueError("vector length does not match parameter set")
    return out


# -- checkpoint files -------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    """Write named 2-D tensors in the line-oriented checkpoint format.

    Header: ``TAXELGRAPH-CKPT v1`` followed by ``key=value`` metadata. Each
    tensor is a ``name rows cols`` line and then one value per line.
    """
    header = CKPT_MAGIC
    for k, v in (meta or {}).items():
        sv = str(v)
        if any(c.isspace() for c in sv) or "=" in str(k):
            raise CheckpointError(f"metadata {k!r} must not contain whitespace")
        header += f" {k}={sv}"
    lines = [header]
    for name, t in tensors.items():
        a = np.asarray(t, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2 or any(c.isspace() for c in name):
            raise CheckpointError(f"bad tensor {name!r}")
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        lines.extend(_fmt(v) for v in a.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`write_checkpoint`; tensors come back 2-D."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(CKPT_MAGIC):
        raise CheckpointError("not a TAXELGRAPH checkpoint (bad or missing header)")
    meta = {}
    for item in lines[0][len(CKPT_MAGIC):].split():
        k, _, v = item.partition("=")
        meta[k] = v
    tensors, i = {}, 1
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3:
            raise CheckpointError(f"line {i + 1}: expected 'name rows cols'")
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        n = rows * cols
        vals = lines[i + 1:i + 1 + n]
        if len(vals) != n:
            raise CheckpointError(f"tensor {name} truncated")
        try:
            tensors[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(rows, cols)
        except ValueError as exc:
            raise CheckpointError(f"tensor {name}: {exc}") from None
        i += 1 + n
    return tensors, meta
