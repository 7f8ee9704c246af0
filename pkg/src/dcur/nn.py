"""Small fully-connected networks in float64 with exact backprop, Adam and Polyak averaging.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch of row
vectors is propagated with ``x @ W + b``.  Every function accepts either a
single input vector or a 2-D batch of inputs.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid")

CHECKPOINT_MAGIC = b"DCURNN1"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when arrays do not match the network layout."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or network output stops being finite."""


class CheckpointFormatError(ValueError):
    """Raised when a parameter checkpoint cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(eq=False)
class MlpParams:
    """Network layout plus parameters.

    All parameters live in one contiguous ``flat`` vector ordered W0, b0, W1, b1, ...;
    ``weights`` and ``biases`` are views into it.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(int(n) <= 0 for n in self.layer_sizes):
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if self.flat is None:
            if len(self.weights) != n_layers or len(self.biases) != n_layers:
                raise ShapeError("number of weight/bias arrays does not match layer_sizes")
            for k in range(n_layers):
                expect = (self.layer_sizes[k], self.layer_sizes[k + 1])
                w = np.asarray(self.weights[k])
                b = np.asarray(self.biases[k])
                if w.shape != expect:
                    raise ShapeError(f"layer {k} weight shape {w.shape} != {expect}")
                if b.shape != (expect[1],):
                    raise ShapeError(f"layer {k} bias shape {b.shape} != {(expect[1],)}")
            pieces = []
            for w, b in zip(self.weights, self.biases):
                pieces += [np.asarray(w, dtype=np.float64).ravel(),
                           np.asarray(b, dtype=np.float64).ravel()]
            self.flat = np.concatenate(pieces)
        elif self.flat.shape != (param_count(self.layer_sizes),):
            raise ShapeError(f"flat buffer shape {self.flat.shape} does not match {self.layer_sizes}")
        if not np.isfinite(self.flat).all():
            bad = int(np.flatnonzero(~np.isfinite(self.flat))[0])
            raise NonFiniteError(f"non-finite parameter at flat index {bad}")
        self.weights, self.biases = _views(self.flat, self.layer_sizes)

    @classmethod
    def from_flat(cls, layer_sizes, flat, hidden_activation="relu",
                  output_activation="identity") -> "MlpParams":
        return cls(layer_sizes, None, None, hidden_activation, output_activation,
                   np.asarray(flat, dtype=np.float64))

    def with_flat(self, flat) -> "MlpParams":
        """Same layout, new parameter vector (validated layout is reused)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat.shape:
            raise ShapeError(f"flat buffer shape {flat.shape} != {self.flat.shape}")
        new = object.__new__(MlpParams)
        new.layer_sizes = self.layer_sizes
        new.hidden_activation = self.hidden_activation
        new.output_activation = self.output_activation
        new.flat = flat
        new.weights, new.biases = _views(flat, self.layer_sizes)
        return new

    @property
    def arrays(self) -> list[np.ndarray]:
        """Parameter views in flat order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]


def param_count(layer_sizes) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


@functools.lru_cache(maxsize=None)
def _layout(layer_sizes: tuple) -> tuple:
    out = []
    pos = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        out.append((pos, pos + fan_in * fan_out, pos + fan_in * fan_out + fan_out, (fan_in, fan_out)))
        pos += fan_in * fan_out + fan_out
    return tuple(out)


def _views(flat, layer_sizes):
    weights, biases = [], []
    for start, mid, end, shape in _layout(tuple(layer_sizes)):
        weights.append(flat[start:mid].reshape(shape))
        biases.append(flat[mid:end])
    return weights, biases


def flatten_grads(grads) -> np.ndarray:
    """Concatenate a per-array gradient list into the flat parameter order."""
    if isinstance(grads, np.ndarray):
        return grads
    return np.concatenate([np.ravel(g) for g in grads])


def init_mlp(layer_sizes, rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams([int(n) for n in layer_sizes], weights, biases,
                     hidden_activation, output_activation)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"input shape {x.shape} incompatible with input size {params.input_size}")
    return x, single


def _output(z, kind):
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    # logistic via tanh: no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward pass returning the output and the per-layer activations.

    ``cache[k]`` is the input to layer ``k``; the last entry is the network output.
    """
    x, _ = _as_batch(params, x)
    cache = [x]
    h = x
    last = len(params.weights) - 1
    relu = params.hidden_activation == "relu"
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w
        z += b
        if k == last:
            h = _output(z, params.output_activation)
        elif relu:
            h = np.maximum(z, 0.0, out=z)
        else:
            h = np.tanh(z, out=z)
        cache.append(h)
    return h, cache


def backward_cached(params: MlpParams, cache, out_grad, through_output: bool = True,
                    need_input_grad: bool = True, need_param_grads: bool = True):
    """Reverse pass over a cached forward pass.

    ``out_grad`` is dL/d(output) for the batch; with ``through_output=False`` it is
    taken to be dL/d(pre-activation of the last layer) instead, which is the
    numerically stable route for sigmoid + cross-entropy.
    Returns ``(flat_grad, input_grad)``; either is None when not requested.
    """
    delta = np.asarray(out_grad, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape != cache[-1].shape:
        raise ShapeError(f"output gradient shape {delta.shape} != output shape {cache[-1].shape}")
    if through_output:
        y = cache[-1]
        kind = params.output_activation
        if kind == "tanh":
            delta = delta * (1.0 - y * y)
        elif kind == "sigmoid":
            delta = delta * y * (1.0 - y)
    grad = None
    if need_param_grads:
        grad = np.empty_like(params.flat)
        gw, gb = _views(grad, params.layer_sizes)
    for k in range(len(params.weights) - 1, -1, -1):
        h_in = cache[k]
        if need_param_grads:
            np.matmul(h_in.T, delta, out=gw[k])
            np.sum(delta, axis=0, out=gb[k])
        if k == 0 and not need_input_grad:
            return grad, None
        delta = delta @ params.weights[k].T
        if k > 0:
            if params.hidden_activation == "relu":
                delta *= h_in > 0.0
            else:
                delta *= 1.0 - h_in * h_in
    return grad, delta


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x_arr = np.asarray(x)
    out, _ = forward_cached(params, x_arr)
    return out[0] if x_arr.ndim == 1 else out


def mlp_backward(params: MlpParams, x, output_gradient):
    """Gradients of the scalar ``sum(output_gradient * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of arrays
    shaped like ``params.arrays``.
    """
    x_arr = np.asarray(x)
    g = np.asarray(output_gradient, dtype=np.float64)
    if x_arr.ndim == 1 and g.shape != (params.output_size,):
        raise ShapeError(f"output gradient shape {g.shape} != ({params.output_size},)")
    _, cache = forward_cached(params, x_arr)
    flat, dx = backward_cached(params, cache, g)
    gw, gb = _views(flat, params.layer_sizes)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    return grads, (dx[0] if x_arr.ndim == 1 else dx)


@dataclass
class AdamState:
    """Adam moments, stored flat in the same order as ``MlpParams.flat``."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
              epsilon=1e-8) -> "AdamState":
        """Zero moments for an ``MlpParams`` or for a parameter count."""
        n = params.flat.size if isinstance(params, MlpParams) else int(params)
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, beta1, beta2, epsilon)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.learning_rate, self.beta1, self.beta2, self.epsilon)


def adam_update(flat: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam on a raw parameter vector. Inputs are left untouched."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != flat.shape or state.first_moment.shape != flat.shape:
        raise ShapeError(f"gradient size {g.shape} / moments {state.first_moment.shape} "
                         f"do not match parameters {flat.shape}")
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteError(f"non-finite gradient at Adam step {state.step_count + 1}, "
                             f"flat index {bad} (value {g[bad]})")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment
    m += (1.0 - b1) * g
    v = b2 * state.second_moment
    v += (1.0 - b2) * (g * g)
    step_size = state.learning_rate / (1.0 - b1 ** t)
    denom = v * (1.0 / (1.0 - b2 ** t))
    np.sqrt(denom, out=denom)
    denom += state.epsilon
    np.divide(m, denom, out=denom)
    denom *= step_size
    return flat - denom, AdamState(m, v, t, state.learning_rate, b1, b2, state.epsilon)


def adam_step(params: MlpParams, grads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam update of a network; ``grads`` may be flat or a per-array list."""
    new_flat, new_state = adam_update(params.flat, flatten_grads(grads), state)
    return params.with_flat(new_flat), new_state


def polyak_update(target: MlpParams, source: MlpParams, rho: float) -> MlpParams:
    """Return ``rho * target + (1 - rho) * source`` elementwise."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if target.layer_sizes != source.layer_sizes:
        raise ShapeError(f"layer sizes differ: {target.layer_sizes} vs {source.layer_sizes}")
    if rho == 1.0:
        return target.copy()
    if rho == 0.0:
        return source.copy()
    # t + (1 - rho)(s - t) is the same convex combination, and exact when s == t
    return target.with_flat(target.flat + (1.0 - rho) * (source.flat - target.flat))


# -- checkpoint file ---------------------------------------------------------

def params_to_bytes(params: MlpParams) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(params.layer_sizes)),
        struct.pack(f"<{len(params.layer_sizes)}I", *params.layer_sizes),
        struct.pack("<BB", HIDDEN_ACTIVATIONS.index(params.hidden_activation),
                    OUTPUT_ACTIVATIONS.index(params.output_activation)),
    ]
    parts.append(params.flat.astype("<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> MlpParams:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic, not a network checkpoint", 0)
    version, n_sizes = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", pos - 8)
    if n_sizes < 2:
        raise CheckpointFormatError(f"invalid layer count {n_sizes}", pos - 4)
    sizes = list(struct.unpack(f"<{n_sizes}I", take(4 * n_sizes, "layer sizes")))
    act_at = pos
    hidden, output = struct.unpack("<BB", take(2, "activations"))
    if hidden >= len(HIDDEN_ACTIVATIONS) or output >= len(OUTPUT_ACTIVATIONS):
        raise CheckpointFormatError("unknown activation code", act_at)
    if any(n == 0 for n in sizes):
        raise CheckpointFormatError("zero layer size", act_at - 4 * n_sizes)
    n = param_count(sizes)
    flat = np.frombuffer(take(8 * n, "parameters"), dtype="<f8").astype(np.float64)
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after parameters", pos)
    return MlpParams.from_flat(sizes, flat, HIDDEN_ACTIVATIONS[hidden], OUTPUT_ACTIVATIONS[output])


def save_params(params: MlpParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
