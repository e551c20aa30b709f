"""Dense feed-forward networks on a flat weight vector.

Weights live in one contiguous float array. The layout is: layers in order,
and within a layer the weight matrix in row-major (output-major) order
followed by the biases. Every other module indexes into this layout, so it
must not change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

DTYPE = np.float32

WEIGHTS_MAGIC = b"TMFW"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<4sBI")


class ShapeError(ValueError):
    """Input, target or weight dimensions disagree with the network spec."""


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"
    SOFTMAX = "softmax"


class Loss(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.input_dim}->{self.output_dim}")
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_params(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    loss: Loss = Loss.MSE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "loss", Loss(self.loss))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_dim != b.input_dim:
                raise ValueError(f"layers do not chain: {a.output_dim} != {b.input_dim}")
        for layer in self.layers[:-1]:
            if layer.activation is Activation.SOFTMAX:
                raise ValueError("softmax is only allowed on the final layer")
        final = self.layers[-1].activation
        if self.loss is Loss.CROSS_ENTROPY and final is not Activation.SOFTMAX:
            raise ValueError("cross-entropy requires a softmax output layer")
        if self.loss is Loss.MSE and final is not Activation.IDENTITY:
            raise ValueError("MSE requires an identity output layer")

    @classmethod
    def dense(
        cls,
        dims: Sequence[int],
        hidden: Activation | str = Activation.TANH,
        loss: Loss | str = Loss.MSE,
    ) -> "NetworkSpec":
        """Chain of dense layers through ``dims``; the output activation follows the loss."""
        loss = Loss(loss)
        out_act = Activation.SOFTMAX if loss is Loss.CROSS_ENTROPY else Activation.IDENTITY
        n = len(dims) - 1
        layers = [
            LayerSpec(dims[i], dims[i + 1], out_act if i == n - 1 else Activation(hidden))
            for i in range(n)
        ]
        return cls(tuple(layers), loss)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def param_count(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def offsets(self) -> list[int]:
        """Start offset of each layer, plus the total as the last entry."""
        out = [0]
        for layer in self.layers:
            out.append(out[-1] + layer.n_params)
        return out

    def layer_slice(self, k: int) -> slice:
        off = self.offsets
        return slice(off[k], off[k + 1])

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views per layer; W has shape (output_dim, input_dim)."""
        check_weights(self, w)
        views = []
        start = 0
        for layer in self.layers:
            n_w = layer.input_dim * layer.output_dim
            W = w[start : start + n_w].reshape(layer.output_dim, layer.input_dim)
            b = w[start + n_w : start + n_w + layer.output_dim]
            views.append((W, b))
            start += layer.n_params
        return views


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    target: np.ndarray


class Trace(NamedTuple):
    pre: list[np.ndarray]   # pre-activation of each layer
    post: list[np.ndarray]  # post[0] is the input; post[k + 1] is layer k's output


class TrainMask(NamedTuple):
    """Boolean gradient mask plus which layers contain any trainable coordinate."""

    mask: np.ndarray
    layers: tuple[bool, ...]

    @classmethod
    def from_array(cls, spec: NetworkSpec, mask: np.ndarray) -> "TrainMask":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (spec.param_count,):
            raise ShapeError(f"mask has shape {mask.shape}, expected ({spec.param_count},)")
        flags = tuple(bool(mask[spec.layer_slice(k)].any()) for k in range(len(spec.layers)))
        return cls(mask, flags)


def check_weights(spec: NetworkSpec, w: np.ndarray) -> None:
    if w.ndim != 1 or w.shape[0] != spec.param_count:
        raise ShapeError(f"weight vector has shape {w.shape}, expected ({spec.param_count},)")


def init_weights(spec: NetworkSpec, seed: int | Sequence[int]) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    w = np.zeros(spec.param_count, dtype=DTYPE)
    for (W, _), layer in zip(spec.unpack(w), spec.layers):
        limit = np.sqrt(6.0 / (layer.input_dim + layer.output_dim))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return w


def _activate(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.RELU:
        return np.maximum(z, 0)
    if act is Activation.SOFTMAX:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def forward(spec: NetworkSpec, w: np.ndarray, x) -> tuple[np.ndarray, Trace]:
    """Run ``x`` through the network.

    ``x`` is a single input vector or a batch with inputs along the last
    axis. Computation happens in the dtype of ``w``.
    """
    x = np.asarray(x, dtype=w.dtype)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected last dim {spec.input_dim}")
    pre, post = [], [x]
    h = x
    for (W, b), layer in zip(spec.unpack(w), spec.layers):
        z = h @ W.T + b
        h = _activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    return h, Trace(pre, post)


def predict(spec: NetworkSpec, w: np.ndarray, x) -> np.ndarray:
    return forward(spec, w, x)[0]


def loss_value(spec: NetworkSpec, output: np.ndarray, target: np.ndarray) -> float:
    """Mean loss over the leading (batch) axis, if any."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if spec.loss is Loss.MSE:
        return float(np.mean((output - target) ** 2))
    p = np.clip(output, np.finfo(np.float64).tiny, None)
    per_sample = -np.sum(target * np.log(p), axis=-1)
    return float(np.mean(per_sample))


def backward(
    spec: NetworkSpec,
    w: np.ndarray,
    sample: Sample,
    mask: TrainMask | np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and gradient for one sample.

    Coordinates outside ``mask`` get an exact zero gradient, and layers below
    the lowest trainable one are skipped entirely.
    """
    target = np.asarray(sample.target, dtype=w.dtype)
    if target.shape != (spec.output_dim,):
        raise ShapeError(f"target has shape {target.shape}, expected ({spec.output_dim},)")
    x = np.asarray(sample.input, dtype=w.dtype)
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, expected ({spec.input_dim},)")
    if mask is not None and not isinstance(mask, TrainMask):
        mask = TrainMask.from_array(spec, mask)

    out, trace = forward(spec, w, x)
    if spec.loss is Loss.MSE:
        diff = out - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        delta = diff * w.dtype.type(2.0 / spec.output_dim)
    else:
        loss = loss_value(spec, out, target)
        delta = out - target

    grad = np.zeros_like(w)
    n_layers = len(spec.layers)
    if mask is None:
        lowest = 0
    elif any(mask.layers):
        lowest = mask.layers.index(True)
    else:
        return loss, grad

    params = spec.unpack(w)
    offsets = spec.offsets
    for k in range(n_layers - 1, lowest - 1, -1):
        layer = spec.layers[k]
        start = offsets[k]
        n_w = layer.input_dim * layer.output_dim
        grad[start : start + n_w] = np.outer(delta, trace.post[k]).ravel()
        grad[start + n_w : offsets[k + 1]] = delta
        if k > lowest:
            delta = params[k][0].T @ delta
            below = spec.layers[k - 1].activation
            if below is Activation.TANH:
                delta = delta * (1 - trace.post[k] * trace.post[k])
            elif below is Activation.RELU:
                delta = delta * (trace.pre[k - 1] > 0)
    if mask is not None:
        grad = np.where(mask.mask, grad, grad.dtype.type(0))
    return loss, grad


def sgd_step(w: np.ndarray, grad: np.ndarray, beta: float) -> np.ndarray:
    if w.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match weights {w.shape}")
    if beta < 0:
        raise ValueError(f"learning rate must be non-negative, got {beta}")
    return w - w.dtype.type(beta) * grad


def serialize_weights(w: np.ndarray) -> bytes:
    """Canonical little-endian float32 serialization with a small header."""
    values = np.asarray(w, dtype="<f4")
    return _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, values.size) + values.tobytes()


def deserialize_weights(data: bytes) -> np.ndarray:
    if len(data) < _WEIGHTS_HEADER.size:
        raise ValueError("weight blob shorter than its header")
    magic, version, count = _WEIGHTS_HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"bad weight magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight format version {version}")
    body = data[_WEIGHTS_HEADER.size :]
    if len(body) != 4 * count:
        raise ValueError(f"weight blob holds {len(body)} bytes, expected {4 * count}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE)
