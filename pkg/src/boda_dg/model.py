"""MLP encoder + affine classifier with hand-written backpropagation.

``layer_dims = [F, h_1, ..., E, C]``: every layer but the last belongs to the
encoder, ReLU sits *between* encoder layers (not after the last one), and the
final affine layer maps the embedding ``Z`` to raw logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionMismatch, InvalidDims, NonFiniteGradient
from .numerics import RngStream


@dataclass
class ModelParams:
    weights: list[NDArray]  # weights[l] has shape (out, in)
    biases: list[NDArray]

    @property
    def layer_dims(self) -> list[int]:
        return [int(self.weights[0].shape[1])] + [int(W.shape[0]) for W in self.weights]

    @property
    def encoder_depth(self) -> int:
        return len(self.weights) - 1

    @property
    def embedding_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.weights[-1].shape[0])

    def arrays(self) -> list[NDArray]:
        """All parameters in a fixed order: W_0, b_0, W_1, b_1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def to_dict(self, metadata: dict | None = None) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "encoder_depth": self.encoder_depth,
            "weights": [W.reshape(-1).tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "metadata": metadata or {},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelParams":
        dims = [int(v) for v in obj["layer_dims"]]
        if len(obj["weights"]) != len(dims) - 1 or len(obj["biases"]) != len(dims) - 1:
            raise DimensionMismatch("layer count disagrees with layer_dims")
        weights, biases = [], []
        for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            W = np.asarray(obj["weights"][l], dtype=np.float64)
            b = np.asarray(obj["biases"][l], dtype=np.float64)
            if W.size != fan_in * fan_out or b.size != fan_out:
                raise DimensionMismatch(f"layer {l} has the wrong number of entries")
            weights.append(W.reshape(fan_out, fan_in))
            biases.append(b)
        return cls(weights, biases)


def save_model(params: ModelParams, path, metadata: dict | None = None) -> None:
    text = json.dumps(params.to_dict(metadata), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_model(path) -> tuple[ModelParams, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return ModelParams.from_dict(obj), obj.get("metadata", {})


def glorot_uniform(fan_in: int, fan_out: int, rng: RngStream) -> NDArray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_range(-a, a, (fan_out, fan_in))


def init_params(layer_dims, seed: int) -> ModelParams:
    dims = [int(v) for v in layer_dims]
    if len(dims) < 2 or any(v < 1 for v in dims):
        raise InvalidDims(f"invalid layer dims {layer_dims!r}")
    rng = RngStream(seed)
    weights = [glorot_uniform(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return ModelParams(weights, biases)


def reinit_classifier(params: ModelParams, seed: int) -> ModelParams:
    """Copy of ``params`` with a freshly initialised final layer."""
    out = params.copy()
    E, C = params.embedding_dim, params.num_classes
    out.weights[-1] = glorot_uniform(E, C, RngStream(seed))
    out.biases[-1] = np.zeros(C)
    return out


@dataclass
class ForwardCache:
    inputs: list[NDArray]  # input to each layer
    pre: list[NDArray]  # pre-activation of each layer
    Z: NDArray
    logits: NDArray


def forward(params: ModelParams, X: NDArray) -> ForwardCache:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[1]:
        raise DimensionMismatch(
            f"input has shape {X.shape}, first layer expects {params.weights[0].shape[1]} features"
        )
    inputs, pre = [], []
    h = X
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ W.T + b
        pre.append(a)
        # ReLU only between encoder layers
        h = np.maximum(a, 0.0) if l < L - 2 else a
    Z = inputs[-1]
    return ForwardCache(inputs, pre, Z, pre[-1])


def backward(
    params: ModelParams,
    cache: ForwardCache,
    dL_dlogits: NDArray | None,
    dL_dZ: NDArray | None = None,
    frozen_layers: int = 0,
) -> ModelParams:
    """Reverse-mode gradients of ``L`` w.r.t. every parameter.

    ``L`` may depend on the logits, on the embedding ``Z`` directly, or on
    both; the two upstream gradients are summed where the paths meet at Z.
    Either may be ``None`` meaning zero. Layers below ``frozen_layers`` get
    zero gradients without being visited.
    """
    N = cache.Z.shape[0]
    C, E = params.num_classes, params.embedding_dim
    if dL_dlogits is None:
        dL_dlogits = np.zeros((N, C))
    if dL_dlogits.shape != (N, C):
        raise DimensionMismatch(f"dL_dlogits has shape {dL_dlogits.shape}, expected {(N, C)}")
    if dL_dZ is not None and dL_dZ.shape != (N, E):
        raise DimensionMismatch(f"dL_dZ has shape {dL_dZ.shape}, expected {(N, E)}")

    L = len(params.weights)
    gW: list[NDArray] = [None] * L  # type: ignore[list-item]
    gb: list[NDArray] = [None] * L  # type: ignore[list-item]
    delta = dL_dlogits
    for l in range(frozen_layers):
        gW[l] = np.zeros_like(params.weights[l])
        gb[l] = np.zeros_like(params.biases[l])
    for l in range(L - 1, frozen_layers - 1, -1):
        gW[l] = delta.T @ cache.inputs[l]
        gb[l] = delta.sum(axis=0)
        if l == frozen_layers:
            break
        up = delta @ params.weights[l]
        if l == L - 1 and dL_dZ is not None:
            up = up + dL_dZ
        if l - 1 < L - 2:
            # layer l-1 is followed by a ReLU
            up = up * (cache.pre[l - 1] > 0.0)
        delta = up
    return ModelParams(gW, gb)


@dataclass
class SGD:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: list[NDArray] | None = field(default=None, repr=False)

    def step(self, params: ModelParams, grads: ModelParams, frozen_layers: int = 0) -> None:
        """In-place update. Layers with index < ``frozen_layers`` are left alone."""
        sgd_step(params, grads, self.lr, self.momentum, self, frozen_layers)


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float,
    state: SGD,
    frozen_layers: int = 0,
) -> None:
    if not lr >= 0 or not (0 <= momentum < 1):
        raise ValueError("need lr >= 0 and momentum in [0, 1)")
    g_arrays = grads.arrays()
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or Inf")
    p_arrays = params.arrays()
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in p_arrays]
    start = 2 * frozen_layers
    for i in range(start, len(p_arrays)):
        if p_arrays[i].shape != g_arrays[i].shape:
            raise DimensionMismatch("gradient shape does not match parameter")
        v = state.velocity[i]
        v *= momentum
        v += g_arrays[i]
        p_arrays[i] -= lr * v
