"""Dense ReLU network with hand-written backpropagation.

Weights are stored as ``(out, in)`` matrices so a layer computes
``x @ W.T + b`` on a row-major batch.  The same code runs the student and
the frozen snapshot teachers.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

PARAMS_MAGIC = b"MRKD"
PARAMS_VERSION = 1


class DimensionError(ValueError):
    """Raised when array shapes do not chain through the network."""


class CacheMismatchError(ValueError):
    """Raised when a forward cache does not belong to the given parameters."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ParamSet:
    """Ordered layers; ReLU between layers, identity after the last one."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for k, layer in enumerate(self.layers):
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionError(
                    f"layer {k}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree")
            if k and layer.weight.shape[1] != self.layers[k - 1].weight.shape[0]:
                raise DimensionError(
                    f"layer {k} expects {layer.weight.shape[1]} inputs but layer {k - 1} "
                    f"emits {self.layers[k - 1].weight.shape[0]}")

    @property
    def topology(self) -> tuple[int, ...]:
        return (self.layers[0].weight.shape[1],) + tuple(l.weight.shape[0] for l in self.layers)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays (no copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "ParamSet":
        return ParamSet([Layer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers])

    def same_shape(self, other: "ParamSet") -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.weight.shape == b.weight.shape for a, b in zip(self.layers, other.layers))

    def equals(self, other: "ParamSet") -> bool:
        """Exact (bitwise on values) equality of every weight and bias."""
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def to_bytes(self) -> bytes:
        parts = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(self.layers))]
        for layer in self.layers:
            rows, cols = layer.weight.shape
            parts.append(struct.pack("<QQ", rows, cols))
            parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def read_from(cls, fh: BinaryIO) -> "ParamSet":
        magic = fh.read(4)
        if magic != PARAMS_MAGIC:
            raise ValueError(f"bad parameter file magic {magic!r}")
        version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        layers = []
        for _ in range(n_layers):
            rows, cols = struct.unpack("<QQ", _read_exact(fh, 16))
            w = np.frombuffer(_read_exact(fh, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(_read_exact(fh, 8 * rows), dtype="<f8")
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
        return cls(layers)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        fh = io.BytesIO(blob)
        params = cls.read_from(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after parameter block")
        return params


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated parameter data: wanted {n} bytes, got {len(data)}")
    return data


def save_params(params: ParamSet, path: str | Path) -> None:
    Path(path).write_bytes(params.to_bytes())


def load_params(path: str | Path) -> ParamSet:
    return ParamSet.from_bytes(Path(path).read_bytes())


def init_params(topology: Sequence[int], seed: int) -> ParamSet:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases.

    ``topology`` lists layer widths from input to output, so ``[32, 64, 10]``
    builds two layers.
    """
    sizes = [int(s) for s in topology]
    if len(sizes) < 2:
        raise DimensionError("topology needs an input width and at least one layer width")
    if min(sizes) < 1:
        raise DimensionError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out)))
    return ParamSet(layers)


@dataclass
class BatchActivations:
    """What backward needs: each layer's input and pre-activation."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    params_id: int
    topology: tuple[int, ...]
    batch_size: int


def forward(params: ParamSet, inputs: np.ndarray) -> tuple[np.ndarray, BatchActivations]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.n_inputs:
        raise DimensionError(
            f"input of shape {np.shape(inputs)} does not match network input width {params.n_inputs}")
    if x.shape[0] < 1:
        raise DimensionError("empty batch")
    cache = BatchActivations([], [], id(params), params.topology, x.shape[0])
    h = x
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        cache.inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        cache.preacts.append(a)
        h = a if k == last else np.maximum(a, 0.0)
    return h, cache


def predict(params: ParamSet, inputs: np.ndarray) -> np.ndarray:
    """Logits without keeping a cache."""
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.n_inputs:
        raise DimensionError(
            f"input of shape {h.shape} does not match network input width {params.n_inputs}")
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        h = h @ layer.weight.T + layer.bias
        if k != last:
            h = np.maximum(h, 0.0)
    return h


def backward(params: ParamSet, cache: BatchActivations, dlogits: np.ndarray) -> ParamSet:
    """Gradient of the batch-mean loss.

    ``dlogits[i]`` is the derivative of sample ``i``'s own loss with respect
    to its logits; the result is averaged over the batch.
    """
    if cache.params_id != id(params) or cache.topology != params.topology:
        raise CacheMismatchError("forward cache was produced by a different parameter set")
    g = np.asarray(dlogits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache.batch_size, params.n_outputs):
        raise DimensionError(
            f"dlogits shape {g.shape} != ({cache.batch_size}, {params.n_outputs})")
    g = g / cache.batch_size
    grads: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        if k != len(params.layers) - 1:
            g = g * (cache.preacts[k] > 0.0)
        grads[k] = Layer(g.T @ cache.inputs[k], g.sum(axis=0))
        if k:
            g = g @ params.layers[k].weight
    return ParamSet(grads)
