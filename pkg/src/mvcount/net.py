"""Minimal trainable network blocks: conv / 2x2 maxpool / relu / concat,
squared-error loss and plain SGD, with exact reverse-mode gradients.

Everything runs in float64 on (channels, height, width) arrays.  Convolutions
are same-size with zero padding, odd kernel dims, and no bias terms; pooling
halves spatial dims with ceil.  Weight init is uniform in
+-sqrt(6 / (fan_in + fan_out)) from a seeded counter-based generator, so runs
are reproducible bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .maps import Map2D

CHECKPOINT_MAGIC = b"MVNP"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "pool" | "relu" | "concat"
    name: str = ""  # parameter name, conv layers only
    out_ch: int = 0
    in_ch: int = 0
    kh: int = 0
    kw: int = 0


def conv(name: str, out_ch: int, in_ch: int, kh: int = 5, kw: int = 5) -> LayerSpec:
    return LayerSpec("conv", name, out_ch, in_ch, kh, kw)


def pool() -> LayerSpec:
    return LayerSpec("pool")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def concat() -> LayerSpec:
    return LayerSpec("concat")


@dataclass(frozen=True)
class ConvNetSpec:
    """Ordered layer descriptors plus the parameter-init seed."""

    name: str
    layers: tuple
    seed: int = 0

    def __post_init__(self):
        ch = None
        for i, lay in enumerate(self.layers):
            if lay.kind == "concat":
                if i != 0:
                    raise ValueError("concat is only supported as the first layer")
            elif lay.kind == "conv":
                if lay.kh % 2 == 0 or lay.kw % 2 == 0:
                    raise ValueError(f"{lay.name}: kernel dims must be odd")
                if ch is not None and ch != lay.in_ch:
                    raise ValueError(f"{lay.name}: expects {lay.in_ch} channels, got {ch}")
                ch = lay.out_ch

    def param_shapes(self) -> dict:
        return {
            f"{self.name}/{lay.name}": (lay.out_ch, lay.in_ch, lay.kh, lay.kw)
            for lay in self.layers
            if lay.kind == "conv"
        }


class Parameters:
    """Flat store of named weight tensors and their gradients."""

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.tensors[name])

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list:
        return sorted(self.tensors)

    def checksum(self, prefix: str = "") -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name in self.names():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.tensors[name].tobytes())
        return h.digest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            for name in self.names():
                t = self.tensors[name]
                enc = name.encode()
                f.write(struct.pack("<H", len(enc)))
                f.write(enc)
                f.write(struct.pack("<B", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(t.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Parameters":
        params = cls()
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a parameter checkpoint")
            while True:
                head = f.read(2)
                if not head:
                    break
                (n,) = struct.unpack("<H", head)
                name = f.read(n).decode()
                (rank,) = struct.unpack("<B", f.read(1))
                dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
                count = int(np.prod(dims))
                data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(dims)
                params.add(name, data)
        return params


def glorot_init(spec: ConvNetSpec, params: Parameters, rng: np.random.Generator) -> None:
    for name, shape in spec.param_shapes().items():
        out_ch, in_ch, kh, kw = shape
        fan_in = in_ch * kh * kw
        fan_out = out_ch * kh * kw
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.add(name, rng.uniform(-bound, bound, size=shape))


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Map2D) else np.ascontiguousarray(x, dtype=np.float64)


def forward(spec: ConvNetSpec, params: Parameters, inputs: list):
    """Run the network on a list of inputs (one element unless concat leads).

    Returns (output Map2D, cache); the cache is consumed by :func:`backward`
    and is invalidated by any optimizer step.
    """
    arrays = [_values(x) for x in inputs]
    layers = list(spec.layers)
    saved = []
    if layers and layers[0].kind == "concat":
        split = [a.shape[0] for a in arrays]
        x = np.concatenate(arrays, axis=0)
        saved.append(("concat", split))
        layers = layers[1:]
    else:
        if len(arrays) != 1:
            raise ValueError("multiple inputs require a leading concat layer")
        x = arrays[0]
        saved.append(("input", None))
    for lay in layers:
        if lay.kind == "conv":
            w = params.tensors[f"{spec.name}/{lay.name}"]
            if x.shape[0] != lay.in_ch:
                raise ValueError(f"{lay.name}: expects {lay.in_ch} channels, got {x.shape[0]}")
            saved.append(("conv", (lay, np.ascontiguousarray(x))))
            x = _kernels.conv2d_fwd(np.ascontiguousarray(x), w)
        elif lay.kind == "relu":
            x = np.maximum(x, 0.0)
            saved.append(("relu", x > 0.0))
        elif lay.kind == "pool":
            shape = x.shape
            x, idx = _kernels.maxpool2_fwd(np.ascontiguousarray(x))
            saved.append(("pool", (idx, shape)))
        else:
            raise ValueError(f"unknown layer kind {lay.kind!r}")
    tag = inputs[0].tag if isinstance(inputs[0], Map2D) else "ground"
    out = Map2D(x, np.ones(x.shape[1:], bool), tag=tag)
    cache = {"saved": saved, "spec": spec, "step": params.step_count}
    return out, cache


def backward(spec: ConvNetSpec, params: Parameters, cache: dict, upstream: np.ndarray):
    """Exact reverse-mode pass; accumulates weight grads, returns input grads."""
    if cache["spec"] is not spec:
        raise ValueError("cache was produced by a different spec")
    if cache["step"] != params.step_count:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.ascontiguousarray(upstream, dtype=np.float64)
    for kind, data in reversed(cache["saved"][1:]):
        if kind == "conv":
            lay, x = data
            w = params.tensors[f"{spec.name}/{lay.name}"]
            params.accumulate(f"{spec.name}/{lay.name}", _kernels.conv2d_bwd_w(x, g, lay.kh, lay.kw))
            g = _kernels.conv2d_bwd_x(g, w)
        elif kind == "relu":
            g = g * data
        elif kind == "pool":
            idx, shape = data
            g = _kernels.maxpool2_bwd(np.ascontiguousarray(g), idx, shape[1], shape[2])
    first_kind, first_data = cache["saved"][0]
    if first_kind == "concat":
        out, pos = [], 0
        for n in first_data:
            out.append(g[pos : pos + n])
            pos += n
        return out
    return [g]


def sgd_step(params: Parameters, lr: float, trainable=None) -> None:
    """w <- w - lr * g for trainable tensors; clears all gradients."""
    for name in params.names():
        g = params.grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if trainable is None or trainable(name):
            params.tensors[name] -= lr * g
    params.zero_grads()
    params.step_count += 1


def squared_error(pred: np.ndarray, target: np.ndarray):
    """Pixel-wise squared error summed over the map; returns (loss, dL/dpred)."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((diff * diff).sum()), 2.0 * diff


def fcn7_spec(name: str = "backbone", channel_factor: float = 1.0, seed: int = 0) -> ConvNetSpec:
    """The 7-conv view backbone: density estimation at quarter resolution."""

    def ch(n):
        return max(1, int(round(n * channel_factor)))

    return ConvNetSpec(
        name,
        (
            conv("conv1", ch(16), 1),
            relu(),
            conv("conv2", ch(16), ch(16)),
            relu(),
            pool(),
            conv("conv3", ch(32), ch(16)),
            relu(),
            conv("conv4", ch(32), ch(32)),
            relu(),
            pool(),
            conv("conv5", ch(64), ch(32)),
            relu(),
            conv("conv6", ch(32), ch(64)),
            relu(),
            conv("conv7", 1, ch(32)),
        ),
        seed,
    )


def extractor_spec(name: str = "backbone", channel_factor: float = 1.0, seed: int = 0) -> ConvNetSpec:
    """First four conv layers of the backbone (with the interleaved pool):
    feature maps at half resolution."""

    def ch(n):
        return max(1, int(round(n * channel_factor)))

    return ConvNetSpec(
        name,
        (
            conv("conv1", ch(16), 1),
            relu(),
            conv("conv2", ch(16), ch(16)),
            relu(),
            pool(),
            conv("conv3", ch(32), ch(16)),
            relu(),
            conv("conv4", ch(32), ch(32)),
            relu(),
        ),
        seed,
    )


def fusion_spec(n_inputs_ch: int, name: str = "fusion", channel_factor: float = 1.0, seed: int = 0) -> ConvNetSpec:
    """Concat + 3 convs mapping stacked projected maps to the scene density."""

    def ch(n):
        return max(1, int(round(n * channel_factor)))

    return ConvNetSpec(
        name,
        (
            concat(),
            conv("conv1", ch(64), n_inputs_ch),
            relu(),
            conv("conv2", ch(32), ch(64)),
            relu(),
            conv("conv3", 1, ch(32)),
        ),
        seed,
    )


def aux_head_spec(in_ch: int, name: str = "aux", channel_factor: float = 1.0, seed: int = 0) -> ConvNetSpec:
    """Auxiliary 3-conv branch regressing view densities from features."""

    def ch(n):
        return max(1, int(round(n * channel_factor)))

    return ConvNetSpec(
        name,
        (
            conv("conv1", ch(32), in_ch),
            relu(),
            conv("conv2", ch(32), ch(32)),
            relu(),
            conv("conv3", 1, ch(32)),
        ),
        seed,
    )
