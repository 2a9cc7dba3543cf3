"""Dense MLPs with ReLU, reverse-mode gradients, Adam and a binary checkpoint.

All arithmetic is float64.  ``forward`` accepts a single vector or a batch
(rows are samples); gradients of a batch are sums over its rows.

Checkpoint layout (little-endian, see ``docs/checkpoint_format.md``)::

    magic      4 bytes   b"MKNN"
    version    uint32    FORMAT_VERSION
    n_nets     uint32
    per net:   uint16 name length, UTF-8 name, uint32 n_layers,
               per layer uint32 out, uint32 in, uint8 activation
    payload    float64   for every net, every layer: W row-major (out x in), then b
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MKNN"
FORMAT_VERSION = 1
ACTIVATIONS = ("identity", "relu")


class NnError(ValueError):
    """Rejected input: shape mismatch, stale cache, non-finite values."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise NnError(f"unknown activation {self.activation!r}")
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise NnError(f"layer shapes {self.weight.shape} / {self.bias.shape} are inconsistent")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpCache:
    net_id: int
    version: int
    inputs: list        # input of every layer
    pre: list           # pre-activations of every layer
    batched: bool


class Mlp:
    """Chain of affine layers; ``version`` changes whenever parameters do."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise NnError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise NnError(f"layer dimensions do not chain: {prev.fan_out} -> {nxt.fan_in}")
        self.layers = layers
        self.version = 0
        self.check_finite()

    @classmethod
    def build(cls, sizes, rng: np.random.Generator, output_activation: str = "identity") -> "Mlp":
        """He-uniform ReLU hidden layers, Xavier-uniform identity output layer, zero biases."""
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if k == len(sizes) - 2 else "relu"
            if act == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def sizes(self) -> tuple:
        return (self.layers[0].fan_in,) + tuple(layer.fan_out for layer in self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def touch(self) -> None:
        """Record an in-place parameter change; invalidates earlier caches."""
        self.version += 1

    def check_finite(self) -> None:
        for k, p in enumerate(self.parameters()):
            if not np.all(np.isfinite(p)):
                raise NnError(f"non-finite value in parameter array {k}")

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def load_from(self, other: "Mlp") -> None:
        if other.sizes != self.sizes:
            raise NnError("cannot copy parameters between differently shaped networks")
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src
        self.touch()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise NnError(f"input shape {x.shape} does not match input dimension {self.in_dim}")
        h = x if batched else x[None, :]
        inputs, pre = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        out = h if batched else h[0]
        return out, MlpCache(id(self), self.version, inputs, pre, batched)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: MlpCache, output_grad):
        """Returns ``(grads, input_grad)``; ``grads`` matches ``parameters()``."""
        if cache.net_id != id(self) or cache.version != self.version:
            raise NnError("stale cache: parameters changed since the forward pass")
        g = np.asarray(output_grad, dtype=np.float64)
        g = g if cache.batched else g[None, :]
        if g.shape != cache.pre[-1].shape:
            raise NnError(f"output gradient shape {g.shape} does not match {cache.pre[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "relu":
                g = g * (cache.pre[k] > 0.0)
            grads[2 * k] = g.T @ cache.inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return grads, (g if cache.batched else g[0])


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, cache: MlpCache, output_grad):
    return net.backward(cache, output_grad)


@dataclass
class AdamState:
    lr: float = 9e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, in place.

    ``params`` is a list of arrays or an object with ``parameters()`` (an
    ``Mlp`` or a composite of them), whose ``touch()`` is then called.
    Returns ``(params, state)``.
    """
    owner = params if hasattr(params, "parameters") else None
    arrays = owner.parameters() if owner is not None else list(params)
    grads = list(grads)
    if len(arrays) != len(grads):
        raise NnError(f"{len(grads)} gradients for {len(arrays)} parameter arrays")
    for k, (p, g) in enumerate(zip(arrays, grads)):
        if np.shape(g) != p.shape:
            raise NnError(f"gradient {k} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NnError(f"non-finite gradient in parameter array {k} (shape {p.shape})")
    if not state.m:
        state.m = [np.zeros_like(p) for p in arrays]
        state.v = [np.zeros_like(p) for p in arrays]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if owner is not None and hasattr(owner, "touch"):
        owner.touch()
    return params, state


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, nets: dict) -> None:
    """Write named networks in the layout described in the module docstring."""
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(nets))]
    payload = []
    for name, net in nets.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            header.append(struct.pack("<IIB", layer.fan_out, layer.fan_in, ACTIVATIONS.index(layer.activation)))
            payload += [layer.weight.astype("<f8").tobytes(order="C"), layer.bias.astype("<f8").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(header + payload))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise NnError(f"{path}: not a network checkpoint")
    version, n_nets = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise NnError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    shapes = []
    for _ in range(n_nets):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (n_layers,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layers = []
        for _ in range(n_layers):
            out_dim, in_dim, act = struct.unpack_from("<IIB", data, pos)
            pos += 9
            layers.append((out_dim, in_dim, ACTIVATIONS[act]))
        shapes.append((name, layers))
    nets = {}
    for name, layers in shapes:
        built = []
        for out_dim, in_dim, act in layers:
            w = np.frombuffer(data, "<f8", out_dim * in_dim, pos).reshape(out_dim, in_dim)
            pos += 8 * out_dim * in_dim
            b = np.frombuffer(data, "<f8", out_dim, pos)
            pos += 8 * out_dim
            built.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
        nets[name] = Mlp(built)
    if pos != len(data):
        raise NnError(f"{path}: {len(data) - pos} trailing bytes")
    return nets
