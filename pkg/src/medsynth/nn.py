"""Layer specifications, parameter stores, and checkpoint persistence.

Networks are described as flat lists of :class:`LayerSpec` records and
executed by :func:`run`. Layers write their output under their own name, so a
``concat_skip`` layer can pull in any earlier activation by name. This is
enough for the DCGAN stacks as well as the encoder-decoder networks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointError,
    CorruptCheckpointError,
    DomainError,
    InvalidShapeError,
    InvalidSpecError,
    UnsupportedVersionError,
)
from .rng import make_rng
from .tensor import Tensor

KINDS = ("conv", "conv_transpose", "batch_norm", "activation", "concat_skip",
         "flatten_linear", "dropout")
ACTIVATIONS = ("leaky_relu", "relu", "sigmoid", "tanh", "tanh01")
NETWORK_KINDS = ("stage1-generator", "stage1-discriminator", "stage2-generator",
                 "stage2-discriminator", "unet", "toy")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``in_channels``/``out_channels`` double as in/out features for
    ``flatten_linear``. ``skip`` names the earlier layer whose output a
    ``concat_skip`` appends along the channel axis.
    """

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    fn: str = ""
    alpha: float = 0.2
    skip: str = ""
    rate: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(name, cin, cout, kernel=4, stride=2, padding=1):
    return LayerSpec("conv", name, cin, cout, kernel, stride, padding)


def conv_t(name, cin, cout, kernel=4, stride=2, padding=1):
    return LayerSpec("conv_transpose", name, cin, cout, kernel, stride, padding)


def bn(name, channels):
    return LayerSpec("batch_norm", name, channels, channels)


def act(name, fn, alpha=0.2):
    return LayerSpec("activation", name, fn=fn, alpha=alpha)


def skip(name, source, channels):
    return LayerSpec("concat_skip", name, skip=source, out_channels=channels)


def dense(name, in_features, out_features):
    return LayerSpec("flatten_linear", name, in_features, out_features)


def dropout(name, rate=0.5):
    return LayerSpec("dropout", name, rate=rate)


class ParameterStore:
    """Ordered trainable tensors plus non-trainable buffers for one network.

    ``meta`` holds everything needed to rebuild the forward pass (the layer
    specs live under ``meta["layers"]``) and is persisted with checkpoints.
    """

    def __init__(self, network_kind: str, seed: int, params=None, buffers=None, meta=None):
        if network_kind not in NETWORK_KINDS:
            raise InvalidSpecError(f"unknown network kind {network_kind!r}")
        self.network_kind = network_kind
        self.seed = int(seed)
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.meta: dict = dict(meta or {})

    @property
    def layers(self) -> list[LayerSpec]:
        return [LayerSpec.from_dict(d) for d in self.meta.get("layers", [])]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def n_elements(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            self.network_kind, self.seed,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            json.loads(json.dumps(self.meta)),
        )


def check_channels(layers: list[LayerSpec], in_channels: int) -> None:
    """Channel-level consistency check; raises on the first mismatched layer."""
    channels = in_channels
    produced: dict[str, int] = {}
    for i, layer in enumerate(layers):
        if layer.kind not in KINDS:
            raise InvalidSpecError(f"layer {i} ({layer.name}): unknown kind {layer.kind!r}")
        if layer.name in produced:
            raise InvalidSpecError(f"layer {i} ({layer.name}): duplicate layer name")
        if layer.kind in ("conv", "conv_transpose", "batch_norm", "flatten_linear"):
            if layer.in_channels != channels and layer.kind != "flatten_linear":
                raise InvalidSpecError(
                    f"layer {i} ({layer.name}): expects {layer.in_channels} channels, receives {channels}")
            channels = layer.out_channels
        elif layer.kind == "concat_skip":
            if layer.skip not in produced:
                raise InvalidSpecError(f"layer {i} ({layer.name}): unknown skip source {layer.skip!r}")
            channels = channels + produced[layer.skip]
            if layer.out_channels and layer.out_channels != channels:
                raise InvalidSpecError(
                    f"layer {i} ({layer.name}): declares {layer.out_channels} channels, concat gives {channels}")
        elif layer.kind == "activation" and layer.fn not in ACTIVATIONS:
            raise InvalidSpecError(f"layer {i} ({layer.name}): unknown activation {layer.fn!r}")
        produced[layer.name] = channels


def infer_shapes(layers: list[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Static shape propagation for a single sample of shape (C, H, W).

    Returns one output shape per layer; ``flatten_linear`` yields ``(features,)``.
    """
    shape = tuple(input_shape)
    produced: dict[str, tuple] = {}
    shapes = []
    for i, layer in enumerate(layers):
        where = f"layer {i} ({layer.name})"
        if layer.kind in ("conv", "conv_transpose", "batch_norm", "concat_skip", "dropout") and len(shape) != 3:
            raise InvalidSpecError(f"{where}: needs a (C, H, W) input, got {shape}")
        if layer.kind == "conv":
            c, h, w = shape
            if c != layer.in_channels:
                raise InvalidSpecError(f"{where}: expects {layer.in_channels} channels, receives {c}")
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h + 2 * layer.padding < layer.kernel or ho <= 0 or wo <= 0:
                raise InvalidSpecError(f"{where}: input {h}x{w} too small for kernel {layer.kernel}")
            shape = (layer.out_channels, ho, wo)
        elif layer.kind == "conv_transpose":
            c, h, w = shape
            if c != layer.in_channels:
                raise InvalidSpecError(f"{where}: expects {layer.in_channels} channels, receives {c}")
            ho = (h - 1) * layer.stride - 2 * layer.padding + layer.kernel
            wo = (w - 1) * layer.stride - 2 * layer.padding + layer.kernel
            if ho <= 0 or wo <= 0:
                raise InvalidSpecError(f"{where}: empty output")
            shape = (layer.out_channels, ho, wo)
        elif layer.kind == "batch_norm":
            if shape[0] != layer.in_channels:
                raise InvalidSpecError(f"{where}: expects {layer.in_channels} channels, receives {shape[0]}")
        elif layer.kind == "concat_skip":
            src = produced.get(layer.skip)
            if src is None:
                raise InvalidSpecError(f"{where}: unknown skip source {layer.skip!r}")
            if src[1:] != shape[1:]:
                raise InvalidSpecError(f"{where}: spatial mismatch {shape} vs skip {src}")
            shape = (shape[0] + src[0],) + shape[1:]
            if layer.out_channels and layer.out_channels != shape[0]:
                raise InvalidSpecError(f"{where}: declares {layer.out_channels} channels, concat gives {shape[0]}")
        elif layer.kind == "flatten_linear":
            n = int(np.prod(shape))
            if n != layer.in_channels:
                raise InvalidSpecError(f"{where}: expects {layer.in_channels} features, receives {n}")
            shape = (layer.out_channels,)
        elif layer.kind == "activation":
            if layer.fn not in ACTIVATIONS:
                raise InvalidSpecError(f"{where}: unknown activation {layer.fn!r}")
        elif layer.kind not in KINDS:
            raise InvalidSpecError(f"{where}: unknown kind {layer.kind!r}")
        produced[layer.name] = shape
        shapes.append(shape)
    return shapes


def init_params(layers: list[LayerSpec], seed: int, network_kind: str = "toy",
                in_channels: int | None = None, std: float = INIT_STD, meta=None) -> ParameterStore:
    """Weights ~ Normal(0, std), biases 0, batch-norm scale 1 and shift 0."""
    layers = list(layers)
    if layers:
        first = next((l for l in layers if l.kind in ("conv", "conv_transpose", "batch_norm")), None)
        check_channels(layers, in_channels if in_channels is not None else (first.in_channels if first else 0))
    rng = make_rng(seed)
    params, buffers = {}, {}
    for layer in layers:
        n = layer.name
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        elif layer.kind == "conv_transpose":
            shape = (layer.in_channels, layer.out_channels, layer.kernel, layer.kernel)
        elif layer.kind == "flatten_linear":
            shape = (layer.out_channels, layer.in_channels)
        elif layer.kind == "batch_norm":
            params[f"{n}.gamma"] = Tensor(np.ones(layer.in_channels), requires_grad=True)
            params[f"{n}.beta"] = Tensor(np.zeros(layer.in_channels), requires_grad=True)
            buffers[f"{n}.running_mean"] = np.zeros(layer.in_channels)
            buffers[f"{n}.running_var"] = np.ones(layer.in_channels)
            continue
        else:
            continue
        params[f"{n}.weight"] = Tensor(rng.standard_normal(shape) * std, requires_grad=True)
        params[f"{n}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
    meta = dict(meta or {})
    meta["layers"] = [l.to_dict() for l in layers]
    return ParameterStore(network_kind, seed, params, buffers, meta)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of (B, C, H, W).

    Train mode normalizes with biased batch statistics and updates the running
    buffers in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = T.as_tensor(x), T.as_tensor(gamma), T.as_tensor(beta)
    if x.ndim != 4:
        raise InvalidShapeError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(f"batch_norm affine params must have shape ({c},)")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if train:
        if n < 2:
            raise DomainError("batch_norm in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if train:
            gx = (inv_std[None, :, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return T._result(out, (x, gamma, beta), backward, "batch_norm")


def concat_skip(decoder_features, encoder_features) -> Tensor:
    a, b = T.as_tensor(decoder_features), T.as_tensor(encoder_features)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise InvalidShapeError(f"concat_skip: {a.shape} and {b.shape} differ in batch or spatial size")
    return T.concat([a, b], axis=1)


def _activation(x: Tensor, layer: LayerSpec) -> Tensor:
    fn = layer.fn
    if fn == "leaky_relu":
        return T.leaky_relu(x, layer.alpha)
    if fn == "relu":
        return T.relu(x)
    if fn == "sigmoid":
        return T.sigmoid(x)
    if fn == "tanh":
        return T.tanh(x)
    if fn == "tanh01":
        return (T.tanh(x) + 1.0) * 0.5
    raise InvalidSpecError(f"unknown activation {fn!r}")


def run(store: ParameterStore, x, train: bool = True, rng: np.random.Generator | None = None,
        layers: list[LayerSpec] | None = None) -> Tensor:
    """Execute ``store``'s layer list on ``x``.

    Dropout layers are active only when ``rng`` is given; with ``rng=None``
    the network is a deterministic function of its input.
    """
    layers = store.layers if layers is None else layers
    p = store.params
    outputs: dict[str, Tensor] = {}
    h = T.as_tensor(x)
    for layer in layers:
        n = layer.name
        if layer.kind == "conv":
            h = T.conv2d(h, p[f"{n}.weight"], p[f"{n}.bias"], layer.stride, layer.padding)
        elif layer.kind == "conv_transpose":
            h = T.conv_transpose2d(h, p[f"{n}.weight"], p[f"{n}.bias"], layer.stride, layer.padding)
        elif layer.kind == "batch_norm":
            h = batch_norm(h, p[f"{n}.gamma"], p[f"{n}.beta"], store.buffers[f"{n}.running_mean"],
                           store.buffers[f"{n}.running_var"], train=train)
        elif layer.kind == "activation":
            h = _activation(h, layer)
        elif layer.kind == "concat_skip":
            h = concat_skip(h, outputs[layer.skip])
        elif layer.kind == "flatten_linear":
            h = T.linear(T.reshape(h, (h.shape[0], -1)), p[f"{n}.weight"], p[f"{n}.bias"])
        elif layer.kind == "dropout":
            if rng is not None and layer.rate > 0:
                keep = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                h = h * keep
        else:
            raise InvalidSpecError(f"unknown layer kind {layer.kind!r}")
        outputs[n] = h
    return h


# -- checkpoints ------------------------------------------------------------------
#
# Layout (all little-endian):
#   4 bytes   magic b"MSCK"
#   4 bytes   uint32 header length L
#   L bytes   UTF-8 JSON header (sorted keys): format_version, network_kind,
#             seed, meta, arrays=[{name, group, shape, dtype, offset, nbytes}]
#   payload   raw '<f8' arrays in header order; offsets are relative to payload start

MAGIC = b"MSCK"
FORMAT_VERSION = 1


def checkpoint_bytes(store: ParameterStore) -> bytes:
    entries, chunks, offset = [], [], 0
    items = [("param", k, v.data) for k, v in store.params.items()]
    items += [("buffer", k, v) for k, v in store.buffers.items()]
    for group, name, arr in items:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "network_kind": store.network_kind,
              "seed": store.seed, "meta": store.meta, "arrays": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def save_checkpoint(store: ParameterStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


def checkpoint_from_bytes(blob: bytes, source: str = "<bytes>") -> ParameterStore:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"{source}: not a checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise CorruptCheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: format_version {version!r}, this build reads {FORMAT_VERSION}")
    payload = blob[8 + hlen:]
    expected = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{source}: payload is {len(payload)} bytes, header declares {expected}")
    params, buffers = {}, {}
    for e in header["arrays"]:
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        if e["group"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True)
        else:
            buffers[e["name"]] = arr
    return ParameterStore(header["network_kind"], header["seed"], params, buffers, header["meta"])


def load_checkpoint(path) -> ParameterStore:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(blob, str(path))
