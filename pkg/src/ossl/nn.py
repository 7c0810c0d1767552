"""Model construction: shared backbone plus semantic / rotation / auxiliary
heads, partitioned into four disjoint parameter groups.

Backbones:
  * lenet5      -- conv(6,5x5) relu pool conv(16,5x5) relu pool fc120 relu fc84 relu
  * densenet40  -- growth 12, 3 dense blocks x 12 layers, affine scaling in
                   place of batch norm, global average pool (448-dim feature)
  * tiny_cnn    -- 2 small convs + fc32, for fast desk-scale runs

Heads are single linear layers on the backbone feature vector unless
``head_hidden`` inserts one hidden relu layer.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ParamGroup",
    "MultiHeadModel",
    "ModelError",
    "build_model",
    "forward_features",
    "forward_head",
    "snapshot_params",
    "restore_params",
    "params_equal",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "GROUP_NAMES",
    "HEAD_NAMES",
]

GROUP_NAMES = ("backbone", "semantic_head", "rotation_head", "auxiliary_head")
HEAD_NAMES = ("semantic", "rotation", "auxiliary")

_BACKBONES = ("lenet5", "densenet40", "tiny_cnn")
_DTYPES = {"f32": np.float32, "f64": np.float64}


class ModelError(ValueError):
    """Unsupported configuration or mismatched model input."""


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


@dataclass(frozen=True)
class ModelConfig:
    backbone_kind: str
    num_classes: int
    init_seed: int
    input_spec: Optional[tuple] = None      # (channels, H, W); default per backbone
    head_hidden: Optional[int] = None
    dtype: str = "f32"

    def __post_init__(self):
        if self.backbone_kind not in _BACKBONES:
            raise ModelError(f"unknown backbone_kind {self.backbone_kind!r}")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.dtype not in _DTYPES:
            raise ModelError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.input_spec is None:
            object.__setattr__(self, "input_spec", _default_input_spec(self.backbone_kind))
        else:
            object.__setattr__(self, "input_spec", tuple(int(v) for v in self.input_spec))

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


def _default_input_spec(kind: str) -> tuple:
    return {"lenet5": (1, 28, 28), "densenet40": (3, 32, 32),
            "tiny_cnn": (1, 8, 8)}[kind]


@dataclass
class ParamGroup:
    name: str
    params: list
    frozen: bool = False

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# layers

class Conv:
    def __init__(self, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        self.kernel = kernel
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def params(self):
        return [self.kernel, self.bias]

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class ChannelAffine:
    def __init__(self, scale: Tensor, bias: Tensor):
        self.scale = scale
        self.bias = bias

    def params(self):
        return [self.scale, self.bias]

    def __call__(self, x):
        return T.channel_affine(x, self.scale, self.bias)


class Relu:
    def params(self):
        return []

    def __call__(self, x):
        return T.relu(x)


class MaxPool2:
    def params(self):
        return []

    def __call__(self, x):
        return T.maxpool2(x)


class AvgPool2:
    def params(self):
        return []

    def __call__(self, x):
        return T.avgpool2(x)


class GlobalAvgPool:
    def params(self):
        return []

    def __call__(self, x):
        return T.global_avg_pool(x)


class Flatten:
    def params(self):
        return []

    def __call__(self, x):
        return T.flatten(x)


class DenseLayer:
    """affine -> relu -> conv3x3(growth), output concatenated to the input."""

    def __init__(self, affine: ChannelAffine, conv: Conv):
        self.affine = affine
        self.conv = conv

    def params(self):
        return self.affine.params() + self.conv.params()

    def __call__(self, x):
        h = T.relu(self.affine(x))
        return T.concat_channels([x, self.conv(h)])


class Transition:
    """affine -> relu -> conv1x1 -> 2x2 average pool."""

    def __init__(self, affine: ChannelAffine, conv: Conv):
        self.affine = affine
        self.conv = conv

    def params(self):
        return self.affine.params() + self.conv.params()

    def __call__(self, x):
        return T.avgpool2(self.conv(T.relu(self.affine(x))))


@dataclass
class MultiHeadModel:
    config: ModelConfig
    backbone: list
    semantic_head: list
    rotation_head: list
    auxiliary_head: list
    feature_dim: int
    groups: dict = field(default_factory=dict)

    def group(self, name: str) -> ParamGroup:
        return self.groups[name]

    def all_params(self):
        out = []
        for name in GROUP_NAMES:
            out.extend(self.groups[name].params)
        return out

    def zero_grad(self):
        for g in self.groups.values():
            g.zero_grad()


# ---------------------------------------------------------------------------
# construction

class _Init:
    """Fan-in uniform initializer over a counter-based (Philox) stream."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        self.dtype = dtype

    def conv(self, cout, cin, kh, kw, stride=1, padding=0) -> Conv:
        fan_in = cin * kh * kw
        bound = np.sqrt(1.0 / fan_in)
        k = self.rng.uniform(-bound, bound, size=(cout, cin, kh, kw))
        kernel = Tensor(k.astype(self.dtype), requires_grad=True)
        bias = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)
        return Conv(kernel, bias, stride, padding)

    def linear(self, out_dim, in_dim) -> Linear:
        bound = np.sqrt(1.0 / in_dim)
        w = self.rng.uniform(-bound, bound, size=(out_dim, in_dim))
        weight = Tensor(w.astype(self.dtype), requires_grad=True)
        bias = Tensor(np.zeros(out_dim, dtype=self.dtype), requires_grad=True)
        return Linear(weight, bias)

    def affine(self, channels) -> ChannelAffine:
        scale = Tensor(np.ones(channels, dtype=self.dtype), requires_grad=True)
        bias = Tensor(np.zeros(channels, dtype=self.dtype), requires_grad=True)
        return ChannelAffine(scale, bias)


def _build_lenet5(init: _Init, spec: tuple):
    cin, h, w = spec
    if (cin, h, w) not in ((1, 28, 28), (3, 32, 32)):
        raise ModelError(f"lenet5 supports 1x28x28 or 3x32x32 input, got {spec}")
    # 3x32x32 variant: same layer stack, first conv adapted to 3 channels;
    # 32x32 -> conv5 -> 28 -> pool -> 14 -> conv5 -> 10 -> pool -> 5 (odd),
    # so pad the second conv to keep pooling legal.
    pad2 = 1 if (h, w) == (32, 32) else 0
    layers = [init.conv(6, cin, 5, 5), Relu(), MaxPool2(),
              init.conv(16, 6, 5, 5, padding=pad2), Relu(), MaxPool2(),
              Flatten()]
    side = (h - 4) // 2
    side = (side - 4 + 2 * pad2) // 2
    layers += [init.linear(120, 16 * side * side), Relu(),
               init.linear(84, 120), Relu()]
    return layers, 84


def _build_tiny_cnn(init: _Init, spec: tuple):
    cin, h, w = spec
    if h % 4 or w % 4:
        raise ModelError(f"tiny_cnn needs spatial extents divisible by 4, got {spec}")
    layers = [init.conv(8, cin, 3, 3, padding=1), Relu(), MaxPool2(),
              init.conv(16, 8, 3, 3, padding=1), Relu(), MaxPool2(),
              Flatten(),
              init.linear(32, 16 * (h // 4) * (w // 4)), Relu()]
    return layers, 32


def _build_densenet40(init: _Init, spec: tuple, growth: int = 12,
                      layers_per_block: int = 12):
    cin, h, w = spec
    if (cin, h, w) != (3, 32, 32):
        raise ModelError(f"densenet40 expects 3x32x32 input, got {spec}")
    layers = [init.conv(16, cin, 3, 3, padding=1)]
    channels = 16
    for block in range(3):
        for _ in range(layers_per_block):
            conv = init.conv(growth, channels, 3, 3, padding=1)
            layers.append(DenseLayer(init.affine(channels), conv))
            channels += growth
        if block < 2:
            layers.append(Transition(init.affine(channels),
                                     init.conv(channels, channels, 1, 1)))
    layers += [init.affine(channels), Relu(), GlobalAvgPool()]
    # final affine + relu before pooling mirrors the usual pre-pool norm
    return layers, channels


def _build_head(init: _Init, in_dim: int, out_dim: int, hidden: Optional[int]):
    if hidden is None:
        return [init.linear(out_dim, in_dim)]
    return [init.linear(hidden, in_dim), Relu(), init.linear(out_dim, hidden)]


def build_model(cfg: ModelConfig) -> MultiHeadModel:
    """Deterministically construct the multi-head model from its config."""
    init = _Init(cfg.init_seed, cfg.np_dtype)
    if cfg.backbone_kind == "lenet5":
        backbone, feat = _build_lenet5(init, cfg.input_spec)
    elif cfg.backbone_kind == "densenet40":
        backbone, feat = _build_densenet40(init, cfg.input_spec)
    else:
        backbone, feat = _build_tiny_cnn(init, cfg.input_spec)

    c = cfg.num_classes
    semantic = _build_head(init, feat, c, cfg.head_hidden)
    rotation = _build_head(init, feat, 4, cfg.head_hidden)
    auxiliary = _build_head(init, feat, c, cfg.head_hidden)

    def collect(layer_list):
        out = []
        for layer in layer_list:
            out.extend(layer.params())
        return out

    groups = {
        "backbone": ParamGroup("backbone", collect(backbone)),
        "semantic_head": ParamGroup("semantic_head", collect(semantic)),
        "rotation_head": ParamGroup("rotation_head", collect(rotation)),
        "auxiliary_head": ParamGroup("auxiliary_head", collect(auxiliary)),
    }
    return MultiHeadModel(cfg, backbone, semantic, rotation, auxiliary, feat, groups)


# ---------------------------------------------------------------------------
# forward

def forward_features(model: MultiHeadModel, x: Tensor) -> Tensor:
    cin, h, w = model.config.input_spec
    if x.data.ndim != 4 or x.shape[1:] != (cin, h, w):
        raise ModelError(
            f"input shape {x.shape} does not match model input spec {model.config.input_spec}")
    out = x
    for layer in model.backbone:
        out = layer(out)
    return out


_HEAD_ATTR = {"semantic": "semantic_head", "rotation": "rotation_head",
              "auxiliary": "auxiliary_head"}


def forward_head(model: MultiHeadModel, features: Tensor, head: str) -> Tensor:
    if head not in _HEAD_ATTR:
        raise ModelError(f"unknown head {head!r}; expected one of {HEAD_NAMES}")
    if features.data.ndim != 2 or features.shape[1] != model.feature_dim:
        raise ModelError(
            f"feature shape {features.shape} does not match head input width "
            f"{model.feature_dim}")
    out = features
    for layer in getattr(model, _HEAD_ATTR[head]):
        out = layer(out)
    return out


# ---------------------------------------------------------------------------
# snapshots

def snapshot_params(group: ParamGroup) -> list:
    return [p.data.copy() for p in group.params]


def restore_params(group: ParamGroup, snapshot: list) -> None:
    if len(snapshot) != len(group.params):
        raise ModelError(
            f"snapshot has {len(snapshot)} tensors, group {group.name} has "
            f"{len(group.params)}")
    for p, arr in zip(group.params, snapshot):
        if p.data.shape != arr.shape:
            raise ModelError(
                f"snapshot shape {arr.shape} != parameter shape {p.data.shape}")
        p.data = arr.copy()


def params_equal(group: ParamGroup, snapshot: list) -> bool:
    if len(snapshot) != len(group.params):
        return False
    return all(p.data.shape == arr.shape and
               p.data.tobytes() == arr.astype(p.data.dtype).tobytes()
               for p, arr in zip(group.params, snapshot))


# ---------------------------------------------------------------------------
# checkpoint container:
#   magic "OSSL", u16 version, config block, then per-group tensor blobs
#   (name, shape, little-endian f32 data).  All integers little-endian.

_CKPT_MAGIC = b"OSSL"
_CKPT_VERSION = 1


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(raw)}")
    return raw


def save_checkpoint(model: MultiHeadModel, path) -> None:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<H", _CKPT_VERSION))
    _write_str(buf, cfg.backbone_kind)
    buf.write(struct.pack("<IQ", cfg.num_classes, cfg.init_seed & 0xFFFFFFFFFFFFFFFF))
    buf.write(struct.pack("<III", *cfg.input_spec))
    buf.write(struct.pack("<I", cfg.head_hidden or 0))
    for name in GROUP_NAMES:
        group = model.groups[name]
        _write_str(buf, name)
        buf.write(struct.pack("<I", len(group.params)))
        for p in group.params:
            buf.write(struct.pack("<I", p.data.ndim))
            buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> MultiHeadModel:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = _read_exact(buf, 4)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {_CKPT_MAGIC!r}")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = _read_str(buf)
    num_classes, seed = struct.unpack("<IQ", _read_exact(buf, 12))
    input_spec = struct.unpack("<III", _read_exact(buf, 12))
    (hidden,) = struct.unpack("<I", _read_exact(buf, 4))
    cfg = ModelConfig(backbone_kind=kind, num_classes=num_classes,
                      init_seed=seed, input_spec=input_spec,
                      head_hidden=hidden or None, dtype="f32")
    model = build_model(cfg)
    for name in GROUP_NAMES:
        stored = _read_str(buf)
        if stored != name:
            raise CheckpointError(f"group {stored!r} out of order, expected {name!r}")
        (count,) = struct.unpack("<I", _read_exact(buf, 4))
        group = model.groups[name]
        if count != len(group.params):
            raise CheckpointError(
                f"group {name} has {count} stored tensors, model expects "
                f"{len(group.params)}")
        for p in group.params:
            (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
            if shape != p.data.shape:
                raise CheckpointError(
                    f"stored shape {shape} != model parameter shape {p.data.shape}")
            n = int(np.prod(shape)) if shape else 1
            raw = _read_exact(buf, 4 * n)
            p.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise CheckpointError("trailing bytes after final parameter blob")
    return model
