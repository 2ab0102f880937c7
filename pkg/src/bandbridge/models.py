"""UNet and ESRT-lite harmonization networks plus the bicubic passthrough.

Both networks map an N x 7 x H x W stack (six upsampled bands + pan) to
N x 6 x H x W and add a learned residual to the six input bands. The
residual head starts at zero, so an untrained network reproduces the
bicubic baseline exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import rng
from .autograd import Tensor

KINDS = ("unet", "esrt_lite", "bicubic_passthrough")


class ModelSpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "unet"
    in_channels: int = 7
    out_channels: int = 6
    unet_depth: int = 3
    unet_base: int = 32
    esrt_backbone_blocks: int = 2
    esrt_transformer_blocks: int = 2
    esrt_embed: int = 32
    esrt_heads: int = 4
    esrt_window: int = 8
    esrt_split: int = 2
    seed: int = 0

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise ModelSpecError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if (self.in_channels, self.out_channels) != (7, 6):
            raise ModelSpecError("models map 7 input channels to 6 output bands")
        counts = {f.name: getattr(self, f.name) for f in fields(self) if f.name.startswith(("unet_", "esrt_"))}
        low = [k for k, v in counts.items() if int(v) < 1]
        if low:
            raise ModelSpecError(f"counts must be >= 1: {low}")
        if self.kind == "esrt_lite":
            if self.esrt_embed % self.esrt_heads:
                raise ModelSpecError(f"heads={self.esrt_heads} does not divide embed_channels={self.esrt_embed}")
            if self.esrt_embed % self.esrt_split:
                raise ModelSpecError(f"split factor {self.esrt_split} does not divide embed_channels={self.esrt_embed}")
            if (self.esrt_embed // self.esrt_split) % self.esrt_heads:
                raise ModelSpecError("heads must divide the reduced attention width embed_channels / split")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelSpecError(f"unknown ModelSpec fields {sorted(extra)}")
        return cls(**d)


class ParameterSet:
    """Named parameters in build order, with the initializer used for each."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.tensors: dict[str, Tensor] = {}
        self.init: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, how: str) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(value, requires_grad=True)
        self.init[name] = how

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def params(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet(self.spec)
        for k, t in self.tensors.items():
            out.add(k, t.data.astype(dtype), self.init[k])
        return out

    def copy(self) -> "ParameterSet":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        for t in self.tensors.values():
            return t.dtype
        return np.dtype(np.float32)


# ---------------------------------------------------------------------------
# construction


class _Builder:
    def __init__(self, spec: ModelSpec, dtype):
        self.ps = ParameterSet(spec)
        self.gen = rng.generator(spec.seed, rng.INIT)
        self.dtype = dtype

    def conv(self, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
        if zero:
            w = np.zeros((cout, cin, k, k))
            how = "zeros"
        else:
            bound = math.sqrt(6.0 / (cin * k * k))
            w = self.gen.uniform(-bound, bound, size=(cout, cin, k, k))
            how = "kaiming_uniform"
        self.ps.add(f"{name}.weight", w.astype(self.dtype), how)
        self.ps.add(f"{name}.bias", np.zeros(cout, dtype=self.dtype), "zeros")

    def norm(self, name: str, c: int) -> None:
        self.ps.add(f"{name}.gamma", np.ones(c, dtype=self.dtype), "ones")
        self.ps.add(f"{name}.beta", np.zeros(c, dtype=self.dtype), "zeros")


def build(spec: ModelSpec, dtype=np.float32) -> ParameterSet:
    """Deterministically initialized parameters for ``spec``.

    Weights are drawn in float64 and cast, so float32 and float64 builds
    of the same spec agree up to rounding.
    """
    spec.validate()
    b = _Builder(spec, dtype)
    if spec.kind == "unet":
        _build_unet(b, spec)
    elif spec.kind == "esrt_lite":
        _build_esrt(b, spec)
    return b.ps


def _build_unet(b: _Builder, spec: ModelSpec) -> None:
    base, depth = spec.unet_base, spec.unet_depth
    cin = spec.in_channels
    for i in range(depth):
        c = base * 2**i
        b.conv(f"enc{i}.conv1", cin, c, 3)
        b.conv(f"enc{i}.conv2", c, c, 3)
        cin = c
    c = base * 2**depth
    b.conv("mid.conv1", cin, c, 3)
    b.conv("mid.conv2", c, c, 3)
    for i in reversed(range(depth)):
        c = base * 2**i
        b.conv(f"dec{i}.up", 2 * c, c, 1)
        b.conv(f"dec{i}.conv1", 2 * c, c, 3)
        b.conv(f"dec{i}.conv2", c, c, 3)
    b.conv("head", base, spec.out_channels, 1, zero=True)


def _build_esrt(b: _Builder, spec: ModelSpec) -> None:
    c = spec.esrt_embed
    r = c // spec.esrt_split
    b.conv("embed", spec.in_channels, c, 3)
    for i in range(spec.esrt_backbone_blocks):
        b.conv(f"backbone{i}.conv1", c, c, 3)
        b.conv(f"backbone{i}.conv2", c, c, 3)
    for i in range(spec.esrt_transformer_blocks):
        b.norm(f"trans{i}.norm1", c)
        b.conv(f"trans{i}.reduce", c, r, 1)
        b.conv(f"trans{i}.qkv", r, 3 * r, 1)
        b.conv(f"trans{i}.expand", r, c, 1)
        b.norm(f"trans{i}.norm2", c)
        b.conv(f"trans{i}.mlp1", c, 2 * c, 1)
        b.conv(f"trans{i}.mlp2", 2 * c, c, 1)
    b.conv("body", c, c, 3)
    b.conv("head", c, spec.out_channels, 3, zero=True)


# ---------------------------------------------------------------------------
# forward passes


def _conv(ps: ParameterSet, name: str, x: Tensor, mode: str) -> Tensor:
    w = ps[f"{name}.weight"]
    pad = w.shape[-1] // 2
    return ag.conv2d(x, w, ps[f"{name}.bias"], padding=pad, padding_mode=mode)


def _check_input(x: Tensor, spec: ModelSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ag.ShapeError(f"expected N x {spec.in_channels} x H x W input, got {x.shape}")


def _residual(x: Tensor, delta: Tensor, out_channels: int) -> Tensor:
    return x[:, :out_channels] + delta


def unet_forward(ps: ParameterSet, x: Tensor, padding_mode: str = "zeros") -> Tensor:
    spec = ps.spec
    _check_input(x, spec)
    depth = spec.unet_depth
    h, w = x.shape[2:]
    if h % 2**depth or w % 2**depth:
        raise ag.ShapeError(f"UNet depth {depth} needs H, W divisible by {2**depth}; got {(h, w)}")
    skips = []
    y = x
    for i in range(depth):
        y = ag.relu(_conv(ps, f"enc{i}.conv1", y, padding_mode))
        y = ag.relu(_conv(ps, f"enc{i}.conv2", y, padding_mode))
        skips.append(y)
        y = ag.max_pool2d(y, 2)
    y = ag.relu(_conv(ps, "mid.conv1", y, padding_mode))
    y = ag.relu(_conv(ps, "mid.conv2", y, padding_mode))
    for i in reversed(range(depth)):
        y = _conv(ps, f"dec{i}.up", ag.nearest_upsample2x(y), padding_mode)
        y = ag.concat([skips[i], y], axis=1)
        y = ag.relu(_conv(ps, f"dec{i}.conv1", y, padding_mode))
        y = ag.relu(_conv(ps, f"dec{i}.conv2", y, padding_mode))
    return _residual(x, _conv(ps, "head", y, padding_mode), spec.out_channels)


def window_attention(ps: ParameterSet, name: str, y: Tensor, heads: int, ws: int, trace: dict | None = None) -> Tensor:
    """Multi-head self-attention inside non-overlapping ws x ws windows.

    Queries, keys and values live in the reduced channel space produced by
    ``{name}.reduce``; ``{name}.expand`` maps the result back.
    """
    n, _, h, w = y.shape
    red = _conv(ps, f"{name}.reduce", y, "zeros")
    r = red.shape[1]
    d = r // heads
    qkv = ag.window_partition(_conv(ps, f"{name}.qkv", red, "zeros"), ws)
    b, length = qkv.shape[:2]

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, heads, d).transpose(0, 2, 1, 3)

    q = split_heads(qkv[:, :, :r])
    k = split_heads(qkv[:, :, r : 2 * r])
    v = split_heads(qkv[:, :, 2 * r :])
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    attn = ag.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, length, r)
    out = ag.window_merge(out, n, h, w, ws)
    return _conv(ps, f"{name}.expand", out, "zeros")


def esrt_forward(ps: ParameterSet, x: Tensor, padding_mode: str = "zeros", trace: dict | None = None) -> Tensor:
    spec = ps.spec
    _check_input(x, spec)
    ws = spec.esrt_window
    h, w = x.shape[2:]
    if h % ws or w % ws:
        raise ag.ShapeError(f"ESRT window {ws} must divide H, W; got {(h, w)}")
    feat = _conv(ps, "embed", x, padding_mode)
    y = feat
    for i in range(spec.esrt_backbone_blocks):
        z = ag.relu(_conv(ps, f"backbone{i}.conv1", y, padding_mode))
        y = y + _conv(ps, f"backbone{i}.conv2", z, padding_mode)
    for i in range(spec.esrt_transformer_blocks):
        p = f"trans{i}"
        z = ag.layer_norm(y, ps[f"{p}.norm1.gamma"], ps[f"{p}.norm1.beta"], axis=1)
        y = y + window_attention(ps, p, z, spec.esrt_heads, ws, trace)
        z = ag.layer_norm(y, ps[f"{p}.norm2.gamma"], ps[f"{p}.norm2.beta"], axis=1)
        z = ag.gelu(_conv(ps, f"{p}.mlp1", z, "zeros"))
        y = y + _conv(ps, f"{p}.mlp2", z, "zeros")
    y = _conv(ps, "body", y, padding_mode) + feat
    return _residual(x, _conv(ps, "head", y, padding_mode), spec.out_channels)


def bicubic_passthrough(x) -> Tensor:
    """The input's first six channels, which already hold the upsampled bands."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x[:, :6]


def forward(ps: ParameterSet, x: Tensor, **kw) -> Tensor:
    kind = ps.spec.kind
    if kind == "unet":
        return unet_forward(ps, x, **kw)
    if kind == "esrt_lite":
        return esrt_forward(ps, x, **kw)
    return bicubic_passthrough(x)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"BBC1"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def save_checkpoint(ps: ParameterSet, path, epoch: int = 0) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, t in ps.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "init": ps.init[name]})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": ps.spec.to_dict(), "epoch": int(epoch), "params": manifest}, sort_keys=True).encode()
    Path(path).write_bytes(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs))


def load_checkpoint(path) -> tuple[ParameterSet, int]:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _CKPT_HEAD.size + hlen
    try:
        header = json.loads(buf[_CKPT_HEAD.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    ps = ParameterSet(ModelSpec.from_dict(header["spec"]).validate())
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        off = start + entry["offset"]
        if off + 4 * count > len(buf):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(entry["shape"]).astype(np.float32)
        ps.add(entry["name"], arr, entry.get("init", "loaded"))
    return ps, int(header["epoch"])
