"""Reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation builds a node holding its parents and a
closure mapping the output gradient to parent gradients. ``backward``
orders the graph topologically from the loss and accumulates gradients
into leaf tensors created with ``requires_grad=True``.

Layout convention for images is N x C x H x W. Tensors have rank <= 4 and
binary ops only broadcast against python scalars.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4

_debug = bool(os.environ.get("BANDBRIDGE_DEBUG"))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised when backward cannot run on the given tensor."""


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check applied to every op output."""
    global _debug
    _debug = bool(flag)


def _mismatch(op: str, a: tuple, b: tuple) -> ShapeError:
    n = max(len(a), len(b))
    bad = [i for i in range(n) if i >= len(a) or i >= len(b) or a[i] != b[i]]
    return ShapeError(f"{op}: shape mismatch {a} vs {b} on axes {bad}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if data.ndim > MAX_RANK:
        raise ShapeError(f"{op}: result rank {data.ndim} exceeds {MAX_RANK}")
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph traversal


def tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add to whatever ``.grad`` already holds; call ``zero_grad``
    between optimizer steps.
    """
    if loss.size != 1 or loss.ndim not in (0, 1):
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not connected to any tensor that requires grad (empty tape)")
    order = tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + np.asarray(c, a.dtype), (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape:
        raise _mismatch("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise _mismatch("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = np.asarray(float(b), a.dtype)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape != b.shape:
        raise _mismatch("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _make(out, (x,), grad_fn, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise _mismatch("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, "concat")


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)
    else:
        out = out.copy()

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, (x,), grad_fn, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def sum_(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype), (x,), lambda g: (np.full(shape, g, dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    return _make(np.asarray(x.data.mean(), dtype), (x,), lambda g: (np.full(shape, g / n, dtype),), "mean")


def _check_image(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    _check_image("max_pool2d", x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial dims {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), grad_fn, "max_pool2d")


def nearest_upsample2x(x: Tensor) -> Tensor:
    _check_image("nearest_upsample2x", x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "nearest_upsample2x")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes must match."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` (channels for N x C x H x W) with optional per-channel affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = c
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (c,):
            raise _mismatch(f"layer_norm {name}", (c,), t.shape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def grad_fn(g):
        gx_hat = g * gd if gd is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return _make(out.astype(x.dtype, copy=False), parents, grad_fn, "layer_norm")


def _win_split(a: np.ndarray, ws: int) -> np.ndarray:
    n, c, h, w = a.shape
    nh, nw = h // ws, w // ws
    return a.reshape(n, c, nh, ws, nw, ws).transpose(0, 2, 4, 3, 5, 1).reshape(n * nh * nw, ws * ws, c)


def _win_merge(a: np.ndarray, n: int, h: int, w: int, ws: int) -> np.ndarray:
    c = a.shape[-1]
    nh, nw = h // ws, w // ws
    return a.reshape(n, nh, nw, ws, ws, c).transpose(0, 5, 1, 3, 2, 4).reshape(n, c, h, w)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """N x C x H x W -> (N * windows) x (ws * ws) x C, windows in row-major order."""
    _check_image("window_partition", x)
    n, c, h, w = x.shape
    if h % ws or w % ws:
        raise ShapeError(f"window_partition: spatial dims {(h, w)} not divisible by window {ws}")
    out = np.ascontiguousarray(_win_split(x.data, ws))
    return _make(out, (x,), lambda g: (_win_merge(g, n, h, w, ws),), "window_partition")


def window_merge(x: Tensor, n: int, h: int, w: int, ws: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if x.ndim != 3 or x.shape[0] != n * (h // ws) * (w // ws) or x.shape[1] != ws * ws:
        raise ShapeError(f"window_merge: shape {x.shape} incompatible with {(n, h, w)} / window {ws}")
    out = np.ascontiguousarray(_win_merge(x.data, n, h, w, ws))
    return _make(out, (x,), lambda g: (_win_split(g, ws),), "window_merge")


# ---------------------------------------------------------------------------
# convolution


def pad2d(x: Tensor, padding: int, mode: str = "zeros") -> Tensor:
    _check_image("pad2d", x)
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if padding == 0:
        return x
    p = padding
    n, c, h, w = x.shape
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        return _make(out, (x,), lambda g: (g[:, :, p:-p, p:-p],), "pad2d")
    if mode == "circular":
        out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
        rows = (np.arange(h + 2 * p) - p) % h
        cols = (np.arange(w + 2 * p) - p) % w

        def grad_fn(g):
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            gr = np.zeros((n, c, h, w + 2 * p), dtype=g.dtype)
            np.add.at(gr, (slice(None), slice(None), rows), g)
            np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
            return (gx,)

        return _make(out, (x,), grad_fn, "pad2d_circular")
    raise ValueError(f"unknown padding mode {mode!r}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    dx = np.zeros(shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[:, :, i, j]
    return dx


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation, N x Cin x H x W with Cout x Cin x k x k weights."""
    _check_image("conv2d", x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x k x k, got {weight.shape}")
    cout, cin, k, k2 = weight.shape
    bad = []
    if x.shape[1] != cin:
        bad.append(f"input channels {x.shape[1]} != weight Cin {cin} (axis 1)")
    if k != k2:
        bad.append(f"non-square kernel {k}x{k2} (weight axes 2,3)")
    if k % 2 == 0:
        bad.append(f"kernel size {k} is even (weight axis 2)")
    if bias is not None and bias.shape != (cout,):
        bad.append(f"bias shape {bias.shape} != ({cout},)")
    if bad:
        raise ShapeError("conv2d: " + "; ".join(bad))
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    xp_t = pad2d(x, padding, padding_mode)
    n, _, hp, wp = xp_t.shape
    if (hp - k) % stride or hp < k or wp < k or (wp - k) % stride:
        raise ShapeError(f"conv2d: padded size {(hp, wp)} incompatible with kernel {k} and stride {stride} (axes 2,3)")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = xp_t.data
    if k == 1 and stride == 1:
        cols = xp.reshape(n, cin, ho * wo)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    xshape = xp.shape

    def grad_fn(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if xp_t.requires_grad:
            dcols = np.matmul(wm.T, g3)
            if k == 1 and stride == 1:
                gx = dcols.reshape(xshape)
            else:
                gx = _col2im(dcols, xshape, k, stride, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    parents = [xp_t, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# loss


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at a zero difference is 0."""
    target = _wrap(target)
    if target.requires_grad:
        raise ValueError("l1_loss: target must not require grad")
    if pred.shape != target.shape:
        raise _mismatch("l1_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    dtype = pred.dtype

    def grad_fn(g):
        return (np.sign(diff) * (g / n),)

    return _make(np.asarray(np.abs(diff).mean(), dtype), (pred,), grad_fn, "l1_loss")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, p: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(p.data), np.zeros_like(p.data), **hyper)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState]) -> None:
    """One bias-corrected Adam update, in place on ``param.data``."""
    if len(params) != len(states):
        raise ValueError(f"{len(params)} parameters but {len(states)} optimizer states")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient")
    for p, s in zip(params, states):
        g = p.grad
        s.t += 1
        s.m *= s.beta1
        s.m += (1.0 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1.0 - s.beta2) * (g * g)
        m_hat = s.m / (1.0 - s.beta1**s.t)
        v_hat = s.v / (1.0 - s.beta2**s.t)
        p.data -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype, copy=False)


@dataclass
class Adam:
    """Convenience wrapper pairing a parameter list with its states."""

    params: list[Tensor]
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [
                AdamState.for_param(p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
                for p in self.params
            ]

    def step(self) -> None:
        adam_step(self.params, self.states)

    def zero_grad(self) -> None:
        zero_grad(self.params)
