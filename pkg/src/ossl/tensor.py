"""Dense tensors with reverse-mode automatic differentiation.

A global tape records every tracked operation in creation order, which is
also a valid topological order.  ``backward`` replays the tape in reverse
and accumulates gradients into the leaf tensors that asked for them.
Forward activations needed by an op's backward rule are captured in the
op's closure, so resetting the tape frees them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradError",
    "tensor",
    "reset_tape",
    "active_tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "reshape",
    "flatten",
    "relu",
    "linear",
    "conv2d",
    "maxpool2",
    "avgpool2",
    "global_avg_pool",
    "channel_affine",
    "concat_channels",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class GradError(RuntimeError):
    """Raised on tape misuse (non-scalar backward, double backward, ...)."""


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of tracked operations; append order == topo order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


_ACTIVE = Tape()
_NO_GRAD = False


def active_tape() -> Tape:
    return _ACTIVE


def reset_tape() -> None:
    """Start a fresh tape; previously built graphs keep their own tape."""
    global _ACTIVE
    _ACTIVE = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation-only forward passes)."""
    global _NO_GRAD
    prev = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.tape = None
    out.node_id = None
    if not _NO_GRAD and any(t.tracked for t in inputs):
        if _ACTIVE.used:
            # prior graph on this tape was consumed; start fresh
            reset_tape()
        node = _Node(op, tuple(inputs), backward_fn)
        out.tape = _ACTIVE
        out.node_id = _ACTIVE.append(node)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * np.asarray(c, dtype=a.dtype),
                   lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                   lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first: [N, ...] -> [N, D]."""
    n = a.shape[0]
    return reshape(a, (n, -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, a.dtype.type(0)),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# dense / convolutional ops

def linear(a: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-d, got shape {a.shape}")
    n, d = a.shape
    k, dw = weight.shape
    if d != dw:
        raise ShapeError(
            f"linear: input feature axis has {d} entries but weight expects {dw}")
    if bias.shape != (k,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({k},)")
    out = a.data @ weight.data.T + bias.data
    xd, wd = a.data, weight.data

    def bwd(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0))

    return _record("linear", (a, weight, bias), out, bwd)


def conv2d(a: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with per-output-channel bias (NCHW layout)."""
    if a.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d, got shape {a.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got shape {kernel.shape}")
    n, cin, h, w = a.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise ShapeError(
            f"conv2d: input channel axis has {cin} channels but kernel expects {ck}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if h + 2 * padding < kh:
        raise ShapeError(
            f"conv2d: height axis {h} (+2*{padding} pad) smaller than kernel {kh}")
    if w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: width axis {w} (+2*{padding} pad) smaller than kernel {kw}")

    xp = a.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]          # N,Cin,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dk = (gcols.T @ cols).reshape(kernel.shape)
        db = gcols.sum(axis=0)
        dcols = gcols @ wmat                           # NHoWo, Cin*kh*kw
        dcols = dcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                    j:j + (wo - 1) * stride + 1:stride] += dcols[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
        return (dxp, dk, db)

    return _record("conv2d", (a, kernel, bias), out, bwd)


def maxpool2(a: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties go to the first element in
    row-major window order."""
    if a.data.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-d, got shape {a.shape}")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents ({h},{w}) must be even")
    hh, ww = h // 2, w // 2
    win = a.data.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, hh, ww, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bwd(g):
        dwin = np.zeros((n, c, hh, ww, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return _record("maxpool2", (a,), out, bwd)


def avgpool2(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"avgpool2: input must be 4-d, got shape {a.shape}")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial extents ({h},{w}) must be even")
    hh, ww = h // 2, w // 2
    win = a.data.reshape(n, c, hh, 2, ww, 2)
    out = win.mean(axis=(3, 5))

    def bwd(g):
        dx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (dx * g.dtype.type(0.25),)

    return _record("avgpool2", (a,), out, bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-d, got shape {a.shape}")
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3))

    def bwd(g):
        dx = np.broadcast_to(g[:, :, None, None], (n, c, h, w))
        return ((dx / (h * w)).astype(g.dtype),)

    return _record("global_avg_pool", (a,), out, bwd)


def channel_affine(a: Tensor, scale_t: Tensor, bias: Tensor) -> Tensor:
    """Per-channel y = x * s[c] + b[c] on NCHW input (affine stand-in for
    batch normalization)."""
    if a.data.ndim != 4:
        raise ShapeError(f"channel_affine: input must be 4-d, got shape {a.shape}")
    n, c, h, w = a.shape
    if scale_t.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale/bias shapes {scale_t.shape}/{bias.shape} != ({c},)")
    s = scale_t.data[None, :, None, None]
    out = a.data * s + bias.data[None, :, None, None]
    xd = a.data

    def bwd(g):
        return (g * s, (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record("channel_affine", (a, scale_t, bias), out, bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    for p in parts:
        if p.data.ndim != 4:
            raise ShapeError(f"concat_channels: operand shape {p.shape} is not 4-d")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        grads = []
        start = 0
        for sz in sizes:
            grads.append(np.ascontiguousarray(g[:, start:start + sz]))
            start += sz
        return tuple(grads)

    return _record("concat_channels", tuple(parts), out, bwd)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot targets.

    Computed in max-shifted log-sum-exp form; the gradient w.r.t. the
    logits is (softmax - targets) / N.  Targets are treated as constants.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    if t.shape != logits.shape:
        raise ShapeError(
            f"softmax_cross_entropy: target shape {t.shape} != logits shape {logits.shape}")
    ones = t == 1
    if not (np.all((t == 0) | ones) and np.all(ones.sum(axis=1) == 1)):
        bad = int(np.flatnonzero(~((np.all((t == 0) | ones, axis=1)) &
                                   (ones.sum(axis=1) == 1)))[0])
        raise ShapeError(f"softmax_cross_entropy: target row {bad} is not one-hot")

    n = logits.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = m + np.log(sez)                              # N,1
    per_row = (lse[:, 0] - (t * z).sum(axis=1))
    out = np.asarray(per_row.mean(), dtype=z.dtype)
    sm = ez / sez

    def bwd(g):
        return ((sm - t) * (g / n),)

    return _record("softmax_cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from *loss*."""
    if loss.data.size != 1:
        raise GradError(f"backward: loss has shape {loss.shape}, expected a scalar")
    tape = loss.tape
    if tape is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return
        raise GradError("backward: loss is not connected to any tape")
    if tape.used:
        raise GradError("backward: tape already consumed; reset the tape "
                        "and clear gradients before differentiating again")
    tape.used = True

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if inp.node_id is not None and inp.tape is tape:
                if inp.node_id in pending:
                    pending[inp.node_id] = pending[inp.node_id] + ig
                else:
                    pending[inp.node_id] = ig
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
                else:
                    inp.grad = inp.grad + ig.astype(inp.dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle

class GradCheckReport:
    def __init__(self, max_rel_err: float, mean_rel_err: float,
                 rel_err: np.ndarray):
        self.max_rel_err = max_rel_err
        self.mean_rel_err = mean_rel_err
        self.rel_err = rel_err

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def __repr__(self):
        return (f"GradCheckReport(max={self.max_rel_err:.3e}, "
                f"mean={self.mean_rel_err:.3e})")


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of scalar-valued *f* at *point* against
    central finite differences (f(x+h e) - f(x-h e)) / 2h."""
    x = Tensor(point.data.astype(np.float64), requires_grad=True)
    reset_tape()
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    reset_tape()

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)

    rel = _rel_err(analytic, fd)
    return GradCheckReport(float(rel.max()), float(rel.mean()), rel)
