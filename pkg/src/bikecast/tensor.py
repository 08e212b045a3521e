"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

numpy arrays hold the values; every differentiable op appends a backward rule
to the active :class:`Tape`. Because records are appended in execution order,
the list is already topologically sorted and ``backward`` is a single reverse
sweep. Everything defaults to float64 so finite-difference checks have
headroom.

Layout conventions used by the model ops: activations are ``(batch, channel,
time, node)``; ``conv1d_time`` slides along the time axis only, ``node_mix``
mixes along the node axis only.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError, ValidationError, WindowError

DEFAULT_DTYPE = np.float64

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """N-dimensional array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "needs")

    def __init__(self, inputs, output, backward_fn, needs):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.needs = needs


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager around the forward computation; only one tape may
    be active at a time. ``backward`` replays the recorded rules in reverse
    exactly once, accumulating into ``Tensor.grad``; call ``reset`` before
    recording the next step. Parameter grads are left in place for the
    optimizer and are the caller's to clear.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("backward already ran on this tape; reset() before reuse")
        if loss._tape is not self:
            raise StateError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ValidationError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=DEFAULT_DTYPE)
        for rec in reversed(self._records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward_fn(g)
            for inp, gi, needed in zip(rec.inputs, grads, rec.needs):
                if not needed or gi is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=DEFAULT_DTYPE)
                else:
                    inp.grad += gi


def backward(loss: Tensor) -> None:
    """Run the reverse sweep for ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise StateError("loss is not attached to a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None:
        needs = tuple(_tracked(t, tape) for t in inputs)
        if any(needs):
            out._tape = tape
            tape._records.append(_Record(inputs, out, backward_fn, needs))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (deliberately stricter than numpy: an operand may only
# be expanded along a leading run of unit axes, so backward is a plain sum)

def _broadcast_meta(sa: tuple[int, ...], sb: tuple[int, ...]):
    nd = max(len(sa), len(sb))
    pa = (1,) * (nd - len(sa)) + tuple(sa)
    pb = (1,) * (nd - len(sb)) + tuple(sb)
    out = []
    for x, y in zip(pa, pb):
        if x != y and 1 not in (x, y):
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast")
        out.append(max(x, y))
    out_shape = tuple(out)
    for orig, padded in ((sa, pa), (sb, pb)):
        expanded = [i for i in range(nd) if padded[i] == 1 and out_shape[i] != 1]
        if expanded != list(range(len(expanded))):
            raise ShapeError(
                f"broadcasting is limited to leading unit axes: {sa} vs {sb}"
            )
    return out_shape, pa, pb


def _unbroadcast(g: np.ndarray, orig_shape: tuple[int, ...], padded: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i in range(g.ndim) if padded[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(orig_shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _, pa, pb = _broadcast_meta(a.shape, b.shape)
    out = Tensor(a.data.reshape(pa) + b.data.reshape(pb))

    def bwd(g):
        return _unbroadcast(g, a.shape, pa), _unbroadcast(g, b.shape, pb)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _, pa, pb = _broadcast_meta(a.shape, b.shape)
    out = Tensor(a.data.reshape(pa) - b.data.reshape(pb))

    def bwd(g):
        return _unbroadcast(g, a.shape, pa), _unbroadcast(-g, b.shape, pb)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _, pa, pb = _broadcast_meta(a.shape, b.shape)
    ad, bd = a.data.reshape(pa), b.data.reshape(pb)
    out = Tensor(ad * bd)

    def bwd(g):
        return _unbroadcast(g * bd, a.shape, pa), _unbroadcast(g * ad, b.shape, pb)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}: element counts differ")
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())

    def bwd(g):
        return (g.T,)

    return _record(out, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) does not fit axis {axis} of shape {x.shape}"
        )
    sl = tuple(slice(start, start + length) if i == axis else slice(None) for i in range(x.ndim))
    out = Tensor(x.data[sl].copy())

    def bwd(g):
        dx = np.zeros(x.shape, dtype=DEFAULT_DTYPE)
        dx[sl] = g
        return (dx,)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for shape {tensors[0].shape}")
    axis = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != nd or other[:axis] != base[:axis] or other[axis + 1:] != base[axis + 1:]:
            raise ShapeError(
                f"concat shapes differ off axis {axis}: {tensors[0].shape} vs {t.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), bwd)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; unlike add/mul this allows interior unit axes."""
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    if np.broadcast_shapes(x.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    pad = (1,) * (len(shape) - x.ndim) + x.shape

    def bwd(g):
        axes = tuple(i for i in range(len(shape)) if pad[i] == 1 and shape[i] != 1)
        dx = g.sum(axis=axes, keepdims=True) if axes else g
        return (dx.reshape(x.shape),)

    return _record(out, (x,), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g):
        return (np.full(x.shape, g, dtype=DEFAULT_DTYPE),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear-algebra ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), bwd)


def channel_map(x: Tensor, w: Tensor) -> Tensor:
    """Per-position linear map on the channel axis: (B, c, T, n) x (c, c') -> (B, c', T, n)."""
    if x.ndim != 4 or w.ndim != 2:
        raise ShapeError(f"channel_map needs (B,c,T,n) and (c,c'), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel_map: x has {x.shape[1]} channels but w maps {w.shape[0]}")
    xd, wd = x.data, w.data
    out = Tensor(np.einsum("bitv,io->botv", xd, wd, optimize=True))

    def bwd(g):
        dx = np.einsum("botv,io->bitv", g, wd, optimize=True)
        dw = np.einsum("bitv,botv->io", xd, g, optimize=True)
        return dx, dw

    return _record(out, (x, w), bwd)


def node_mix(x: Tensor, a: Tensor) -> Tensor:
    """Mix along the node axis: out[..., v] = sum_u a[v, u] * x[..., u]."""
    if x.ndim != 4 or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"node_mix needs (B,c,T,n) and (n,n), got {x.shape} and {a.shape}")
    if x.shape[3] != a.shape[0]:
        raise ShapeError(f"node_mix: x has {x.shape[3]} nodes but matrix is {a.shape[0]}x{a.shape[1]}")
    xd, ad = x.data, a.data
    out = Tensor(np.einsum("bctu,vu->bctv", xd, ad, optimize=True))

    def bwd(g):
        dx = np.einsum("bctv,vu->bctu", g, ad, optimize=True)
        da = np.einsum("bctv,bctu->vu", g, xd, optimize=True)
        return dx, da

    return _record(out, (x, a), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of a (B, c, T, n) tensor."""
    if x.ndim != 4 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"bias_add needs (B,c,T,n) and (c,), got {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data[None, :, None, None])

    def bwd(g):
        return g, g.sum(axis=(0, 2, 3))

    return _record(out, (x, b), bwd)


def conv1d_time(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid (unpadded) convolution along the time axis.

    ``x`` is (B, C_in, T, n), ``kernel`` is (C_out, C_in, K), ``bias`` is
    (C_out,); the output is (B, C_out, T-K+1, n) with

        out[b,o,t,v] = bias[o] + sum_{i,k} kernel[o,i,k] * x[b,i,t+k,v]
    """
    if x.ndim != 4 or kernel.ndim != 3 or bias.ndim != 1:
        raise ShapeError(
            f"conv1d_time needs (B,C,T,n), (C_out,C_in,K), (C_out,); got "
            f"{x.shape}, {kernel.shape}, {bias.shape}"
        )
    _, c_in, t_len, _ = x.shape
    c_out, k_in, k = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv1d_time: x has {c_in} channels but kernel expects {k_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv1d_time: kernel has {c_out} outputs but bias has {bias.shape[0]}")
    if t_len < k:
        raise WindowError(f"time axis of length {t_len} is shorter than the kernel ({k})")
    t_out = t_len - k + 1
    xd, kd = x.data, kernel.data
    out_d = np.zeros((x.shape[0], c_out, t_out, x.shape[3]), dtype=DEFAULT_DTYPE)
    for tap in range(k):
        out_d += np.einsum("oi,bitv->botv", kd[:, :, tap], xd[:, :, tap:tap + t_out, :], optimize=True)
    out_d += bias.data[None, :, None, None]
    out = Tensor(out_d)

    def bwd(g):
        dx = np.zeros_like(xd)
        dk = np.empty_like(kd)
        for tap in range(k):
            dx[:, :, tap:tap + t_out, :] += np.einsum("oi,botv->bitv", kd[:, :, tap], g, optimize=True)
            dk[:, :, tap] = np.einsum("bitv,botv->oi", xd[:, :, tap:tap + t_out, :], g, optimize=True)
        db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    return _record(out, (x, kernel, bias), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, time) slice of a (B, c, T, n) tensor over channels and nodes.

    ``gain`` and ``shift`` are per-channel (c,) so the affine part commutes
    with any node permutation.
    """
    if x.ndim != 4:
        raise ShapeError(f"layer_norm needs a (B,c,T,n) tensor, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"layer_norm gain/shift must be ({c},), got {gain.shape} and {shift.shape}"
        )
    mu = x.data.mean(axis=(1, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data[None, :, None, None] + shift.data[None, :, None, None])

    def bwd(g):
        gh = g * gain.data[None, :, None, None]
        mean_gh = gh.mean(axis=(1, 3), keepdims=True)
        mean_ghx = (gh * xhat).mean(axis=(1, 3), keepdims=True)
        dx = inv * (gh - mean_gh - xhat * mean_ghx)
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        return dx, dgain, dshift

    return _record(out, (x, gain, shift), bwd)


def glu(x: Tensor, axis: int = 1) -> Tensor:
    """Gated linear unit: split the axis in half into (P, Q), return P * sigmoid(Q)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"glu axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    c = x.shape[axis]
    if c % 2 != 0:
        raise ShapeError(f"glu needs an even size on axis {axis}, got {c}")
    half = c // 2
    p = narrow(x, axis, 0, half)
    q = narrow(x, axis, half, half)
    return mul(p, sigmoid(q))


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the taped gradient of ``f`` at ``x`` against central differences.

    ``f`` must map ``x`` to a scalar Tensor and be runnable both with and
    without an active tape. Returns the maximum elementwise relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``x``'s grad and requires_grad are
    restored afterwards; probe evaluations that produce non-finite values
    raise NumericError.
    """
    if eps <= 0.0:
        raise ValidationError(f"grad_check eps must be positive, got {eps}")
    saved_rg, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        if loss.data.shape != ():
            raise ValidationError(f"grad_check target must be scalar, got shape {loss.data.shape}")
        tape.backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=DEFAULT_DTYPE)
    finally:
        x.requires_grad = saved_rg
        x.grad = saved_grad

    numeric = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = float(f(x).data)
        flat_x[i] = orig - eps
        f_minus = float(f(x).data)
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite probe value at flat index {i} during grad_check")
        flat_n[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
