"""Dense-tensor numeric core with reverse-mode autodiff.

Tensors wrap numpy arrays; differentiable ops record onto an explicit Tape
and ``backward`` replays the tape in reverse execution order exactly once.
The op set is exactly what a decoder-only transformer with attachable
memories needs — nothing more. With no tape active, ops are plain forward
computations (inference mode).

Default precision is float32. The whole stack also runs in float64, which
is how gradients are verified against central finite differences.
"""

from __future__ import annotations

import math
import threading

import numpy as np

DEFAULT_DTYPE = np.float32

# Additive attention masks use true -inf; exp(-inf) == 0.0 exactly, and the
# backward of softmax keeps those slots at an exact zero.
NEG_INF = -np.inf


class ShapeError(ValueError):
    """Operand shapes do not conform. Message names the op and both shapes."""


class GradError(RuntimeError):
    """Backward pass invoked on an invalid target (e.g. non-scalar loss)."""


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``requires_grad`` marks trainable leaves. ``_rec`` marks tensors produced
    by a recorded op on the currently active tape, so gradient flow continues
    through intermediates even when some inputs are frozen.
    """

    __slots__ = ("data", "requires_grad", "grad", "_rec", "_pointwise")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        elif arr.dtype == np.float64 and dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            # Python floats/lists default to the package dtype, but an
            # explicitly float64 ndarray or numpy scalar is left alone
            # (gradient-check mode).
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._rec = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small amount of sugar; everything else goes through module functions.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, copy=True), requires_grad=True, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


class Tape:
    """Explicit recording context.

    Disjoint tapes are independent; the stack is thread-local so concurrent
    backward passes on disjoint tapes are safe.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")
        return False


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: list[Tensor], bwd) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._rec for t in inputs):
        out._rec = True
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse the tape once, accumulating gradients into ``.grad``.

    ``loss`` must be a scalar produced on this tape (or a leaf, in which
    case there is nothing to do).
    """
    if loss.data.size != 1:
        raise GradError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        og = node.out.grad
        if og is None:
            continue
        grads = node.bwd(og)
        for t, g in zip(node.inputs, grads):
            if g is None:
                continue
            if t.requires_grad or t._rec:
                _accumulate(t, g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    na, nb = (a.requires_grad or a._rec), (b.requires_grad or b._rec)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _record(out, [a, b], bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    na, nb = (a.requires_grad or a._rec), (b.requires_grad or b._rec)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if na else None,
            _unbroadcast(g * a.data, b.data.shape) if nb else None,
        )

    return _record(out, [a, b], bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, [x], bwd)


def silu(x: Tensor) -> Tensor:
    # silu(x) = x * sigmoid(x); silu(0) == 0 exactly.
    s = np.negative(x.data)
    np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    out = Tensor(x.data * s)

    def bwd(g):
        t = 1.0 - s
        t *= x.data
        t += 1.0
        t *= s
        t *= g
        return (t,)

    return _record(out, [x], bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically shifted by the row max)."""
    m = np.max(x.data, axis=-1, keepdims=True)
    # Fully masked rows would give m == -inf; the model never builds one.
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, [x], bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """x / rms(x) * gain with rms over the last axis.

    ``gain`` may be any shape broadcastable against ``x`` (a plain (d,)
    vector, or (heads, head_dim) for per-head query/key norms).
    """
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = Tensor(xhat * gain.data)
    n = x.data.shape[-1]
    nx, ng = (x.requires_grad or x._rec), (gain.requires_grad or gain._rec)

    def bwd(g):
        dx = dgain = None
        if nx:
            gy = g * gain.data
            dot = np.sum(gy * x.data, axis=-1, keepdims=True)
            dx = inv * gy - x.data * (inv ** 3 * dot / n)
        if ng:
            dgain = _unbroadcast(g * xhat, gain.data.shape)
        return (dx, dgain)

    return _record(out, [x, gain], bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}) in lookup of shape {ids.shape}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, [table], bwd)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    base = datas[0].shape
    ax = axis % len(base)
    for d in datas[1:]:
        if len(d.shape) != len(base) or any(
            d.shape[i] != base[i] for i in range(len(base)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[p.shape for p in parts]} differ off axis {axis}")
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[ax] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _record(out, list(parts), bwd)


def split(x: Tensor, sizes: list[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.data.ndim
    if sum(sizes) != x.data.shape[ax]:
        raise ShapeError(f"split: sizes {sizes} do not sum to axis {axis} of {x.data.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        idx = [slice(None)] * x.data.ndim
        idx[ax] = slice(offsets[i], offsets[i + 1])
        piece = Tensor(x.data[tuple(idx)])

        def bwd(g, _i=i):
            gx = np.zeros_like(x.data)
            idx2 = [slice(None)] * x.data.ndim
            idx2[ax] = slice(offsets[_i], offsets[_i + 1])
            gx[tuple(idx2)] = g
            return (gx,)

        outs.append(_record(piece, [x], bwd))
    return outs


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(out, [x], bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, [x], bwd)


def sumall(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def bwd(g):
        return (np.full(x.data.shape, g, dtype=x.data.dtype),)

    return _record(out, [x], bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """np.matmul semantics, optionally with the last two axes of b swapped.

    Supports 2D@2D, batched 3D/4D stacks, and (…, k) @ (k, n) broadcasts —
    batched per-sequence memory weights use stacked b of shape (B, k, n).
    """
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    try:
        out = Tensor(np.matmul(a.data, bd))
    except ValueError:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} @ {b.data.shape}"
            + (" (transposed)" if transpose_b else "")
        )
    # captured now: a frozen operand (requires_grad off, not produced on a
    # tape) skips its gradient gemm entirely
    na = a.requires_grad or a._rec
    nb = b.requires_grad or b._rec

    def bwd(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.data.shape)
        if nb:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
            gb = _unbroadcast(gb, b.data.shape)
        return (ga, gb)

    return _record(out, [a, b], bwd)


# ---------------------------------------------------------------------------
# fused attention / rotary / cross-entropy
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an optional additive mask.

    q: (..., Sq, dh), k/v: (..., Sk, dh); mask broadcasts against the
    (..., Sq, Sk) score matrix and uses -inf for disallowed slots. The
    score scale is 1/sqrt(dh).
    """
    dh = q.data.shape[-1]
    if k.data.shape[-1] != dh or v.data.shape[-2] != k.data.shape[-2]:
        raise ShapeError(f"attention: q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    sc = 1.0 / math.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= sc
    if mask is not None:
        scores += mask
    m = np.max(scores, axis=-1, keepdims=True)
    scores -= m
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    p = scores
    out = Tensor(np.matmul(p, v.data))
    nq, nk, nv = (q.requires_grad or q._rec), (k.requires_grad or k._rec), (v.requires_grad or v._rec)

    def bwd(g):
        gq = gk = gv = None
        if nv:
            gv = _unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), v.data.shape)
        if nq or nk:
            ds = np.matmul(g, np.swapaxes(v.data, -1, -2))
            ds -= np.sum(ds * p, axis=-1, keepdims=True)
            ds *= p
            if nq:
                gq = np.matmul(ds, k.data)
                gq *= sc
                gq = _unbroadcast(gq, q.data.shape)
            if nk:
                gk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
                gk *= sc
                gk = _unbroadcast(gk, k.data.shape)
        return (gq, gk, gv)

    return _record(out, [q, k, v], bwd)


def rope(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotary position application over interleaved feature pairs.

    x: (..., S, dh) with dh even; pair (2i, 2i+1) rotates by angle
    pos * base^(-2i/dh). Norm-preserving; position 0 is the identity.
    """
    dh = x.data.shape[-1]
    if dh % 2:
        raise ShapeError(f"rope: head dim must be even, got {x.data.shape}")
    positions = np.asarray(positions, dtype=np.float64)
    half = dh // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = positions[:, None] * inv_freq[None, :]            # (S, dh/2)
    cos = np.cos(ang).astype(x.data.dtype)
    sin = np.sin(ang).astype(x.data.dtype)
    xp = x.data.reshape(x.data.shape[:-1] + (half, 2))
    xe, xo = xp[..., 0], xp[..., 1]
    out_p = np.empty_like(xp)
    out_p[..., 0] = xe * cos - xo * sin
    out_p[..., 1] = xe * sin + xo * cos
    out = Tensor(out_p.reshape(x.data.shape))

    def bwd(g):
        gp = g.reshape(g.shape[:-1] + (half, 2))
        ge, go = gp[..., 0], gp[..., 1]
        gx = np.empty_like(gp)
        gx[..., 0] = ge * cos + go * sin
        gx[..., 1] = -ge * sin + go * cos
        return (gx.reshape(x.data.shape),)

    return _record(out, [x], bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the vocabulary (last axis).

    ``targets`` holds class ids shaped like logits minus the last axis;
    ``weight`` (same shape as targets, 0/1 or soft) selects and weights
    positions. Returns a scalar; the pointwise NLL array is stashed on the
    result as ``_pointwise`` for metric reporting (not differentiable).
    """
    V = logits.data.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs targets {np.asarray(targets).shape}")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ShapeError(f"cross_entropy: target id out of range [0, {V})")
    if weight is None:
        w = np.ones(flat.shape[0], dtype=flat.dtype)
    else:
        w = np.asarray(weight, dtype=flat.dtype).reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(flat.shape[0]), t]
    denom = w.sum()
    if denom <= 0:
        raise ShapeError("cross_entropy: weight mask selects no positions")
    out = Tensor(np.asarray((nll * w).sum() / denom, dtype=flat.dtype))
    out._pointwise = nll  # type: ignore[attr-defined]

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(flat.shape[0]), t] -= 1.0
        gl = p * (w * float(g) / denom)[:, None]
        return (gl.reshape(logits.data.shape),)

    return _record(out, [logits], bwd)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        f = max_norm / norm
        for g in grads:
            g *= f
    return norm
