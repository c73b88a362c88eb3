"""Dense numeric core: float64 tensors, forward primitives, tape-based reverse mode.

Every operation runs in 64-bit numpy. When a Tape is active (``with Tape() as t:``)
and an input requires grad, the op appends a backward closure to the tape; the
tape is replayed in reverse by :func:`backward`, accumulating into ``Tensor.grad``.
With no active tape the same functions run forward-only. Tensors are treated as
immutable once produced; the tape is single-writer and must be consumed once.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import PatternError, ShapeError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of backward rules for one forward pass."""

    def __init__(self):
        self._ops: list = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def _record(self, fn) -> None:
        self._ops.append(fn)

    def __len__(self):
        return len(self._ops)


def _tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-replay the tape, seeding d(loss)/d(loss) = 1. Loss must be scalar."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._ops):
        fn()


def _make_out(data: np.ndarray, *inputs: Tensor) -> tuple[Tensor, bool]:
    out = Tensor(data)
    tape = _tape()
    rec = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = rec
    return out, rec


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out, rec = _make_out(a.data + b, a)
        if rec:
            def bw():
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            _tape()._record(bw)
        return out
    out, rec = _make_out(a.data + b.data, a, b)
    if rec:
        def bw():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.data.shape))
        _tape()._record(bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        out, rec = _make_out(a.data * c, a)
        if rec:
            def bw():
                _accum(a, _unbroadcast(out.grad * c, a.data.shape))
            _tape()._record(bw)
        return out
    out, rec = _make_out(a.data * b.data, a, b)
    if rec:
        ad, bd = a.data, b.data
        def bw():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * bd, ad.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * ad, bd.shape))
        _tape()._record(bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ShapeError(f"matmul supports 2-D/3-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul leading extents differ: {ad.shape} @ {bd.shape}")
    out, rec = _make_out(ad @ bd, a, b)
    if rec:
        def bw():
            g = out.grad
            if a.requires_grad:
                ga = g @ bd.swapaxes(-1, -2)
                _accum(a, _unbroadcast(ga, ad.shape))
            if b.requires_grad:
                gb = ad.swapaxes(-1, -2) @ g
                _accum(b, _unbroadcast(gb, bd.shape))
        _tape()._record(bw)
    return out


def take_rows(src: Tensor, indices) -> Tensor:
    """Row gather: out[..., :] = src[indices[...], :]. Also serves as embedding lookup."""
    idx = np.asarray(indices, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= src.data.shape[0]):
        raise ShapeError(f"take_rows index out of range for {src.data.shape[0]} rows")
    out, rec = _make_out(src.data[idx], src)
    if rec:
        row_width = int(np.prod(src.data.shape[1:], dtype=np.intp)) if src.data.ndim > 1 else 1
        def bw():
            _accum(src, _scatter_rows(out.grad, idx, src.data.shape, row_width))
        _tape()._record(bw)
    return out


def _scatter_rows(g: np.ndarray, idx: np.ndarray, shape: tuple, row_width: int) -> np.ndarray:
    # bincount on a fused (row, feature) index: much faster than np.add.at
    flat_g = g.reshape(-1, row_width) if row_width > 1 else g.reshape(-1, 1)
    flat_idx = idx.reshape(-1)
    fused = (flat_idx[:, None] * row_width + np.arange(row_width)[None, :]).reshape(-1)
    total = int(shape[0]) * row_width
    acc = np.bincount(fused, weights=flat_g.reshape(-1), minlength=total)
    return acc.reshape(shape)


def rowdot(q: Tensor, kg: Tensor) -> Tensor:
    """Per-row scores: out[r, w] = q[r] . kg[r, w]."""
    if q.data.ndim != 2 or kg.data.ndim != 3 or q.data.shape[0] != kg.data.shape[0] \
            or q.data.shape[1] != kg.data.shape[2]:
        raise ShapeError(f"rowdot shapes {q.data.shape} vs {kg.data.shape}")
    out, rec = _make_out(np.einsum("rd,rwd->rw", q.data, kg.data, optimize=True), q, kg)
    if rec:
        qd, kgd = q.data, kg.data
        def bw():
            g = out.grad
            if q.requires_grad:
                _accum(q, np.einsum("rw,rwd->rd", g, kgd, optimize=True))
            if kg.requires_grad:
                _accum(kg, np.einsum("rw,rd->rwd", g, qd, optimize=True))
        _tape()._record(bw)
    return out


def attn_mix(p: Tensor, vg: Tensor) -> Tensor:
    """Per-row convex mix: out[r] = sum_w p[r, w] * vg[r, w]."""
    if p.data.ndim != 2 or vg.data.ndim != 3 or p.data.shape != vg.data.shape[:2]:
        raise ShapeError(f"attn_mix shapes {p.data.shape} vs {vg.data.shape}")
    out, rec = _make_out(np.einsum("rw,rwd->rd", p.data, vg.data, optimize=True), p, vg)
    if rec:
        pd, vgd = p.data, vg.data
        def bw():
            g = out.grad
            if p.requires_grad:
                _accum(p, np.einsum("rd,rwd->rw", g, vgd, optimize=True))
            if vg.requires_grad:
                _accum(vg, np.einsum("rw,rd->rwd", pd, g, optimize=True))
        _tape()._record(bw)
    return out


def masked_softmax(logits: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to allowed entries.

    Disallowed entries get probability exactly 0. A row with no allowed entry is
    a malformed attention pattern and raises immediately.
    """
    mask = np.asarray(allowed, dtype=bool)
    if mask.shape != logits.data.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.data.shape}")
    if not mask.any(axis=-1).all():
        raise PatternError("masked_softmax: a row has no allowed entries")
    x = logits.data
    m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out, rec = _make_out(p, logits)
    if rec:
        def bw():
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(logits, p * (g - dot))
        _tape()._record(bw)
    return out


def _slot_dot(a_rows: np.ndarray, table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[r, w] = a_rows[r] . table[idx[r, w]], one feature column at a time.

    Feature-at-a-time keeps every temporary at [rows, width]; materializing
    [rows, width, d] gathers is several times slower at long sequence lengths.
    """
    out = np.zeros(idx.shape)
    for f in range(table.shape[1]):
        out += a_rows[:, f, None] * table[:, f][idx]
    return out


def _slot_mix(weights: np.ndarray, table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[r] = sum_w weights[r, w] * table[idx[r, w]], feature at a time."""
    out = np.empty((idx.shape[0], table.shape[1]))
    for f in range(table.shape[1]):
        out[:, f] = (weights * table[:, f][idx]).sum(axis=1)
    return out


def _slot_scatter(weights: np.ndarray, rows: np.ndarray, idx_flat: np.ndarray,
                  n: int) -> np.ndarray:
    """out[idx[r, w]] += weights[r, w] * rows[r], accumulated via bincount."""
    d = rows.shape[1]
    out = np.empty((n, d))
    for f in range(d):
        out[:, f] = np.bincount(idx_flat, weights=(weights * rows[:, f, None]).ravel(),
                                minlength=n)
    return out


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, idx: np.ndarray,
                     valid: np.ndarray, scale: float) -> Tensor:
    """Fused pattern-restricted attention over gathered key slots.

    out[r] = softmax_w(scale * q[r] . k[idx[r, w]] | valid[r, w]) . v[idx[r, :]]

    Only the probability matrix is kept for backward; key/value gathers are
    recomputed, so memory stays proportional to the number of allowed pairs.
    """
    idx = np.asarray(idx, dtype=np.intp)
    valid = np.asarray(valid, dtype=bool)
    n, d = k.data.shape
    if q.data.ndim != 2 or q.data.shape[1] != d or v.data.shape != (n, d):
        raise ShapeError(f"sparse_attention shapes q={q.data.shape} k={k.data.shape} v={v.data.shape}")
    if idx.shape != valid.shape or idx.shape[0] != q.data.shape[0]:
        raise ShapeError(f"index table {idx.shape} does not match queries {q.data.shape}")
    if not valid.any(axis=-1).all():
        raise PatternError("sparse_attention: a query row has no allowed keys")

    scores = _slot_dot(q.data * scale, k.data, idx)
    m = np.where(valid, scores, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(scores - m), 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)
    del scores, e, m
    out_data = _slot_mix(probs, v.data, idx)

    out, rec = _make_out(out_data, q, k, v)
    if rec:
        qd, kd, vd = q.data, k.data, v.data
        idx_flat = idx.ravel()
        def bw():
            g = out.grad
            if v.requires_grad:
                _accum(v, _slot_scatter(probs, g, idx_flat, n))
            dprobs = _slot_dot(g, vd, idx)
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                _accum(q, _slot_mix(dscores, kd, idx) * scale)
            if k.requires_grad:
                _accum(k, _slot_scatter(dscores, qd * scale, idx_flat, n))
        _tape()._record(bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gamma.data.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out, rec = _make_out(gamma.data * xhat + beta.data, x, gamma, beta)
    if rec:
        lead = tuple(range(x.data.ndim - 1))
        def bw():
            g = out.grad
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=lead))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=lead))
            if x.requires_grad:
                dxhat = g * gamma.data
                s1 = dxhat.sum(axis=-1, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
                _accum(x, ivar / d * (d * dxhat - s1 - xhat * s2))
        _tape()._record(bw)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU; monotone nondecreasing on [-1, inf) and gelu(0)=0."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out, rec = _make_out(0.5 * xd * (1.0 + t), x)
    if rec:
        def bw():
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
            _accum(x, out.grad * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))
        _tape()._record(bw)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out, rec = _make_out(t, x)
    if rec:
        def bw():
            _accum(x, out.grad * (1.0 - t * t))
        _tape()._record(bw)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Seeded inverted dropout; a train-only primitive (skip entirely for eval)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)
    out, rec = _make_out(x.data * factor, x)
    if rec:
        def bw():
            _accum(x, out.grad * factor)
        _tape()._record(bw)
    return out


# ---------------------------------------------------------------------------
# losses


def cross_entropy_mean(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean negative log-softmax of targets over rows whose target != ignore_id."""
    t = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy expects [N,V] logits and [N] targets, got {x.shape}, {t.shape}")
    keep = t != ignore_id
    if not keep.any():
        raise ShapeError("cross_entropy: every row is ignored")
    tk = t[keep]
    if np.any(tk < 0) or np.any(tk >= x.shape[1]):
        raise ShapeError("cross_entropy: target id out of range")
    xk = x[keep]
    m = xk.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(xk - m).sum(axis=-1))
    nll = lse - xk[np.arange(xk.shape[0]), tk]
    out, rec = _make_out(np.float64(nll.mean()), logits)
    if rec:
        def bw():
            p = np.exp(xk - m)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(p.shape[0]), tk] -= 1.0
            gfull = np.zeros_like(x)
            gfull[keep] = p * (out.grad / tk.shape[0])
            _accum(logits, gfull)
        _tape()._record(bw)
    return out


def bce_with_logits_mean(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all entries, numerically stable in the logits."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        raise ShapeError(f"bce targets shape {y.shape} != logits shape {z.shape}")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out, rec = _make_out(np.float64(loss.mean()), logits)
    if rec:
        def bw():
            sig = 1.0 / (1.0 + np.exp(-z))
            _accum(logits, (sig - y) * (out.grad / z.size))
        _tape()._record(bw)
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    out, rec = _make_out(x.data.reshape(shape), x)
    if rec:
        orig = x.data.shape
        def bw():
            _accum(x, out.grad.reshape(orig))
        _tape()._record(bw)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out, rec = _make_out(x.data.transpose(axes), x)
    if rec:
        inv = tuple(np.argsort(axes))
        def bw():
            _accum(x, out.grad.transpose(inv))
        _tape()._record(bw)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not 0 <= start <= start + length <= x.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range on axis {axis} of {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out, rec = _make_out(x.data[sl], x)
    if rec:
        def bw():
            g = np.zeros_like(x.data)
            g[sl] = out.grad
            _accum(x, g)
        _tape()._record(bw)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out, rec = _make_out(np.concatenate(datas, axis=axis), *tensors)
    if rec:
        sizes = [d.shape[axis] for d in datas]
        def bw():
            offset = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(offset, offset + s)
                    _accum(t, out.grad[tuple(sl)])
                offset += s
        _tape()._record(bw)
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out, rec = _make_out(np.stack([t.data for t in tensors], axis=axis), *tensors)
    if rec:
        def bw():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _accum(t, np.take(out.grad, i, axis=axis))
        _tape()._record(bw)
    return out
