"""Reverse-mode automatic differentiation over dense float64 arrays.

A single flat tape records operations in execution order, which is already a
topological order, so the backward pass is one reversed sweep with no graph
search.  Arrays are immutable once produced by an operation.  Broadcasting is
deliberately minimal: an op accepts operands of identical shape, a scalar with
an array, a row vector with a matrix, or a column vector with a matrix.
Anything else is a shape error.

Gradient buffers are allocated lazily during the backward sweep; an array that
never receives a gradient (e.g. a frozen parameter) keeps ``grad = None``.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "DiffArray",
    "ShapeError",
    "tape",
    "backward",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "concat",
    "slice_last",
    "sum_",
    "mean_",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "gelu",
    "geglu",
    "relu",
    "layernorm",
    "affine",
    "gru_cell",
    "l2_normalize",
    "cosine_rows",
    "cosine_sim",
    "clamp",
    "stop_gradient",
    "repeat_rows",
    "gather_rows",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DiffArray:
    """Dense float64 array participating in reverse-mode differentiation.

    ``node_id`` is the array's position on the active tape (None for leaves
    such as parameters and constants).  ``needs_grad`` marks arrays whose
    gradient must be tracked; frozen parameters report False and therefore
    never receive a gradient buffer.
    """

    __slots__ = ("values", "grad", "frozen", "name", "node_id", "needs_grad", "_backward")

    def __init__(self, values, *, needs_grad=False, frozen=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.frozen = frozen
        self.name = name
        self.node_id = None
        self.needs_grad = needs_grad
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or ("node%s" % self.node_id if self.node_id is not None else "leaf")
        return "DiffArray(%s, shape=%s)" % (tag, list(self.values.shape))

    # operator sugar; all semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape machinery

_TAPE = None  # list of DiffArray nodes while tracking, else None


class tape:
    """Context manager opening a fresh tape.  Tapes do not nest."""

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _TAPE = []
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False


def tracking():
    return _TAPE is not None


def constant(values, name=None):
    """Array excluded from differentiation (observations, targets, ...)."""
    return DiffArray(values, needs_grad=False, name=name)


def parameter(values, name=None, frozen=False):
    """Trainable leaf.  Frozen parameters never accumulate gradients."""
    return DiffArray(values, needs_grad=not frozen, frozen=frozen, name=name)


def _as_diff(x):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


def _node(values, bwd, track):
    out = DiffArray(values)
    if track and _TAPE is not None:
        out.needs_grad = True
        out._backward = bwd
        out.node_id = len(_TAPE)
        _TAPE.append(out)
    return out


def _add_grad(x, g):
    # convention: g is freshly allocated by the caller (safe to take ownership)
    if x.grad is None:
        x.grad = g
    else:
        x.grad += g


def backward(loss):
    """Backward sweep from ``loss`` through the active tape.

    Seeds the loss gradient with ones and visits nodes in reverse creation
    order; creation order is topological, so each node's gradient is complete
    when its backward closure runs.
    """
    if _TAPE is None:
        raise RuntimeError("backward() requires an active tape")
    if loss.node_id is None:
        raise RuntimeError("loss is not a tape node (nothing to differentiate)")
    loss.grad = np.ones_like(loss.values)
    for i in range(loss.node_id, -1, -1):
        node = _TAPE[i]
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# broadcasting helpers (minimal, documented set)


def _bcast_kind(sa, sb):
    """Classify the (a, b) shape pair.  Returns (kind_a, kind_b).

    kind: "same" | "scalar" | "row" | "row2" | "col" describing how that
    operand is expanded against the other.  Raises ShapeError outside the
    allowed set (identical shapes, scalar-with-array, row-with-matrix,
    column-with-matrix).
    """
    if sa == sb:
        return "same", "same"
    if sa == () or sa == (1,):
        return "scalar", "same"
    if sb == () or sb == (1,):
        return "same", "scalar"
    if len(sa) == 2 and sb == (sa[1],):
        return "same", "row"
    if len(sb) == 2 and sa == (sb[1],):
        return "row", "same"
    if len(sa) == 2 and len(sb) == 2 and sb == (1, sa[1]):
        return "same", "row2"
    if len(sb) == 2 and len(sa) == 2 and sa == (1, sb[1]):
        return "row2", "same"
    if len(sa) == 2 and sb == (sa[0], 1):
        return "same", "col"
    if len(sb) == 2 and sa == (sb[0], 1):
        return "col", "same"
    raise ShapeError("incompatible shapes %s and %s" % (list(sa), list(sb)))


def _reduce_to(kind, g):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    if kind == "row":
        return g.sum(axis=0)
    if kind == "row2":
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)  # col


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_diff(a), _as_diff(b)
    ka, kb = _bcast_kind(a.values.shape, b.values.shape)
    out_vals = a.values + b.values
    track = a.needs_grad or b.needs_grad

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, _reduce_to(ka, g).copy() if ka != "same" else g.copy())
        if b.needs_grad:
            _add_grad(b, _reduce_to(kb, g).copy() if kb != "same" else g.copy())

    return _node(out_vals, bwd, track)


def sub(a, b):
    a, b = _as_diff(a), _as_diff(b)
    ka, kb = _bcast_kind(a.values.shape, b.values.shape)
    out_vals = a.values - b.values
    track = a.needs_grad or b.needs_grad

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, _reduce_to(ka, g).copy() if ka != "same" else g.copy())
        if b.needs_grad:
            _add_grad(b, -_reduce_to(kb, g))

    return _node(out_vals, bwd, track)


def neg(a):
    a = _as_diff(a)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, -g)

    return _node(-a.values, bwd, a.needs_grad)


def mul(a, b):
    a, b = _as_diff(a), _as_diff(b)
    ka, kb = _bcast_kind(a.values.shape, b.values.shape)
    out_vals = a.values * b.values
    track = a.needs_grad or b.needs_grad
    av, bv = a.values, b.values

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, _reduce_to(ka, g * bv))
        if b.needs_grad:
            _add_grad(b, _reduce_to(kb, g * av))

    return _node(out_vals, bwd, track)


def div(a, b):
    a, b = _as_diff(a), _as_diff(b)
    ka, kb = _bcast_kind(a.values.shape, b.values.shape)
    out_vals = a.values / b.values
    track = a.needs_grad or b.needs_grad
    av, bv = a.values, b.values

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, _reduce_to(ka, g / bv))
        if b.needs_grad:
            _add_grad(b, _reduce_to(kb, -g * av / (bv * bv)))

    return _node(out_vals, bwd, track)


def matmul(a, b):
    a, b = _as_diff(a), _as_diff(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            "matmul expects 2-d operands, got %s and %s"
            % (list(a.values.shape), list(b.values.shape))
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(
            "matmul inner dimensions differ: %s vs %s"
            % (list(a.values.shape), list(b.values.shape))
        )
    out_vals = a.values @ b.values
    track = a.needs_grad or b.needs_grad
    av, bv = a.values, b.values

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g @ bv.T)
        if b.needs_grad:
            _add_grad(b, av.T @ g)

    return _node(out_vals, bwd, track)


def concat(parts, axis=-1):
    parts = [_as_diff(p) for p in parts]
    nd = parts[0].values.ndim
    ax = axis % nd
    base = list(parts[0].values.shape)
    for p in parts[1:]:
        s = list(p.values.shape)
        if len(s) != nd or any(s[i] != base[i] for i in range(nd) if i != ax):
            raise ShapeError("concat shapes disagree off axis %d: %s vs %s" % (ax, base, s))
    out_vals = np.concatenate([p.values for p in parts], axis=ax)
    track = any(p.needs_grad for p in parts)
    sizes = [p.values.shape[ax] for p in parts]

    def bwd(g):
        off = 0
        for p, size in zip(parts, sizes):
            if p.needs_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(off, off + size)
                _add_grad(p, g[tuple(idx)].copy())
            off += size

    return _node(out_vals, bwd, track)


def slice_last(a, start, stop):
    """Contiguous slice along the last axis."""
    a = _as_diff(a)
    out_vals = a.values[..., start:stop]
    shape = a.values.shape

    def bwd(g):
        if a.needs_grad:
            buf = np.zeros(shape)
            buf[..., start:stop] = g
            _add_grad(a, buf)

    return _node(out_vals.copy(), bwd, a.needs_grad)


def sum_(a, axis=None, keepdims=False):
    a = _as_diff(a)
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.values.shape

    def bwd(g):
        if a.needs_grad:
            if axis is None:
                _add_grad(a, np.full(shape, g))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _add_grad(a, np.broadcast_to(gg, shape).copy())

    return _node(np.asarray(out_vals), bwd, a.needs_grad)


def mean_(a, axis=None, keepdims=False):
    a = _as_diff(a)
    out_vals = a.values.mean(axis=axis, keepdims=keepdims)
    shape = a.values.shape
    n = a.values.size if axis is None else shape[axis]

    def bwd(g):
        if a.needs_grad:
            if axis is None:
                _add_grad(a, np.full(shape, g / n))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _add_grad(a, np.broadcast_to(gg / n, shape).copy())

    return _node(np.asarray(out_vals), bwd, a.needs_grad)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    a = _as_diff(a)
    out_vals = np.exp(a.values)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * out_vals)

    return _node(out_vals, bwd, a.needs_grad)


def log(a):
    a = _as_diff(a)
    out_vals = np.log(a.values)
    av = a.values

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g / av)

    return _node(out_vals, bwd, a.needs_grad)


def sqrt(a):
    a = _as_diff(a)
    out_vals = np.sqrt(a.values)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g / (2.0 * out_vals))

    return _node(out_vals, bwd, a.needs_grad)


def tanh(a):
    a = _as_diff(a)
    out_vals = np.tanh(a.values)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * (1.0 - out_vals * out_vals))

    return _node(out_vals, bwd, a.needs_grad)


def _sigmoid_vals(x):
    # sigmoid(x) = 0.5 tanh(x/2) + 0.5: stable on both tails, few passes
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def sigmoid(a):
    a = _as_diff(a)
    out_vals = _sigmoid_vals(a.values)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * out_vals * (1.0 - out_vals))

    return _node(out_vals, bwd, a.needs_grad)


def relu(a):
    a = _as_diff(a)
    out_vals = np.maximum(a.values, 0.0)
    mask = a.values > 0

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * mask)

    return _node(out_vals, bwd, a.needs_grad)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu_vals(x):
    """tanh-form GELU; returns (value, cached tanh) so the backward pass
    needs no second transcendental."""
    inner = x * x
    inner *= _GELU_C * _GELU_A
    inner += _GELU_C
    inner *= x
    t = np.tanh(inner)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def _gelu_grad(x, t):
    a = x * x
    a *= 3.0 * _GELU_A
    a += 1.0
    a *= _GELU_C
    a *= x
    b = t * t
    np.subtract(1.0, b, out=b)
    a *= b
    a += t
    a += 1.0
    a *= 0.5
    return a


def gelu(a):
    """Gaussian-error linear unit (tanh form)."""
    a = _as_diff(a)
    av = a.values
    out_vals, t = _gelu_vals(av)

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * _gelu_grad(av, t))

    return _node(out_vals, bwd, a.needs_grad)


def geglu(a):
    """Gated linear unit with GELU gate: split the last axis evenly into
    value and gate halves, return value * GELU(gate)."""
    a = _as_diff(a)
    last = a.values.shape[-1]
    if last % 2 != 0:
        raise ShapeError("geglu needs an even last dimension, got %d" % last)
    m = last // 2
    av = a.values[..., :m]
    gv = a.values[..., m:]
    gact, t = _gelu_vals(gv)
    out_vals = av * gact

    def bwd(g):
        if a.needs_grad:
            buf = np.concatenate([g * gact, g * av * _gelu_grad(gv, t)], axis=-1)
            _add_grad(a, buf)

    return _node(out_vals, bwd, a.needs_grad)


def clamp(a, lo=None, hi=None):
    """Elementwise clamp with pass-through gradient strictly inside the range."""
    a = _as_diff(a)
    out_vals = np.clip(a.values, lo, hi)
    inside = np.ones(a.values.shape, dtype=bool)
    if lo is not None:
        inside &= a.values > lo
    if hi is not None:
        inside &= a.values < hi
    # points exactly at a bound keep the upstream gradient (subgradient choice)
    at_bound = (a.values == out_vals) & ~inside

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * (inside | at_bound))

    return _node(out_vals, bwd, a.needs_grad)


def stop_gradient(a):
    a = _as_diff(a)
    return DiffArray(a.values.copy())


# ---------------------------------------------------------------------------
# fused composites (hot paths; analytic backward, verified by grad_check)


def affine(x, w, b):
    """x @ w + b with the bias row-broadcast."""
    x, w, b = _as_diff(x), _as_diff(w), _as_diff(b)
    if x.values.ndim != 2 or x.values.shape[1] != w.values.shape[0]:
        raise ShapeError(
            "affine input %s does not match weight %s"
            % (list(x.values.shape), list(w.values.shape))
        )
    out_vals = x.values @ w.values + b.values
    track = x.needs_grad or w.needs_grad or b.needs_grad
    xv, wv = x.values, w.values

    def bwd(g):
        if x.needs_grad:
            _add_grad(x, g @ wv.T)
        if w.needs_grad:
            _add_grad(w, xv.T @ g)
        if b.needs_grad:
            _add_grad(b, g.sum(axis=0))

    return _node(out_vals, bwd, track)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    x, gamma, beta = _as_diff(x), _as_diff(gamma), _as_diff(beta)
    n = x.values.shape[-1]
    if n < 2:
        raise ShapeError("layernorm needs last-dimension size >= 2, got %d" % n)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_vals = xhat * gamma.values + beta.values
    track = x.needs_grad or gamma.needs_grad or beta.needs_grad
    gv = gamma.values

    def bwd(g):
        if gamma.needs_grad:
            _add_grad(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.needs_grad:
            _add_grad(beta, g.reshape(-1, n).sum(axis=0))
        if x.needs_grad:
            gy = g * gv
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _add_grad(x, inv * (gy - m1 - xhat * m2))

    return _node(out_vals, bwd, track)


def gru_cell(x, h, w_ih, b_ih, w_hh, b_hh):
    """Single GRU step; gate layout along the last axis is (reset, update, new).

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        u = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - u) * n + u * h

    With all weights and biases zero this reduces to h' = 0.5 * h.
    """
    x, h = _as_diff(x), _as_diff(h)
    w_ih, b_ih, w_hh, b_hh = map(_as_diff, (w_ih, b_ih, w_hh, b_hh))
    d = h.values.shape[-1]
    if w_ih.values.shape != (x.values.shape[-1], 3 * d):
        raise ShapeError(
            "gru_cell input weight %s does not match input %s / hidden %d"
            % (list(w_ih.values.shape), list(x.values.shape), d)
        )
    gi = x.values @ w_ih.values + b_ih.values
    gh = h.values @ w_hh.values + b_hh.values
    r = _sigmoid_vals(gi[:, :d] + gh[:, :d])
    u = _sigmoid_vals(gi[:, d : 2 * d] + gh[:, d : 2 * d])
    hn = gh[:, 2 * d :]
    n_pre = gi[:, 2 * d :] + r * hn
    n = np.tanh(n_pre)
    out_vals = (1.0 - u) * n + u * h.values
    track = any(t.needs_grad for t in (x, h, w_ih, b_ih, w_hh, b_hh))
    xv, hv = x.values, h.values

    def bwd(g):
        dn = g * (1.0 - u)
        du = g * (hv - n)
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dhn = dn_pre * r
        du_pre = du * u * (1.0 - u)
        dr_pre = dr * r * (1.0 - r)
        dgi = np.concatenate([dr_pre, du_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, du_pre, dhn], axis=1)
        if x.needs_grad:
            _add_grad(x, dgi @ w_ih.values.T)
        if w_ih.needs_grad:
            _add_grad(w_ih, xv.T @ dgi)
        if b_ih.needs_grad:
            _add_grad(b_ih, dgi.sum(axis=0))
        if h.needs_grad:
            _add_grad(h, g * u + dgh @ w_hh.values.T)
        if w_hh.needs_grad:
            _add_grad(w_hh, hv.T @ dgh)
        if b_hh.needs_grad:
            _add_grad(b_hh, dgh.sum(axis=0))

    return _node(out_vals, bwd, track)


def expert_adapter(x, ln_g, ln_b, w1, b1, w2, b2, scale, eps=1e-5):
    """Fused residual-adapter body: LayerNorm -> GEGLU -> Linear -> LayerScale.

    out = ((u * GELU(v)) @ w2 + b2) * scale  where  [u; v] splits
    (layernorm(x) * ln_g + ln_b) @ w1 + b1 evenly.  With scale = 0 the output
    is exactly zero.  One tape node; backward is analytic.
    """
    args = [_as_diff(t) for t in (x, ln_g, ln_b, w1, b1, w2, b2, scale)]
    x, ln_g, ln_b, w1, b1, w2, b2, scale = args
    n = x.values.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y1 = xhat * ln_g.values + ln_b.values
    a1 = y1 @ w1.values + b1.values
    m = a1.shape[-1] // 2
    u = a1[:, :m]
    v = a1[:, m:]
    gact, t_v = _gelu_vals(v)
    q = u * gact
    a2 = q @ w2.values + b2.values
    out_vals = a2 * scale.values
    track = any(t.needs_grad for t in args)

    def bwd(g):
        if scale.needs_grad:
            _add_grad(scale, (g * a2).sum(axis=0))
        da2 = g * scale.values
        if b2.needs_grad:
            _add_grad(b2, da2.sum(axis=0))
        if w2.needs_grad:
            _add_grad(w2, q.T @ da2)
        dq = da2 @ w2.values.T
        du = dq * gact
        dv = dq * u * _gelu_grad(v, t_v)
        da1 = np.concatenate([du, dv], axis=1)
        if b1.needs_grad:
            _add_grad(b1, da1.sum(axis=0))
        if w1.needs_grad:
            _add_grad(w1, y1.T @ da1)
        dy1 = da1 @ w1.values.T
        if ln_b.needs_grad:
            _add_grad(ln_b, dy1.sum(axis=0))
        if ln_g.needs_grad:
            _add_grad(ln_g, (dy1 * xhat).sum(axis=0))
        if x.needs_grad:
            dxh = dy1 * ln_g.values
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
            _add_grad(x, inv * (dxh - m1 - xhat * m2))

    return _node(out_vals, bwd, track)


def dual_adapter_residual(z, p, sem, dyn, eps=1e-5):
    """Fused residual layer: z + (1 - p) * A_sem(z) + p * A_dyn(z).

    ``sem`` and ``dyn`` are 7-tuples (ln_g, ln_b, w1, b1, w2, b2, scale) of
    the two expert adapters; ``p`` is the [n, 1] gate column.  Both adapters
    share the parameter-free normalization statistics of z, which this
    single-node form exploits.
    """
    z, p = _as_diff(z), _as_diff(p)
    sem = [_as_diff(t) for t in sem]
    dyn = [_as_diff(t) for t in dyn]
    n = z.values.shape[-1]
    mu = z.values.mean(axis=-1, keepdims=True)
    zc = z.values - mu
    var = (zc * zc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    zhat = zc * inv

    def branch_fwd(par):
        ln_g, ln_b, w1, b1, w2, b2, scale = par
        y1 = zhat * ln_g.values + ln_b.values
        a1 = y1 @ w1.values + b1.values
        m = a1.shape[-1] // 2
        u, v = a1[:, :m], a1[:, m:]
        gact, t_v = _gelu_vals(v)
        q = u * gact
        a2 = q @ w2.values + b2.values
        return y1, u, v, gact, t_v, q, a2, a2 * scale.values

    cs = branch_fwd(sem)
    cd = branch_fwd(dyn)
    pv = p.values
    out_vals = z.values + (1.0 - pv) * cs[-1] + pv * cd[-1]
    track = z.needs_grad or p.needs_grad or any(t.needs_grad for t in sem + dyn)

    def branch_bwd(par, cache, gb):
        ln_g, ln_b, w1, b1, w2, b2, scale = par
        y1, u, v, gact, t_v, q, a2, _ = cache
        if scale.needs_grad:
            _add_grad(scale, (gb * a2).sum(axis=0))
        da2 = gb * scale.values
        if b2.needs_grad:
            _add_grad(b2, da2.sum(axis=0))
        if w2.needs_grad:
            _add_grad(w2, q.T @ da2)
        dq = da2 @ w2.values.T
        da1 = np.concatenate([dq * gact, dq * u * _gelu_grad(v, t_v)], axis=1)
        if b1.needs_grad:
            _add_grad(b1, da1.sum(axis=0))
        if w1.needs_grad:
            _add_grad(w1, y1.T @ da1)
        dy1 = da1 @ w1.values.T
        if ln_b.needs_grad:
            _add_grad(ln_b, dy1.sum(axis=0))
        if ln_g.needs_grad:
            _add_grad(ln_g, (dy1 * zhat).sum(axis=0))
        return dy1 * ln_g.values

    def bwd(g):
        if p.needs_grad:
            _add_grad(p, (g * (cd[-1] - cs[-1])).sum(axis=-1, keepdims=True))
        dzh = branch_bwd(sem, cs, g * (1.0 - pv)) + branch_bwd(dyn, cd, g * pv)
        if z.needs_grad:
            m1 = dzh.mean(axis=-1, keepdims=True)
            m2 = (dzh * zhat).mean(axis=-1, keepdims=True)
            _add_grad(z, g + inv * (dzh - m1 - zhat * m2))

    return _node(out_vals, bwd, track)


def gated_dual_geglu(z, p, w1cat, c1cat, w2stack, c2_sem, c2_dyn, eps=1e-5):
    """Folded fast path for the residual dual-expert layer.

    Callers pre-fold each adapter's LayerNorm affine into its first weight
    and its LayerScale into the second (see fusion.fold_layer), then
    concatenate: w1cat columns are [u_sem | u_dyn | v_sem | v_dyn], w2stack
    rows are [sem; dyn].  This computes

        z + (1-p) * A_sem(z) + p * A_dyn(z)

    in two matmuls and one GELU regardless of the expert count per layer.
    Bit-exactly z when both folded second-stage weights and biases are zero.
    """
    args = [_as_diff(t) for t in (z, p, w1cat, c1cat, w2stack, c2_sem, c2_dyn)]
    z, p, w1cat, c1cat, w2stack, c2_sem, c2_dyn = args
    n = z.values.shape[-1]
    m2 = w2stack.values.shape[0]  # 2 * d_adapter
    m = m2 // 2
    mu = z.values.mean(axis=-1, keepdims=True)
    zc = z.values - mu
    var = (zc * zc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    zhat = zc * inv
    a1 = zhat @ w1cat.values + c1cat.values
    u = a1[:, :m2]
    v = a1[:, m2:]
    gact, t_v = _gelu_vals(v)
    q_raw = u * gact
    pv = p.values
    one_m = 1.0 - pv
    q_w = np.empty_like(q_raw)
    np.multiply(q_raw[:, :m], one_m, out=q_w[:, :m])
    np.multiply(q_raw[:, m:], pv, out=q_w[:, m:])
    core = q_w @ w2stack.values
    out_vals = z.values + core
    out_vals += one_m * c2_sem.values
    out_vals += pv * c2_dyn.values
    track = any(t.needs_grad for t in args)

    def bwd(g):
        if c2_sem.needs_grad:
            _add_grad(c2_sem, (g * one_m).sum(axis=0))
        if c2_dyn.needs_grad:
            _add_grad(c2_dyn, (g * pv).sum(axis=0))
        if w2stack.needs_grad:
            _add_grad(w2stack, q_w.T @ g)
        dq_w = g @ w2stack.values.T
        if p.needs_grad:
            dp = (g * (c2_dyn.values - c2_sem.values)).sum(axis=-1, keepdims=True)
            dp += (dq_w[:, m:] * q_raw[:, m:]).sum(axis=-1, keepdims=True)
            dp -= (dq_w[:, :m] * q_raw[:, :m]).sum(axis=-1, keepdims=True)
            _add_grad(p, dp)
        dq = np.empty_like(dq_w)
        np.multiply(dq_w[:, :m], one_m, out=dq[:, :m])
        np.multiply(dq_w[:, m:], pv, out=dq[:, m:])
        da1 = np.concatenate([dq * gact, dq * u * _gelu_grad(v, t_v)], axis=1)
        if c1cat.needs_grad:
            _add_grad(c1cat, da1.sum(axis=0, keepdims=True))
        if w1cat.needs_grad:
            _add_grad(w1cat, zhat.T @ da1)
        if z.needs_grad:
            dzh = da1 @ w1cat.values.T
            m1 = dzh.mean(axis=-1, keepdims=True)
            mz = (dzh * zhat).mean(axis=-1, keepdims=True)
            _add_grad(z, g + inv * (dzh - m1 - zhat * mz))

    return _node(out_vals, bwd, track)


def squash_to(a, lo, hi):
    """lo + (hi - lo) * sigmoid(a): smooth map into the open interval (lo, hi)."""
    a = _as_diff(a)
    sig = _sigmoid_vals(a.values)
    out_vals = lo + (hi - lo) * sig

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g * ((hi - lo) * sig * (1.0 - sig)))

    return _node(out_vals, bwd, a.needs_grad)


def gauss_sample(mean, log_std, eps_draw):
    """Reparameterized draw mean + exp(log_std) * eps as one node."""
    mean, log_std = _as_diff(mean), _as_diff(log_std)
    std = np.exp(log_std.values)
    out_vals = mean.values + std * eps_draw
    track = mean.needs_grad or log_std.needs_grad

    def bwd(g):
        if mean.needs_grad:
            _add_grad(mean, g.copy())
        if log_std.needs_grad:
            _add_grad(log_std, g * std * eps_draw)

    return _node(out_vals, bwd, track)


def kl_rows_fused(mp, lp, mq, lq):
    """Row-wise diagonal-Gaussian KL(p || q) summed over the event axis.

    Per coordinate: (lq - lp) + 0.5 exp(2(lp - lq)) + 0.5 (mp - mq)^2
    exp(-2 lq) - 0.5.  Returns [m, 1] for matrix inputs, scalar for vectors.
    """
    mp, lp, mq, lq = map(_as_diff, (mp, lp, mq, lq))
    ratio = np.exp(2.0 * (lp.values - lq.values))
    inv_qvar = np.exp(-2.0 * lq.values)
    dm = mp.values - mq.values
    quad = dm * dm * inv_qvar
    per = (lq.values - lp.values) + 0.5 * (ratio + quad) - 0.5
    if per.ndim <= 1:
        out_vals = np.asarray(per.sum())
    else:
        out_vals = per.sum(axis=-1, keepdims=True)
    track = any(t.needs_grad for t in (mp, lp, mq, lq))

    def bwd(g):
        gb = g if per.ndim <= 1 else np.broadcast_to(g, per.shape)
        if mp.needs_grad:
            _add_grad(mp, gb * dm * inv_qvar)
        if mq.needs_grad:
            _add_grad(mq, -gb * dm * inv_qvar)
        if lp.needs_grad:
            _add_grad(lp, gb * (ratio - 1.0))
        if lq.needs_grad:
            _add_grad(lq, gb * (1.0 - ratio - quad))

    return _node(out_vals, bwd, track)


def l2_normalize(x, eps=1e-12):
    """Scale each row to unit Euclidean norm."""
    x = _as_diff(x)
    q = (x.values * x.values).sum(axis=-1, keepdims=True)
    s = np.sqrt(q + eps)
    out_vals = x.values / s

    def bwd(g):
        if x.needs_grad:
            dot = (g * out_vals).sum(axis=-1, keepdims=True)
            _add_grad(x, (g - out_vals * dot) / s)

    return _node(out_vals, bwd, x.needs_grad)


def cosine_rows(a, b, eps=1e-8):
    """Row-wise cosine similarity of two [m, d] arrays -> [m, 1].

    Rows where either operand has near-zero norm (< eps) yield similarity 0
    with zero gradient; the number of such rows is returned as a flag count
    so callers can surface the degeneracy in metrics.
    """
    a, b = _as_diff(a), _as_diff(b)
    if a.values.shape != b.values.shape or a.values.ndim != 2:
        raise ShapeError(
            "cosine_rows expects matching 2-d shapes, got %s and %s"
            % (list(a.values.shape), list(b.values.shape))
        )
    av, bv = a.values, b.values
    na = np.sqrt((av * av).sum(axis=1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=1, keepdims=True))
    ok = (na >= eps) & (nb >= eps)
    degenerate = int((~ok).sum())
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)
    track = a.needs_grad or b.needs_grad

    def bwd(g):
        gm = g * ok
        if a.needs_grad:
            _add_grad(a, gm * (bv / (na_s * nb_s) - av * (cos / (na_s * na_s))))
        if b.needs_grad:
            _add_grad(b, gm * (av / (na_s * nb_s) - bv * (cos / (nb_s * nb_s))))

    return _node(cos, bwd, track), degenerate


def cosine_sim(a, b, eps=1e-8):
    """Cosine similarity of two vectors -> scalar DiffArray (degenerate -> 0)."""
    a, b = _as_diff(a), _as_diff(b)
    if a.values.ndim != 1 or a.values.shape != b.values.shape:
        raise ShapeError(
            "cosine_sim expects two equal-length vectors, got %s and %s"
            % (list(a.values.shape), list(b.values.shape))
        )
    rows, flag = cosine_rows(
        _reshape_leaf(a, (1, a.values.shape[0])),
        _reshape_leaf(b, (1, b.values.shape[0])),
        eps=eps,
    )
    return sum_(rows), flag


def _reshape_leaf(a, shape):
    """Reshape without copying the graph: forwards values, routes gradient back."""
    a = _as_diff(a)
    out_vals = a.values.reshape(shape)
    orig = a.values.shape

    def bwd(g):
        if a.needs_grad:
            _add_grad(a, g.reshape(orig).copy())

    return _node(out_vals, bwd, a.needs_grad)


def repeat_rows(x, k):
    """Repeat each row of a [m, d] array k times -> [m*k, d]."""
    x = _as_diff(x)
    m, d = x.values.shape
    out_vals = np.repeat(x.values, k, axis=0)

    def bwd(g):
        if x.needs_grad:
            _add_grad(x, g.reshape(m, k, d).sum(axis=1))

    return _node(out_vals, bwd, x.needs_grad)


def slice_rows(a, start, stop):
    """Contiguous slice along the first axis."""
    a = _as_diff(a)
    out_vals = a.values[start:stop]
    shape = a.values.shape

    def bwd(g):
        if a.needs_grad:
            buf = np.zeros(shape)
            buf[start:stop] = g
            _add_grad(a, buf)

    return _node(out_vals.copy(), bwd, a.needs_grad)


def tile_rows(x, k):
    """Stack k copies of a [m, d] array -> [k*m, d] (block repeat)."""
    x = _as_diff(x)
    m, d = x.values.shape
    out_vals = np.tile(x.values, (k, 1))

    def bwd(g):
        if x.needs_grad:
            _add_grad(x, g.reshape(k, m, d).sum(axis=0))

    return _node(out_vals, bwd, x.needs_grad)


def gather_rows(x, idx):
    """Select rows by integer index -> [len(idx), d]; backward scatter-adds."""
    x = _as_diff(x)
    idx = np.asarray(idx, dtype=np.intp)
    out_vals = x.values[idx]
    shape = x.values.shape

    def bwd(g):
        if x.needs_grad:
            buf = np.zeros(shape)
            np.add.at(buf, idx, g)
            _add_grad(x, buf)

    return _node(out_vals.copy(), bwd, x.needs_grad)
