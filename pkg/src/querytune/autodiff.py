"""Reverse-mode automatic differentiation over numpy arrays.

Every operation in this module accepts either plain ``np.ndarray`` inputs or
:class:`Var` nodes.  With plain arrays the functions are ordinary numpy code
and return arrays; as soon as one input is a :class:`Var`, the result is a
:class:`Var` carrying the closures needed for the backward sweep.  The same
model code therefore serves both the cheap inference path and the
differentiated path, and both compute bit-identical values.

Gradient flow is only ever requested with respect to a handful of leaf
tensors (the personalization parameters), so the tape keeps full gradients
for every node it touches; at the scale of this package that is never a
memory concern.

All floating point work is float64.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node on the tape: a value plus vjp links to its parents."""

    # Keep numpy from trying to broadcast ndarray (op) Var elementwise.
    __array_ufunc__ = None
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)


def value(x):
    """The plain ndarray behind ``x``, whether or not it is on the tape."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_var(x) -> bool:
    return isinstance(x, Var)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g, bv.shape)))
    return Var(out, tuple(parents))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(-g, bv.shape)))
    return Var(out, tuple(parents))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return Var(out, tuple(parents))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g / bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return Var(out, tuple(parents))


def power(x, p: float):
    """x**p for a constant exponent p."""
    xv = value(x)
    out = xv**p
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g: g * p * xv ** (p - 1.0)),))


def exp(x):
    xv = value(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g: g * out),))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return Var(out, tuple(parents))


# ---------------------------------------------------------------------------
# shape primitives


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    orig = xv.shape
    return Var(out, ((x, lambda g: g.reshape(orig)),))


def transpose(x, axes):
    xv = value(x)
    out = np.transpose(xv, axes)
    if not isinstance(x, Var):
        return out
    inv = np.argsort(axes)
    return Var(out, ((x, lambda g: np.transpose(g, inv)),))


def swapaxes(x, a, b):
    axes = list(range(value(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Var) for x in xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            lo, hi = offsets[i], offsets[i + 1]

            def vjp(g, lo=lo, hi=hi):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                return g[tuple(index)]

            parents.append((x, vjp))
    return Var(out, tuple(parents))


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False):
    xv = value(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % len(shape) for a in axes):
                gg = np.expand_dims(gg, ax)
        return np.broadcast_to(gg, shape).copy()

    return Var(out, ((x, vjp),))


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    if axis is None:
        n = xv.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([xv.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def _np_sigmoid(x):
    # tanh form: stable for any magnitude, single vectorized pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    xv = value(x)
    out = _np_sigmoid(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g: g * out * (1.0 - out)),))


def silu(x):
    xv = value(x)
    s = _np_sigmoid(xv)
    out = xv * s
    if not isinstance(x, Var):
        return out
    local = s + out * (1.0 - s)
    return Var(out, ((x, lambda g: g * local),))


def softmax(x, axis=-1):
    """Numerically stable softmax.

    The max shift is treated as a constant: softmax(x - c) == softmax(x) for
    any constant c, so the gradient is unaffected.
    """
    m = value(x).max(axis=axis, keepdims=True)
    e = exp(sub(x, m))
    return div(e, sum_(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# gather / scatter


def take(x, idx):
    """Rows of ``x`` along axis 0 at integer index array ``idx``."""
    xv = value(x)
    idx = np.asarray(idx)
    out = xv[idx]
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return z

    return Var(out, ((x, vjp),))


def put_row(table, idx: int, row):
    """Copy of ``table`` with row ``idx`` replaced by ``row``."""
    tv, rv = value(table), value(row)
    out = tv.copy()
    out[idx] = rv
    if not (isinstance(table, Var) or isinstance(row, Var)):
        return out
    parents = []
    if isinstance(table, Var):

        def vjp_table(g):
            gt = g.copy()
            gt[idx] = 0.0
            return gt

        parents.append((table, vjp_table))
    if isinstance(row, Var):
        parents.append((row, lambda g: g[idx].copy()))
    return Var(out, tuple(parents))


# ---------------------------------------------------------------------------
# spatial primitives (NHWC layout)


def _conv_geometry(hp, wp, k, stride):
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    return ho, wo


def _im2col_index(hp, wp, k, stride):
    """Flat padded-pixel index for each (output position, kernel offset)."""
    ho, wo = _conv_geometry(hp, wp, k, stride)
    r = (np.arange(ho) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    c = (np.arange(wo) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    flat = (r * wp + c).reshape(ho * wo * k * k)
    return flat, ho, wo


_COL_INDEX_CACHE: dict = {}
_SCATTER_INDEX_CACHE: dict = {}


def _scatter_index(bsz, hp, wp, k, stride, cin, flat):
    """Flat bin index of every im2col entry, channels interleaved (for bincount)."""
    key = (bsz, hp, wp, k, stride, cin)
    if key not in _SCATTER_INDEX_CACHE:
        pos = (np.arange(bsz)[:, None] * (hp * wp) + flat[None, :]).reshape(-1)
        _SCATTER_INDEX_CACHE[key] = (pos[:, None] * cin + np.arange(cin)[None, :]).reshape(-1)
    return _SCATTER_INDEX_CACHE[key]


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution, NHWC input, (k, k, c_in, c_out) kernel."""
    xv, wv = value(x), value(w)
    bvv = None if b is None else value(b)
    bsz, h, wdt, cin = xv.shape
    k = wv.shape[0]
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xv
    hp, wp = xp.shape[1], xp.shape[2]
    key = (hp, wp, k, stride)
    if key not in _COL_INDEX_CACHE:
        _COL_INDEX_CACHE[key] = _im2col_index(hp, wp, k, stride)
    flat, ho, wo = _COL_INDEX_CACHE[key]
    cols = xp.reshape(bsz, hp * wp, cin)[:, flat, :].reshape(bsz * ho * wo, k * k * cin)
    w2 = wv.reshape(k * k * cin, -1)
    out2 = cols @ w2
    if bvv is not None:
        out2 = out2 + bvv
    cout = w2.shape[1]
    out = out2.reshape(bsz, ho, wo, cout)
    if not (isinstance(x, Var) or isinstance(w, Var) or isinstance(b, Var)):
        return out
    parents = []
    if isinstance(x, Var):

        def vjp_x(g):
            g2 = g.reshape(bsz * ho * wo, cout)
            dcols = g2 @ w2.T
            bins = _scatter_index(bsz, hp, wp, k, stride, cin, flat)
            dxp = np.bincount(bins, weights=dcols.reshape(-1),
                              minlength=bsz * hp * wp * cin)
            dxp = dxp.reshape(bsz, hp, wp, cin)
            if pad:
                return dxp[:, pad:-pad, pad:-pad, :]
            return dxp

        parents.append((x, vjp_x))
    if isinstance(w, Var):

        def vjp_w(g):
            g2 = g.reshape(bsz * ho * wo, cout)
            return (cols.T @ g2).reshape(wv.shape)

        parents.append((w, vjp_w))
    if isinstance(b, Var):
        parents.append((b, lambda g: g.reshape(-1, cout).sum(axis=0)))
    return Var(out, tuple(parents))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of an NHWC grid."""
    xv = value(x)
    out = xv.repeat(2, axis=1).repeat(2, axis=2)
    if not isinstance(x, Var):
        return out
    bsz, h, w, c = xv.shape

    def vjp(g):
        return g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4))

    return Var(out, ((x, vjp),))


# ---------------------------------------------------------------------------
# composite normalizations


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last axis."""
    m = mean(x, axis=-1, keepdims=True)
    xc = sub(x, m)
    v = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(v, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """GroupNorm over an NHWC grid; stats over (H, W, C/groups) per group."""
    bsz, h, w, c = value(x).shape
    xg = reshape(x, (bsz, h, w, groups, c // groups))
    m = mean(xg, axis=(1, 2, 4), keepdims=True)
    xc = sub(xg, m)
    v = mean(mul(xc, xc), axis=(1, 2, 4), keepdims=True)
    inv = power(add(v, eps), -0.5)
    xn = reshape(mul(xc, inv), (bsz, h, w, c))
    return add(mul(xn, gamma), beta)


# ---------------------------------------------------------------------------
# backward sweep


def backward(root: Var, seed=None):
    """Accumulate gradients of ``root`` into every Var on its tape."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    if seed is None:
        seed = np.ones(root.value.shape)
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
