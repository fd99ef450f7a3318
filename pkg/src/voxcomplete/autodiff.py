"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly the operator set the completion model needs: elementwise
math, restricted broadcasting (explicit broadcast_to; binary ops demand
equal shapes or a scalar operand), reductions, shape moves, gather,
linear / 3D conv / transposed conv, layer norm, the zero-order-hold
discretization factor, and the sequential linear recurrence whose
backward is a hand-derived reverse-time adjoint recurrence rather than a
replayed tape. Training runs at float64 so finite-difference gates stay
tight.

Graphs are plain DAGs of DiffNode; backward() visits each node exactly
once in reverse topological order and accumulates vector-Jacobian
products into .grad.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DiffNode",
    "constant",
    "parameter",
    "backward",
    "grad_check",
]

Array = np.ndarray


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class DiffNode:
    """A value in the computation graph: data, grad, and parent links."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        # Nodes that cannot receive gradient drop their history so dead
        # subgraphs free immediately.
        self.parents = tuple(parents) if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"DiffNode(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; plain numbers/arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def constant(data) -> DiffNode:
    return DiffNode(data, requires_grad=False)


def parameter(data) -> DiffNode:
    return DiffNode(np.array(data, dtype=np.float64), requires_grad=True)


def _wrap(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else constant(x)


def _check_binary_shapes(a: DiffNode, b: DiffNode):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}; use broadcast_to")


def _reduce_to(grad: Array, shape) -> Array:
    """Collapse a gradient onto a scalar operand."""
    if shape == ():
        return np.asarray(grad.sum())
    return grad


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b)
    return DiffNode(
        a.data + b.data,
        parents=(a, b),
        vjp=lambda g: (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b)
    return DiffNode(
        a.data - b.data,
        parents=(a, b),
        vjp=lambda g: (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(-g, b.shape) if b.requires_grad else None,
        ),
    )


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b)
    return DiffNode(
        a.data * b.data,
        parents=(a, b),
        vjp=lambda g: (
            _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b)
    inv = 1.0 / b.data
    return DiffNode(
        a.data * inv,
        parents=(a, b),
        vjp=lambda g: (
            _reduce_to(g * inv, a.shape) if a.requires_grad else None,
            _reduce_to(-g * a.data * inv * inv, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a: DiffNode) -> DiffNode:
    return DiffNode(-a.data, parents=(a,), vjp=lambda g: (-g,))


def exp(a: DiffNode) -> DiffNode:
    out = np.exp(a.data)
    return DiffNode(out, parents=(a,), vjp=lambda g: (g * out,))


def log(a: DiffNode) -> DiffNode:
    return DiffNode(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a: DiffNode) -> DiffNode:
    out = np.sqrt(a.data)
    return DiffNode(out, parents=(a,), vjp=lambda g: (g * (0.5 / out),))


def absolute(a: DiffNode) -> DiffNode:
    """abs with subgradient sign(x); sign(0) = 0."""
    return DiffNode(np.abs(a.data), parents=(a,), vjp=lambda g: (g * np.sign(a.data),))


def tanh(a: DiffNode) -> DiffNode:
    out = np.tanh(a.data)
    return DiffNode(out, parents=(a,), vjp=lambda g: (g * (1.0 - out * out),))


def sigmoid(a: DiffNode) -> DiffNode:
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return DiffNode(out, parents=(a,), vjp=lambda g: (g * out * (1.0 - out),))


def softplus(a: DiffNode) -> DiffNode:
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0, sig, 1.0 - sig)
    return DiffNode(out, parents=(a,), vjp=lambda g: (g * sig,))


def zoh_factor(delta: DiffNode, a: DiffNode) -> DiffNode:
    """(exp(delta*a) - 1) / a, the input-side zero-order-hold scale.

    Evaluated through a series when |delta*a| < 1e-6 so the a -> 0 limit
    (= delta) is exact; both branches share analytic derivatives
    d/ddelta = exp(delta*a), d/da = delta^2 * g'(delta*a) with
    g(x) = (e^x - 1)/x.
    """
    delta, a = _wrap(delta), _wrap(a)
    _check_binary_shapes(delta, a)
    x = delta.data * a.data
    small = np.abs(x) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.expm1(x) / a.data
    series = delta.data * (1.0 + x / 2.0 + x * x / 6.0)
    val = np.where(small, series, exact)
    ex = np.exp(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        gp_exact = (x * ex - ex + 1.0) / (x * x)
    gp_series = 0.5 + x / 3.0 + x * x / 8.0
    gprime = np.where(np.abs(x) < 1e-4, gp_series, gp_exact)
    d_delta = ex
    d_a = delta.data * delta.data * gprime
    return DiffNode(
        val,
        parents=(delta, a),
        vjp=lambda g: (
            _reduce_to(g * d_delta, delta.shape),
            _reduce_to(g * d_a, a.shape),
        ),
    )


# ---------------------------------------------------------------------------
# Shape, reduction, and indexing operations
# ---------------------------------------------------------------------------


def broadcast_to(a: DiffNode, shape) -> DiffNode:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        nd = len(shape) - a.data.ndim
        reduce_axes = tuple(range(nd)) + tuple(
            i + nd for i, s in enumerate(a.data.shape) if s == 1 and shape[i + nd] != 1
        )
        ga = g.sum(axis=reduce_axes, keepdims=False) if reduce_axes else g
        return (ga.reshape(a.data.shape),)

    return DiffNode(out.copy(), parents=(a,), vjp=vjp)


def reshape(a: DiffNode, shape) -> DiffNode:
    shape = tuple(shape)
    return DiffNode(
        a.data.reshape(shape),
        parents=(a,),
        vjp=lambda g: (g.reshape(a.data.shape),),
    )


def transpose(a: DiffNode, axes) -> DiffNode:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return DiffNode(
        np.ascontiguousarray(a.data.transpose(axes)),
        parents=(a,),
        vjp=lambda g: (g.transpose(inv),),
    )


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: DiffNode, axis=None) -> DiffNode:
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis)

    def vjp(g):
        # Broadcast views are fine as gradients: consumers only read/add.
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        kd = list(a.data.shape)
        for ax in axis:
            kd[ax] = 1
        return (np.broadcast_to(g.reshape(kd), a.data.shape),)

    return DiffNode(out, parents=(a,), vjp=vjp)


def reduce_mean(a: DiffNode, axis=None) -> DiffNode:
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        n = a.data.size
    else:
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    s = reduce_sum(a, axis)
    return mul(s, constant(1.0 / n))


def concat(nodes, axis: int) -> DiffNode:
    nodes = [_wrap(n) for n in nodes]
    sizes = [n.data.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return DiffNode(
        np.concatenate([n.data for n in nodes], axis=axis),
        parents=tuple(nodes),
        vjp=vjp,
    )


def take(a: DiffNode, indices: np.ndarray, axis: int) -> DiffNode:
    """Gather along an axis; backward scatters (adds when indices repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    # With unique indices the scatter is a plain (fast) assignment;
    # np.add.at is only needed to accumulate repeated rows.
    unique = len(np.unique(idx)) == idx.size

    def vjp(g):
        ga = np.zeros_like(a.data)
        where = (slice(None),) * axis + (idx,)
        if unique:
            ga[where] = g
        else:
            np.add.at(ga, where, g)
        return (ga,)

    return DiffNode(np.take(a.data, idx, axis=axis), parents=(a,), vjp=vjp)


# ---------------------------------------------------------------------------
# Linear algebra and network layers
# ---------------------------------------------------------------------------


def linear(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None) -> DiffNode:
    """x[..., in] @ weight[out, in]^T (+ bias[out])."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ValueError(f"linear: in dim {x.data.shape[-1]} != {weight.data.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gx = (g2 @ weight.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return DiffNode(out, parents=parents, vjp=vjp)


def layer_norm(x: DiffNode, gain: DiffNode, bias: DiffNode, eps: float = 1e-5) -> DiffNode:
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps sits inside the square root. The last axis must have >= 2 entries
    for the variance to mean anything.
    """
    c = x.data.shape[-1]
    if c < 2:
        raise ValueError("layer_norm needs at least 2 channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g):
        g_xhat = g * gain.data
        m1 = g_xhat.mean(axis=-1, keepdims=True)
        m2 = (g_xhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (g_xhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return DiffNode(out, parents=(x, gain, bias), vjp=vjp)


# --- 3D convolution plumbing (cross-correlation; kernels are not flipped) ---


def _conv3_out_shape(sp, k, stride, pad):
    return tuple((s + 2 * pad - k) // stride + 1 for s in sp)


def _im2col(x: Array, k: int, stride: int, pad: int) -> Array:
    """(C, D, H, W) -> (P, C*k^3) patch matrix, P = prod(out spatial)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    c, do, ho, wo = win.shape[:4]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(do * ho * wo, c * k**3)
    return np.ascontiguousarray(cols)


def _conv3_fwd(x: Array, w: Array, stride: int, pad: int, cols: Array | None = None) -> Array:
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != c_in:
        raise ValueError(f"conv3: input channels {x.shape[0]} != kernel {c_in}")
    out_sp = _conv3_out_shape(x.shape[1:], k, stride, pad)
    if cols is None:
        cols = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(y.T.reshape((c_out,) + out_sp))


def _conv3_grad_w(gy: Array, x: Array, k: int, stride: int, pad: int,
                  cols: Array | None = None) -> Array:
    c_out = gy.shape[0]
    if cols is None:
        cols = _im2col(x, k, stride, pad)
    gw = gy.reshape(c_out, -1) @ cols
    return gw.reshape(c_out, x.shape[0], k, k, k)


def _conv3_grad_x(gy: Array, w: Array, stride: int, pad: int, x_spatial) -> Array:
    """Adjoint of _conv3_fwd wrt input; also the transposed-conv forward."""
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    do, ho, wo = gy.shape[1:]
    # (C_in*k^3, P) layout keeps both the matmul output and the scatter
    # slices contiguous-ish; no large transpose copy.
    g_cols = w.reshape(c_out, -1).T @ gy.reshape(c_out, -1)
    g_cols = g_cols.reshape(c_in, k, k, k, do, ho, wo)
    dp, hp, wp = (s + 2 * pad for s in x_spatial)
    gx = np.zeros((c_in, dp, hp, wp), dtype=gy.dtype)
    s = stride
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                gx[
                    :,
                    dz : dz + do * s : s,
                    dy : dy + ho * s : s,
                    dx : dx + wo * s : s,
                ] += g_cols[:, dz, dy, dx]
    if pad:
        gx = gx[:, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


def conv3(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None, stride: int = 1, pad: int = 0) -> DiffNode:
    """3D cross-correlation: x (C_in,D,H,W) * weight (C_out,C_in,k,k,k)."""
    k = weight.data.shape[2]
    needs_grad = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    # The patch matrix is reused by the weight gradient; keep it alive
    # only when a backward pass can happen.
    cols = _im2col(x.data, k, stride, pad)
    out = _conv3_fwd(x.data, weight.data, stride, pad, cols)
    if not needs_grad:
        cols = None
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    x_spatial = x.data.shape[1:]

    def vjp(g):
        gx = _conv3_grad_x(g, weight.data, stride, pad, x_spatial) if x.requires_grad else None
        gw = _conv3_grad_w(g, x.data, k, stride, pad, cols) if weight.requires_grad else None
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2, 3)))

    return DiffNode(out, parents=parents, vjp=vjp)


def conv3_transpose(x: DiffNode, weight: DiffNode, bias: DiffNode | None = None, stride: int = 1, pad: int = 0) -> DiffNode:
    """Transposed 3D conv (adjoint of conv3), weight (C_in,C_out,k,k,k).

    Output spatial extent is (D-1)*stride - 2*pad + k.
    """
    c_in, c_out, k = weight.data.shape[0], weight.data.shape[1], weight.data.shape[2]
    if x.data.shape[0] != c_in:
        raise ValueError(f"conv3_transpose: channels {x.data.shape[0]} != kernel {c_in}")
    out_sp = tuple((s - 1) * stride - 2 * pad + k for s in x.data.shape[1:])
    out = _conv3_grad_x(x.data, weight.data, stride, pad, out_sp)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = _conv3_fwd(g, weight.data, stride, pad)
        gw = _conv3_grad_w(x.data, g, k, stride, pad)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2, 3)))

    return DiffNode(out, parents=parents, vjp=vjp)


# ---------------------------------------------------------------------------
# Sequential linear recurrence with adjoint backward
# ---------------------------------------------------------------------------

_RECURRENCE_IMPL = None


def _recurrence_numpy(a: Array, u: Array) -> Array:
    h = np.empty_like(u)
    state = np.zeros(u.shape[1:], dtype=u.dtype)
    for t in range(u.shape[0]):
        state = a[t] * state + u[t]
        h[t] = state
    return h


def _recurrence_adjoint_numpy(a: Array, h: Array, g: Array):
    lam = np.zeros(g.shape[1:], dtype=g.dtype)
    ga = np.empty_like(a)
    gu = np.empty_like(g)
    for t in range(g.shape[0] - 1, -1, -1):
        lam = g[t] + lam
        gu[t] = lam
        ga[t] = lam * h[t - 1] if t > 0 else 0.0
        lam = lam * a[t]
    return ga, gu


def _load_recurrence_impl():
    """Prefer a numba-compiled inner loop; fall back to pure numpy."""
    global _RECURRENCE_IMPL
    if _RECURRENCE_IMPL is not None:
        return _RECURRENCE_IMPL
    try:
        from numba import njit

        @njit(cache=True)
        def fwd(a, u):
            h = np.empty_like(u)
            t_len, m = u.shape
            state = np.zeros(m, dtype=u.dtype)
            for t in range(t_len):
                for j in range(m):
                    state[j] = a[t, j] * state[j] + u[t, j]
                    h[t, j] = state[j]
            return h

        @njit(cache=True)
        def bwd(a, h, g):
            t_len, m = g.shape
            lam = np.zeros(m, dtype=g.dtype)
            ga = np.empty_like(a)
            gu = np.empty_like(g)
            for t in range(t_len - 1, -1, -1):
                for j in range(m):
                    lam[j] = g[t, j] + lam[j]
                    gu[t, j] = lam[j]
                    ga[t, j] = lam[j] * h[t - 1, j] if t > 0 else 0.0
                    lam[j] = lam[j] * a[t, j]
            return ga, gu

        # Trigger compilation once so failures downgrade immediately.
        _a = np.ones((2, 3))
        fwd(_a, _a)
        bwd(_a, _a, _a)

        def fwd_nd(a, u):
            return fwd(a.reshape(a.shape[0], -1), u.reshape(u.shape[0], -1)).reshape(u.shape)

        def bwd_nd(a, h, g):
            ga, gu = bwd(
                a.reshape(a.shape[0], -1),
                h.reshape(h.shape[0], -1),
                g.reshape(g.shape[0], -1),
            )
            return ga.reshape(a.shape), gu.reshape(g.shape)

        _RECURRENCE_IMPL = (fwd_nd, bwd_nd)
    except Exception:
        _RECURRENCE_IMPL = (_recurrence_numpy, _recurrence_adjoint_numpy)
    return _RECURRENCE_IMPL


def linear_recurrence(a: DiffNode, u: DiffNode) -> DiffNode:
    """h_t = a_t * h_{t-1} + u_t with h_{-1} = 0, along the first axis.

    Backward runs the adjoint recurrence lam_t = g_t + a_{t+1} * lam_{t+1}
    in reverse time, giving du_t = lam_t and da_t = lam_t * h_{t-1}
    without replaying the forward tape step by step.
    """
    if a.shape != u.shape:
        raise ValueError(f"recurrence shapes differ: {a.shape} vs {u.shape}")
    fwd, bwd = _load_recurrence_impl()
    h = fwd(a.data, u.data)

    def vjp(g):
        ga, gu = bwd(a.data, h, np.ascontiguousarray(g))
        return (ga, gu)

    return DiffNode(h, parents=(a, u), vjp=vjp)


# ---------------------------------------------------------------------------
# Fused selective scan: one forward pass, one adjoint pass
# ---------------------------------------------------------------------------
#
# y_l,c = sum_n h_l,c,n * c_seq_l,n + skip_c * x_l,c
# h_l,c,n = exp(s) h_{l-1,c,n} + zoh(s)/a * b_seq_l,n x_l,c,  s = delta_l,c a_c,n
#
# The fused op stores only h; everything else is recomputed during the
# reverse sweep, which runs the adjoint recurrence lam <- gh * exp(s)
# backwards in time and accumulates all six input gradients in one pass.

_SCAN_IMPL = None


def _zoh_pair(s: Array, a: Array, delta: Array):
    """(exp(s), (exp(s)-1)/a) with the small-|s| series branch."""
    ab = np.exp(s)
    small = np.abs(s) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.expm1(s) / a
    series = delta * (1.0 + s / 2.0 + s * s / 6.0)
    return ab, np.where(small, series, exact)


def _zoh_gprime(s: Array, ab: Array) -> Array:
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (s * ab - ab + 1.0) / (s * s)
    series = 0.5 + s / 3.0 + s * s / 8.0
    return np.where(np.abs(s) < 1e-4, series, exact)


def _scan_fwd_numpy(x, delta, b_seq, c_seq, a, skip):
    s = delta[:, :, None] * a[None]
    ab, zf = _zoh_pair(s, a[None], delta[:, :, None])
    u = zf * b_seq[:, None, :] * x[:, :, None]
    h = _recurrence_numpy(ab, u)
    y = np.einsum("lcn,ln->lc", h, c_seq) + skip[None] * x
    return y, h


def _scan_bwd_numpy(gy, h, x, delta, b_seq, c_seq, a, skip):
    s = delta[:, :, None] * a[None]
    ab, zf = _zoh_pair(s, a[None], delta[:, :, None])
    gprime = _zoh_gprime(s, ab)
    gh = gy[:, :, None] * c_seq[:, None, :]
    gab, gu = _recurrence_adjoint_numpy(ab, h, gh)
    bx = b_seq[:, None, :] * x[:, :, None]
    gzf = gu * bx
    gx = (gu * zf * b_seq[:, None, :]).sum(axis=2) + skip[None] * gy
    gdelta = ((gab * ab) * a[None] + gzf * ab).sum(axis=2)
    ga = ((gab * ab) * delta[:, :, None] + gzf * (delta**2)[:, :, None] * gprime).sum(axis=0)
    gb = (gu * zf * x[:, :, None]).sum(axis=1)
    gc = np.einsum("lc,lcn->ln", gy, h)
    gskip = (gy * x).sum(axis=0)
    return gx, gdelta, gb, gc, ga, gskip


def _load_scan_impl():
    global _SCAN_IMPL
    if _SCAN_IMPL is not None:
        return _SCAN_IMPL
    try:
        import math as _math

        from numba import njit

        @njit(cache=True)
        def fwd(x, delta, b_seq, c_seq, a, skip):
            seq_len, c_dim = x.shape
            n_dim = a.shape[1]
            h = np.empty((seq_len, c_dim, n_dim), dtype=x.dtype)
            y = np.empty_like(x)
            for l in range(seq_len):
                for c in range(c_dim):
                    d = delta[l, c]
                    xv = x[l, c]
                    acc = 0.0
                    for n in range(n_dim):
                        s = d * a[c, n]
                        ab = _math.exp(s)
                        if abs(s) < 1e-6:
                            zf = d * (1.0 + s / 2.0 + s * s / 6.0)
                        else:
                            zf = _math.expm1(s) / a[c, n]
                        prev = h[l - 1, c, n] if l > 0 else 0.0
                        hv = ab * prev + zf * b_seq[l, n] * xv
                        h[l, c, n] = hv
                        acc += hv * c_seq[l, n]
                    y[l, c] = acc + skip[c] * xv
            return y, h

        @njit(cache=True)
        def bwd(gy, h, x, delta, b_seq, c_seq, a, skip):
            seq_len, c_dim = x.shape
            n_dim = a.shape[1]
            lam = np.zeros((c_dim, n_dim), dtype=x.dtype)
            gx = np.empty_like(x)
            gdelta = np.empty_like(delta)
            gb = np.zeros_like(b_seq)
            gc = np.zeros_like(c_seq)
            ga = np.zeros_like(a)
            gskip = np.zeros_like(skip)
            for l in range(seq_len - 1, -1, -1):
                for c in range(c_dim):
                    gyl = gy[l, c]
                    d = delta[l, c]
                    xv = x[l, c]
                    gx_acc = skip[c] * gyl
                    gskip[c] += gyl * xv
                    gd_acc = 0.0
                    for n in range(n_dim):
                        av = a[c, n]
                        gh = gyl * c_seq[l, n] + lam[c, n]
                        gc[l, n] += gyl * h[l, c, n]
                        s = d * av
                        ab = _math.exp(s)
                        if abs(s) < 1e-6:
                            zf = d * (1.0 + s / 2.0 + s * s / 6.0)
                        else:
                            zf = _math.expm1(s) / av
                        if abs(s) < 1e-4:
                            gp = 0.5 + s / 3.0 + s * s / 8.0
                        else:
                            gp = (s * ab - ab + 1.0) / (s * s)
                        prev = h[l - 1, c, n] if l > 0 else 0.0
                        gab = gh * prev
                        gzf = gh * b_seq[l, n] * xv
                        gb[l, n] += gh * zf * xv
                        gx_acc += gh * zf * b_seq[l, n]
                        gd_acc += gab * ab * av + gzf * ab
                        ga[c, n] += gab * ab * d + gzf * d * d * gp
                        lam[c, n] = gh * ab
                    gdelta[l, c] = gd_acc
                    gx[l, c] = gx_acc
            return gx, gdelta, gb, gc, ga, gskip

        probe = np.ones((2, 2))
        fwd(probe, probe, probe, probe, -probe, np.ones(2))
        bwd(probe, np.ones((2, 2, 2)), probe, probe, probe, probe, -probe, np.ones(2))
        _SCAN_IMPL = (fwd, bwd)
    except Exception:
        _SCAN_IMPL = (_scan_fwd_numpy, _scan_bwd_numpy)
    return _SCAN_IMPL


def selective_scan(x: DiffNode, delta: DiffNode, b_seq: DiffNode, c_seq: DiffNode,
                   a: DiffNode, skip: DiffNode) -> DiffNode:
    """Input-selective diagonal state-space scan over an (L, C) sequence.

    delta must already be positive (apply softplus upstream); a is the
    (C, N) diagonal, b_seq/c_seq are the per-step (L, N) projections and
    skip the per-channel passthrough.
    """
    seq_len, c_dim = x.shape
    n_dim = a.shape[1]
    if delta.shape != (seq_len, c_dim) or b_seq.shape != (seq_len, n_dim) \
            or c_seq.shape != (seq_len, n_dim) or a.shape[0] != c_dim \
            or skip.shape != (c_dim,):
        raise ValueError("selective_scan: inconsistent operand shapes")
    fwd, bwd = _load_scan_impl()
    args = (x.data, delta.data, b_seq.data, c_seq.data, a.data, skip.data)
    y, h = fwd(*args)

    def vjp(g):
        return bwd(np.ascontiguousarray(g), h, *args)

    return DiffNode(y, parents=(x, delta, b_seq, c_seq, a, skip), vjp=vjp)


# ---------------------------------------------------------------------------
# Backward pass and the finite-difference gate
# ---------------------------------------------------------------------------


def _toposort(root: DiffNode) -> list[DiffNode]:
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node.parents):
            stack.append((node, i + 1))
            stack.append((node.parents[i], 0))
        else:
            order.append(node)
    return order


def backward(loss: DiffNode) -> None:
    """Accumulate d loss / d leaf into .grad for every requires_grad leaf."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                # vjps hand out fresh arrays (or read-only views); no copy.
                p.grad = g if isinstance(g, np.ndarray) else _asarray(g)
            else:
                p.grad = p.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    f maps the list of parameter DiffNodes to a scalar DiffNode. Error is
    max_i |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12) over every entry of
    every parameter.
    """
    params = list(params)
    zero_grads(params)
    loss = f(params)
    backward(loss)
    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        g_ad = np.broadcast_to(g_ad, p.data.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params).data)
            flat[i] = orig - h
            f_minus = float(f(params).data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_a = float(g_ad.reshape(-1)[i])
            err = abs(g_a - g_fd) / (abs(g_a) + abs(g_fd) + 1e-12)
            worst = max(worst, err)
    return worst
