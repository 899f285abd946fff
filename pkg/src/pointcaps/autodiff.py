"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-style engine: every operation records its parents and a backward
closure on the output node. Calling ``backward()`` on a scalar runs the tape
in reverse topological order and then frees it (no higher-order gradients).
All values are 64-bit floats; elementwise binary ops accept operands of the
same shape or a scalar (explicit ``expand`` covers everything else).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or a degenerate state."""


_node_ids = itertools.count()

# When False, operations do not record the graph (inference mode).
_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording for cheap inference."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Node in the differentiation graph: dense value plus gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------ info

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.values)

    # -------------------------------------------------------------- backward

    def backward(self):
        """Reverse-mode sweep from this scalar; frees the tape afterwards.

        Gradients of every reachable ``requires_grad`` node are populated.
        Non-leaf gradients are dropped as soon as their backward closure has
        run, which keeps peak memory proportional to the live frontier.
        """
        if self.values.size != 1:
            raise DimensionError("backward() requires a scalar tensor")

        order = _toposort(self)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior node: consumers are done with it
                node._parents = ()
                node._backward = None

    # ------------------------------------------------------- elementwise ops

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        return _binary(
            self, other, np.multiply,
            lambda g, a, b: g * b.values,
            lambda g, a, b: g * a.values,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self, other, _safe_divide,
            lambda g, a, b: _safe_divide(g, b.values),
            lambda g, a, b: -g * _safe_divide(a.values, b.values ** 2),
        )

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, np.negative, lambda g, x, y: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return _unary(self, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0))

    def tanh(self):
        return _unary(self, np.tanh, lambda g, x, y: g * (1.0 - y * y))

    def exp(self):
        return _unary(self, np.exp, lambda g, x, y: g * y)

    def sqrt(self):
        return _unary(self, np.sqrt, lambda g, x, y: g * 0.5 / y)

    def square(self):
        return _unary(self, np.square, lambda g, x, y: g * 2.0 * x)

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, "mean", axis, keepdims)

    # ------------------------------------------------------------ structural

    def reshape(self, shape):
        src_shape = self.values.shape
        out = np.reshape(self.values, shape)
        return _node(out, (self,), lambda g: _accum(self, g.reshape(src_shape)))

    def transpose(self, axes=None):
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        out = np.transpose(self.values, axes)
        return _node(out, (self,), lambda g: _accum(self, np.transpose(g, inv)))

    def expand(self, shape):
        """Broadcast to `shape` (numpy rules); gradient sums back down."""
        src_shape = self.values.shape
        out = np.broadcast_to(self.values, shape)
        return _node(out, (self,), lambda g: _accum(self, _unbroadcast(g, src_shape)))

    def softmax(self, axis=-1):
        x = self.values
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(self, y * (g - inner))

        return _node(y, (self,), bw)


# ---------------------------------------------------------------- op helpers


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _safe_divide(a, b):
    # Divide without warnings; inf/nan propagate and are caught by the
    # training health check rather than here.
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(a, b)


def _node(values, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True, _parents=parents, _backward=backward)
    else:
        out = Tensor(values)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_elementwise(a: Tensor, b: Tensor):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(
        f"elementwise op needs equal shapes or a scalar, got {a.shape} vs {b.shape}"
    )


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b)
    out_values = fwd(a.values, b.values)

    def bw(g):
        _accum(a, _unbroadcast(da(g, a, b), a.shape))
        _accum(b, _unbroadcast(db(g, a, b), b.shape))

    return _node(out_values, (a, b), bw)


def _unary(x, fwd, grad_fn) -> Tensor:
    x = _wrap(x)
    y = fwd(x.values)
    return _node(y, (x,), lambda g: _accum(x, grad_fn(g, x.values, y)))


def _reduce(t: Tensor, kind: str, axis, keepdims: bool) -> Tensor:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for ax in axes:
            if not -t.ndim <= ax < t.ndim:
                raise DimensionError(f"reduce axis {ax} out of range for rank {t.ndim}")
    out = getattr(t.values, kind)(axis=axis, keepdims=keepdims)
    n = t.values.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, t.shape)
        _accum(t, g / n if kind == "mean" else g.copy())

    return _node(out, (t,), bw)


def _toposort(root: Tensor) -> list:
    seen = {id(root)}
    order = []
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


# ------------------------------------------------------------- main ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking rules; 1-D operands are promoted."""
    a, b = _wrap(a), _wrap(b)
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1
    av = a.values[None, :] if a_vec else a.values
    bv = b.values[:, None] if b_vec else b.values
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(av, bv)
    if a_vec:
        out = out[..., 0, :]
    if b_vec:
        out = out[..., 0]

    def bw(g):
        gm = g
        if a_vec:
            gm = np.expand_dims(gm, -2)
        if b_vec:
            gm = np.expand_dims(gm, -1)
        ga = np.matmul(gm, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), gm)
        if a_vec:
            ga = ga[..., 0, :]
        if b_vec:
            gb = gb[..., 0]
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(out, tuple(tensors), bw)


def take_index(t: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis` (rank drops by one)."""
    t = _wrap(t)
    out = np.take(t.values, index, axis=axis)

    def bw(g):
        buf = np.zeros_like(t.values)
        idx = [slice(None)] * t.ndim
        idx[axis] = index
        buf[tuple(idx)] = g
        _accum(t, buf)

    return _node(out, (t,), bw)


def gather_points(t: Tensor, indices: np.ndarray) -> Tensor:
    """Pick rows of the second-to-last axis: t (..., M, C) + idx (..., P) -> (..., P, C).

    Gradient scatter-adds into the selected rows, which yields the selected-pair
    subgradient used by the Chamfer distance.
    """
    t = _wrap(t)
    idx = np.asarray(indices)
    if idx.shape != t.shape[:-2] + (idx.shape[-1],):
        raise DimensionError(
            f"gather indices {idx.shape} incompatible with tensor {t.shape}"
        )
    out = np.take_along_axis(t.values, idx[..., None], axis=-2)

    def bw(g):
        buf = np.zeros_like(t.values)
        grids = np.indices(g.shape, sparse=True)
        sel = list(grids)
        sel[-2] = idx[..., None]
        np.add.at(buf, tuple(sel), g)
        _accum(t, buf)

    return _node(out, (t,), bw)


def assert_finite(t: Tensor, context: str = "tensor"):
    """Health check: raise NumericError if any value is non-finite."""
    if not np.isfinite(t.values).all():
        raise NumericError(f"non-finite values in {context}")
    return t


# ----------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site (channels on last axis)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Normalize per channel (last axis) over all leading axes.

    Training mode uses batch statistics and updates the running buffers in
    place; eval mode uses the stored running statistics. Biased variance is
    used throughout.
    """
    if x.shape[-1] != state.running_mean.shape[0]:
        raise DimensionError(
            f"batch_norm channels {x.shape[-1]} != state {state.running_mean.shape[0]}"
        )
    axes = tuple(range(x.ndim - 1))
    n = x.values.size // x.shape[-1]

    if training:
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        state.running_mean *= state.momentum
        state.running_mean += (1.0 - state.momentum) * mu
        state.running_var *= state.momentum
        state.running_var += (1.0 - state.momentum) * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.values - mu) * inv_std
    out = gamma.values * xhat + beta.values

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.values
        if training:
            term = (
                n * dxhat
                - dxhat.sum(axis=axes)
                - xhat * (dxhat * xhat).sum(axis=axes)
            )
            _accum(x, inv_std / n * term)
        else:
            _accum(x, dxhat * inv_std)

    return _node(out, (x, gamma, beta), bw)


# ------------------------------------------------------------------- svd


SVD_GAP_CLAMP = 1e6  # |1/(s_i^2 - s_j^2)| is clamped here near degeneracy


def svd3(m: Tensor):
    """SVD of stacked 3x3 matrices with a differentiable backward pass.

    Returns (u, s, v) with m = u @ diag(s) @ v^T, singular values sorted
    descending and both factors orthogonal. The backward pass uses the
    standard full-SVD adjoint; inverse singular-gap terms are clamped at
    SVD_GAP_CLAMP so near-degenerate spectra stay finite (an approximation).
    """
    m = _wrap(m)
    if m.shape[-2:] != (3, 3):
        raise DimensionError(f"svd3 expects (..., 3, 3), got {m.shape}")
    u_val, s_val, vh_val = np.linalg.svd(m.values)
    v_val = np.swapaxes(vh_val, -1, -2)

    s2 = s_val ** 2
    denom = s2[..., None, :] - s2[..., :, None]  # [i, j] = s_j^2 - s_i^2
    with np.errstate(divide="ignore"):
        f = 1.0 / denom
    f = np.clip(np.nan_to_num(f, nan=SVD_GAP_CLAMP, posinf=SVD_GAP_CLAMP,
                              neginf=-SVD_GAP_CLAMP),
                -SVD_GAP_CLAMP, SVD_GAP_CLAMP)
    eye = np.eye(3, dtype=bool)
    f = np.where(eye, 0.0, f)

    def bw_u(gu):
        a = np.swapaxes(u_val, -1, -2) @ gu
        inner = f * (a - np.swapaxes(a, -1, -2)) * s_val[..., None, :]
        _accum(m, u_val @ inner @ vh_val)

    def bw_s(gs):
        _accum(m, (u_val * gs[..., None, :]) @ vh_val)

    def bw_v(gv):
        a = np.swapaxes(v_val, -1, -2) @ gv
        inner = f * (a - np.swapaxes(a, -1, -2)) * s_val[..., :, None]
        _accum(m, u_val @ inner @ vh_val)

    u = _node(u_val, (m,), bw_u)
    s = _node(s_val, (m,), bw_s)
    v = _node(v_val, (m,), bw_v)
    return u, s, v
