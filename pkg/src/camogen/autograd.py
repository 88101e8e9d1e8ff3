"""Dense tensors with reverse-mode automatic differentiation.

Design constraints, chosen for auditability over generality:

* values are numpy arrays, float32 by default, float64 for verification runs;
* broadcasting is restricted to two cases: a scalar operand, or a smaller
  operand whose shape equals the trailing suffix of the other (so it repeats
  along leading dimensions only);
* the backward pass accumulates into ``grad`` and never mutates ``data``;
* a computation graph belongs to one logical thread.

Structural ops (reshape, transpose, concat, narrow, gather) and a handful of
numeric primitives with hand-derived backwards (softmax, layer_norm, conv2d,
nearest_upsample, gelu, silu) are enough to express every model in the
package; everything is validated against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvariantError, NumericError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node.

        Without an explicit seed the node must be scalar (a loss); the seed is
        then 1. Traversal is iterative so deep graphs do not hit the
        interpreter recursion limit.
        """
        if not self.requires_grad:
            raise InvariantError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise InvariantError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} != tensor shape {self.data.shape}"
                )

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, a scalar operand, or trailing-suffix alignment."""
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to an operand's shape by summing leading axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# -- elementwise suite ------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * np.asarray(c, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.asarray(c, dtype=a.dtype))

    return _result(data, (a,), backward)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return _result(data, (a,), backward)


def masked_select(a: Tensor, mask) -> Tensor:
    """Zero out entries where the (constant) mask is 0; shape is preserved."""
    m = np.asarray(mask, dtype=a.dtype)
    _check_broadcast(a.shape, m.shape)
    data = a.data * m

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * m, a.shape))

    return _result(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / np.sqrt(a.data)))

    return _result(data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _result(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form (smooth, so finite differences apply)."""
    k = 0.7978845608028654  # sqrt(2/pi)
    x = a.data
    u = k * (x + 0.044715 * x**3)
    th = np.tanh(u)
    data = 0.5 * x * (1.0 + th)

    def backward(g):
        if a.requires_grad:
            du = k * (1.0 + 3 * 0.044715 * x**2)
            a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du))

    return _result(data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    data = x * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (s * (1.0 + x * (1.0 - s))))

    return _result(data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: same values, no graph edge."""
    return Tensor(a.data.copy(), requires_grad=False)


# -- contractions and reductions ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _result(data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _result(data, (a,), backward)


# -- structural ops -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _result(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _result(data, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _result(data, (a,), backward)


# -- numeric primitives with derived backwards --------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains NaN or Inf")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then apply a learned affine."""
    if eps <= 0:
        raise NumericError("layer_norm eps must be positive")
    gain = _as_tensor(gain, a.dtype)
    bias = _as_tensor(bias, a.dtype)
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({c},), got {gain.shape}/{bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if a.requires_grad:
            gx = g * gain.data
            a._accumulate(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))

    return _result(y, (a, gain, bias), backward)


def conv2d(a: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution in HWC layout; kernel is (kh, kw, Cin, Cout)."""
    if a.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects HWC input and (kh,kw,Cin,Cout) kernel, got {a.shape}/{w.shape}"
        )
    h, wd, cin = a.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    xp = np.pad(a.data, ((padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {a.shape}")

    flat = np.zeros((ho * wo, cout), dtype=a.dtype)
    taps = []
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[ki: ki + (ho - 1) * stride + 1: stride,
                    kj: kj + (wo - 1) * stride + 1: stride, :]
            xs2 = xs.reshape(ho * wo, cin)
            flat += xs2 @ w.data[ki, kj]
            taps.append((ki, kj, xs2))
    if b is not None:
        flat += b.data
    data = flat.reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for ki, kj, xs2 in taps:
                gw[ki, kj] = xs2.T @ g2
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if a.requires_grad:
            gxp = np.zeros_like(xp)
            for ki, kj, _ in taps:
                gxp[ki: ki + (ho - 1) * stride + 1: stride,
                    kj: kj + (wo - 1) * stride + 1: stride, :] += (
                    g2 @ w.data[ki, kj].T
                ).reshape(ho, wo, cin)
            if padding:
                gxp = gxp[padding:-padding, padding:-padding, :]
            a._accumulate(gxp)

    parents = (a, w) if b is None else (a, w, b)
    return _result(data, parents, backward)


def nearest_upsample(a: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell of an HWC map factor x factor times."""
    if a.data.ndim != 3:
        raise DimensionError(f"nearest_upsample expects HWC input, got {a.shape}")
    data = a.data.repeat(factor, axis=0).repeat(factor, axis=1)
    h, w, c = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)))

    return _result(data, (a,), backward)
