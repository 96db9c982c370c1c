"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations that produced it;
calling :meth:`Tensor.backward` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into every ``Parameter``
that contributed.  Forward math runs in whatever dtype the inputs carry
(float32 in normal use); :func:`grad_check` promotes to float64 before
differencing.
"""

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Module", "as_tensor", "param_init_normal",
    "grad_check", "add", "sub", "mul", "div", "exp", "log", "sqrt", "power",
    "leaky_relu", "gelu", "matmul", "reshape", "transpose", "getitem",
    "concat", "roll", "pad2d", "tsum", "tmean", "softmax", "layer_norm",
]


class Tensor:
    """A node of the recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = None
        # No tape is kept for subgraphs that cannot need gradients.
        self._parents = tuple(parents) if requires_grad else ()
        self._backward = backward if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=self.data.dtype)
        self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node; seeds with ones for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.trainable = trainable


def _toposort(root):
    """Reverse topological order of the subgraph that requires gradients."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), requires_grad=False)


def _const(x):
    """Raw ndarray view of a tensor-or-array operand."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(-_unbroadcast(g, b.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad * bd

    def backward(g):
        a._accum(_unbroadcast(g * bd, a.shape))
        b._accum(_unbroadcast(g * ad, b.shape))

    return Tensor(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad / bd

    def backward(g):
        a._accum(_unbroadcast(g / bd, a.shape))
        b._accum(_unbroadcast(-g * ad / (bd * bd), b.shape))

    return Tensor(out_data, (a, b), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)
    ad = a.data
    out_data = np.log(ad)

    def backward(g):
        a._accum(g / ad)

    return Tensor(out_data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * (0.5 / out_data))

    return Tensor(out_data, (a,), backward)


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    out_data = ad ** p

    def backward(g):
        a._accum(g * (p * ad ** (p - 1)))

    return Tensor(out_data, (a,), backward)


def leaky_relu(a, slope=0.01):
    """max(x, slope*x); slope must lie in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = as_tensor(a)
    mask = a.data >= 0
    out_data = np.where(mask, a.data, a.data * slope)

    def backward(g):
        a._accum(np.where(mask, g, g * slope))

    return Tensor(out_data, (a,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        a._accum(g * (cdf + ad * pdf))

    return Tensor(ad * cdf, (a,), backward)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad @ bd

    def backward(g):
        a._accum(_unbroadcast(g @ bd.swapaxes(-1, -2), a.shape))
        b._accum(_unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape))

    return Tensor(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(in_shape))

    return Tensor(out_data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor(out_data, (a,), backward)


def getitem(a, idx):
    a = as_tensor(a)
    out_data = a.data[idx]
    if isinstance(out_data, np.ndarray):
        out_data = out_data.copy()

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        a._accum(full)

    return Tensor(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor(out_data, tuple(tensors), backward)


def roll(a, shifts, axes):
    a = as_tensor(a)
    out_data = np.roll(a.data, shifts, axis=axes)
    neg = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts

    def backward(g):
        a._accum(np.roll(g, neg, axis=axes))

    return Tensor(out_data, (a,), backward)


def _reflect_indices(n, before, after):
    # Mirror without repeating the edge sample; requires margin <= n-1.
    if max(before, after) > n - 1:
        raise ValueError(f"reflect margin ({before},{after}) too large for extent {n}")
    idx = np.arange(-before, n + after)
    return np.abs(idx) if n == 1 else np.where(idx < 0, -idx, np.where(idx >= n, 2 * n - 2 - idx, idx))


def _unpad1d_reflect(g, n, before, after, axis):
    """Adjoint of 1-D reflect padding along ``axis``."""
    g = np.moveaxis(g, axis, 0)
    core = g[before:before + n].copy()
    if before:
        core[1:before + 1] += g[before - 1::-1]
    if after:
        core[n - 1 - after:n - 1] += g[:before + n - 1:-1]
    return np.moveaxis(core, 0, axis)


def pad2d(a, pads, mode="reflect"):
    """Pad the last two axes by ``pads = (top, bottom, left, right)``.

    ``mode`` is "reflect" (mirror, no edge repeat) or "zero".
    """
    a = as_tensor(a)
    top, bottom, left, right = pads
    nd = a.ndim
    h, w = a.shape[-2], a.shape[-1]
    if mode == "reflect":
        ridx = _reflect_indices(h, top, bottom)
        cidx = _reflect_indices(w, left, right)
        out_data = a.data[..., ridx[:, None], cidx[None, :]]

        def backward(g):
            g = _unpad1d_reflect(g, w, left, right, nd - 1)
            g = _unpad1d_reflect(g, h, top, bottom, nd - 2)
            a._accum(g)

    elif mode == "zero":
        spec = [(0, 0)] * (nd - 2) + [(top, bottom), (left, right)]
        out_data = np.pad(a.data, spec)

        def backward(g):
            sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
            a._accum(g[sl])

    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return Tensor(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, in_shape).copy())

    return Tensor(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    scale = a.data.size / out_data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, in_shape) / scale)

    return Tensor(out_data, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a._accum(y * (g - inner))

    return Tensor(y, (a,), backward)


def layer_norm(a, weight, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * weight.data + bias.data
    n = a.shape[-1]
    red = tuple(range(a.ndim - 1))

    def backward(g):
        gxhat = g * weight.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        a._accum(gx)
        weight._accum((g * xhat).sum(axis=red))
        bias._accum(g.sum(axis=red))

    return Tensor(out_data, (a, weight, bias), backward)


# ---------------------------------------------------------------------------
# parameters, modules
# ---------------------------------------------------------------------------

def param_init_normal(dims, mean=0.0, std=0.2, seed=None, rng=None, trainable=True):
    """Gaussian-initialized Parameter; deterministic for a fixed seed/rng."""
    if std <= 0:
        raise ValueError("std must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    data = rng.normal(mean, std, size=dims).astype(np.float32)
    return Parameter(data, trainable=trainable)


class Module:
    """Base class giving deterministic parameter traversal by attribute path."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            yield from _walk(key, val)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def astype(self, dtype):
        """In-place dtype conversion of all parameters (for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


def _walk(key, val):
    if isinstance(val, Parameter):
        yield key, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=key + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{key}.{i}", item)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f, x, h=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the Parameter ``x`` to a scalar Tensor and is re-evaluated at
    perturbed coordinates, so it must be pure.  The check runs in float64;
    ``x`` is promoted in place and restored afterwards.  ``max_coords`` caps
    the number of coordinates swept (all of them by default); sampling is
    drawn from ``rng``.
    """
    orig = x.data
    x.data = orig.astype(np.float64)
    try:
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("non-finite value in grad_check forward pass")
        for p in _params_of(out):
            p.grad = None
        out.backward()
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()

        flat = x.data.reshape(-1)
        n = flat.size
        if max_coords is not None and max_coords < n:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)

        worst = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp = float(f(x).data)
            flat[i] = old - h
            fm = float(f(x).data)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite value in grad_check probe")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
        return worst
    finally:
        x.data = orig
        x.grad = None


def _params_of(out):
    seen = set()
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Parameter):
            yield node
        stack.extend(node._parents)
