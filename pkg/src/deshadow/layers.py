"""Convolution/pooling ops and the small layer classes built on them."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    Module, Parameter, Tensor, as_tensor, layer_norm, pad2d, param_init_normal,
)

__all__ = [
    "conv2d", "conv_transpose2d", "avg_pool2", "nearest_up2",
    "Conv2d", "ConvTranspose2d", "Linear", "LayerNorm",
]


def conv2d(x, weight, bias=None, stride=1, padding=0, pad_mode="zero"):
    """2-D convolution of ``x`` (C,H,W) with ``weight`` (O,C,k,k).

    ``padding`` is an explicit symmetric margin; ``pad_mode`` selects zero or
    reflect padding.  Output extent is floor((H + 2*pad - k)/stride) + 1.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    c_in, k = weight.shape[1], weight.shape[2]
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if k < 1 or stride < 1:
        raise ValueError("conv2d: kernel size and stride must be >= 1")
    xp = pad2d(x, (padding,) * 4, mode=pad_mode) if padding else x
    return _conv2d_core(xp, weight, bias, stride)


def _conv2d_core(xp, weight, bias, stride):
    xpd, wd = xp.data, weight.data
    k = wd.shape[2]
    cols = sliding_window_view(xpd, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out_data = np.einsum("chwkl,ockl->ohw", cols, wd, optimize=True)
    parents = [xp, weight]
    if bias is not None:
        out_data = out_data + bias.data[:, None, None]
        parents.append(bias)
    h_out, w_out = out_data.shape[1], out_data.shape[2]

    def backward(g):
        weight._accum(np.einsum("ohw,chwkl->ockl", g, cols, optimize=True))
        if bias is not None:
            bias._accum(g.sum(axis=(1, 2)))
        if xp.requires_grad:
            gx = np.zeros_like(xpd)
            for ki in range(k):
                for li in range(k):
                    tap = np.einsum("ohw,oc->chw", g, wd[:, :, ki, li], optimize=True)
                    gx[:, ki:ki + stride * h_out:stride, li:li + stride * w_out:stride] += tap
            xp._accum(gx)

    return Tensor(out_data, tuple(parents), backward)


def conv_transpose2d(x, weight, bias=None):
    """Transposed convolution with kernel 2, stride 2: exact 2x upsampling.

    ``weight`` has layout (C_in, C_out, 2, 2).
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.shape[0] != wd.shape[0]:
        raise ValueError(f"conv_transpose2d: input has {xd.shape[0]} channels, weight expects {wd.shape[0]}")
    c_out = wd.shape[1]
    _, h, w = xd.shape
    blocks = np.einsum("chw,coab->ohawb", xd, wd, optimize=True)
    out_data = blocks.reshape(c_out, 2 * h, 2 * w)
    parents = [x, weight]
    if bias is not None:
        out_data = out_data + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        g4 = g.reshape(c_out, h, 2, w, 2)
        x._accum(np.einsum("ohawb,coab->chw", g4, wd, optimize=True))
        weight._accum(np.einsum("chw,ohawb->coab", xd, g4, optimize=True))
        if bias is not None:
            bias._accum(g.sum(axis=(1, 2)))

    return Tensor(out_data, tuple(parents), backward)


def avg_pool2(x):
    """2x2 average pooling of a (C,H,W) tensor; H and W must be even."""
    x = as_tensor(x)
    c, h, w = x.shape
    out_data = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accum(gx)

    return Tensor(out_data, (x,), backward)


def nearest_up2(x):
    """Nearest-neighbor 2x upsampling of a (C,H,W) tensor."""
    x = as_tensor(x)
    c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        x._accum(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return Tensor(out_data, (x,), backward)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, pad_mode="zero", rng=None, init_std=0.2):
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        self.weight = param_init_normal((c_out, c_in, k, k), std=init_std, rng=rng)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng=None, init_std=0.2):
        self.weight = param_init_normal((c_in, c_out, 2, 2), std=init_std, rng=rng)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, init_std=0.2):
        self.weight = param_init_normal((d_in, d_out), std=init_std, rng=rng)
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, x):
        return layer_norm(x, self.weight, self.bias, eps=self.eps)
