"""Spatially-variant filter fields: prediction normalization, application,
low-pass inversion, pixel shuffle, and content-aware reassembly.

A kernel field stores one K*K filter per spatial location, shared across
channels.  Low-pass fields are convex (non-negative, summing to 1); high-pass
fields are derived by subtracting a low-pass field from the identity kernel
and sum to 0.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor, as_tensor, div, mul, pad2d, softmax, sub, transpose, tsum
from .layers import Conv2d

__all__ = [
    "KernelField", "hamming_window_2d", "normalize_kernels",
    "invert_to_highpass", "spatial_filter", "apply_lowpass_grouped",
    "apply_highpass", "pixel_shuffle", "pixel_unshuffle", "CarafeReassembly",
]

LOWPASS = "lowpass"
HIGHPASS = "highpass"


@dataclass
class KernelField:
    """Per-location filter weights of shape (H, W, K*K)."""

    weights: Tensor
    kind: str
    k: int


def hamming_window_2d(k):
    """Separable 2-D Hamming window of extent ``k`` (all-ones for k=1)."""
    if k < 1:
        raise ValueError("window extent must be >= 1")
    if k == 1:
        return np.ones((1, 1), dtype=np.float32)
    n = np.arange(k, dtype=np.float64)
    h = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (k - 1))
    return np.outer(h, h).astype(np.float32)


def normalize_kernels(raw, k, hamming=False):
    """Softmax raw predictions over the K*K axis into a low-pass field.

    ``raw`` has shape (H, W, K*K).  With ``hamming`` the softmax output is
    multiplied by the 2-D Hamming window and renormalized to sum 1.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel extent must be odd and positive, got {k}")
    raw = as_tensor(raw)
    if raw.shape[-1] != k * k:
        raise ValueError(f"expected {k * k} weights per location, got {raw.shape[-1]}")
    w = softmax(raw, axis=-1)
    if hamming:
        win = hamming_window_2d(k).reshape(-1)
        w = mul(w, win)
        w = div(w, tsum(w, axis=-1, keepdims=True))
    return KernelField(w, LOWPASS, k)


def invert_to_highpass(field):
    """E - W_low, where E is one at the center tap and zero elsewhere."""
    if field.kind != LOWPASS:
        raise ValueError("invert_to_highpass needs a low-pass field")
    k = field.k
    e = np.zeros(k * k, dtype=np.float32)
    e[(k // 2) * k + k // 2] = 1.0
    return KernelField(sub(e, field.weights), HIGHPASS, k)


def spatial_filter(x, field):
    """Apply a kernel field to a (C,H,W) tensor with reflect padding.

    Every channel shares the kernel at each location; the neighborhood is the
    K x K window centered on the output pixel.
    """
    x = as_tensor(x)
    k = field.k
    r = k // 2
    if field.weights.shape[:2] != x.shape[1:]:
        raise ValueError(
            f"kernel field grid {field.weights.shape[:2]} does not match input {x.shape[1:]}")
    xp = pad2d(x, (r, r, r, r), mode="reflect")
    return _filter_core(xp, field.weights, k)


def _filter_core(xp, w, k):
    xpd, wd = xp.data, w.data
    h, ww = wd.shape[0], wd.shape[1]
    out = np.zeros((xpd.shape[0], h, ww), dtype=np.result_type(xpd, wd))
    for t in range(k * k):
        ki, li = divmod(t, k)
        out += wd[:, :, t] * xpd[:, ki:ki + h, li:li + ww]

    def backward(g):
        if w.requires_grad:
            gw = np.empty_like(wd)
            for t in range(k * k):
                ki, li = divmod(t, k)
                gw[:, :, t] = (g * xpd[:, ki:ki + h, li:li + ww]).sum(axis=0)
            w._accum(gw)
        if xp.requires_grad:
            gx = np.zeros_like(xpd)
            for t in range(k * k):
                ki, li = divmod(t, k)
                gx[:, ki:ki + h, li:li + ww] += g * wd[:, :, t]
            xp._accum(gx)

    return Tensor(out, (xp, w), backward)


def apply_lowpass_grouped(lr, fields, k):
    """Filter ``lr`` with each of the four sub-pixel group fields."""
    if len(fields) != 4:
        raise ValueError(f"expected 4 sub-pixel groups, got {len(fields)}")
    for f in fields:
        if f.kind != LOWPASS or f.k != k:
            raise ValueError("apply_lowpass_grouped needs low-pass fields of the stated extent")
    return [spatial_filter(lr, f) for f in fields]


def apply_highpass(x, field):
    """Extract the per-location high-frequency component of ``x``."""
    if field.kind != HIGHPASS:
        raise ValueError("apply_highpass needs a high-pass field")
    return spatial_filter(x, field)


def pixel_shuffle(groups):
    """Rearrange 4 maps (C,H,W) into (C,2H,2W).

    Group g lands at sub-pixel offset (g // 2, g % 2) of each 2x2 cell.
    """
    if len(groups) != 4:
        raise ValueError(f"pixel_shuffle needs exactly 4 groups, got {len(groups)}")
    groups = [as_tensor(g) for g in groups]
    c, h, w = groups[0].shape
    stacked = np.stack([g.data for g in groups])
    out = stacked.reshape(2, 2, c, h, w).transpose(2, 3, 0, 4, 1).reshape(c, 2 * h, 2 * w)

    def backward(g):
        parts = g.reshape(c, h, 2, w, 2).transpose(2, 4, 0, 1, 3).reshape(4, c, h, w)
        for gr, part in zip(groups, parts):
            gr._accum(part)

    return Tensor(np.ascontiguousarray(out), tuple(groups), backward)


def pixel_unshuffle(arr):
    """Inverse rearrangement: (C,2H,2W) ndarray to 4 maps (4,C,H,W)."""
    arr = np.asarray(arr)
    c, h2, w2 = arr.shape
    h, w = h2 // 2, w2 // 2
    return np.ascontiguousarray(arr.reshape(c, h, 2, w, 2).transpose(2, 4, 0, 1, 3).reshape(4, c, h, w))


class CarafeReassembly(Module):
    """Content-aware reassembly: kernels predicted from context, applied to x.

    A 3x3 convolution over the context map predicts k_up**2 raw weights per
    location; softmax normalization yields a convex field that reassembles the
    input at the same resolution.
    """

    def __init__(self, ctx_channels=64, k_up=5, rng=None):
        self.k_up = k_up
        self.head = Conv2d(ctx_channels, k_up * k_up, 3, padding=1, pad_mode="reflect", rng=rng)

    def __call__(self, x, ctx):
        raw = transpose(self.head(ctx), (1, 2, 0))
        field = normalize_kernels(raw, self.k_up, hamming=False)
        return spatial_filter(x, field)
