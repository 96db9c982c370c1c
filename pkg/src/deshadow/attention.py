"""Shifted window attention with optional scene-prior score modulation.

Attention scores inside each window can be multiplied (or log-additively
biased) by two [0,1] maps computed from priors: pairwise semantic cosine
similarity and geometric plane consistency.  The maps are constants with
respect to differentiation; with uniform priors both maps are exactly 1 and a
modulated block is bit-identical to a standard one.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Module, add, gelu, matmul, mul, pad2d, reshape, roll, softmax, transpose,
)
from .layers import LayerNorm, Linear

__all__ = [
    "WindowGrid", "window_partition", "window_reverse", "window_partition_np",
    "semantic_similarity_map", "geometric_consistency_map",
    "modulated_window_attention", "WindowAttention", "TransformerBlock",
]


@dataclass(frozen=True)
class WindowGrid:
    """Bookkeeping to reverse a window partition exactly."""

    h: int
    w: int
    h_pad: int
    w_pad: int
    window: int
    shift: int


def _pad_to_multiple(h, w, window):
    return (-h) % window, (-w) % window


def window_partition(x, window, shift=0):
    """Split (C,H,W) into (num_windows, C, window, window) plus grid info.

    The map is reflect-padded on the bottom/right up to a window multiple,
    then cyclically shifted by (-shift, -shift) before partitioning.
    """
    c, h, w = x.shape
    pad_h, pad_w = _pad_to_multiple(h, w, window)
    if pad_h or pad_w:
        x = pad2d(x, (0, pad_h, 0, pad_w), mode="reflect")
    hp, wp = h + pad_h, w + pad_w
    if shift:
        x = roll(x, (-shift, -shift), (1, 2))
    nh, nw = hp // window, wp // window
    x = reshape(x, (c, nh, window, nw, window))
    x = transpose(x, (1, 3, 0, 2, 4))
    wins = reshape(x, (nh * nw, c, window, window))
    return wins, WindowGrid(h, w, hp, wp, window, shift)


def window_reverse(wins, grid):
    """Exact inverse of :func:`window_partition`."""
    window = grid.window
    nh, nw = grid.h_pad // window, grid.w_pad // window
    c = wins.shape[1]
    x = reshape(wins, (nh, nw, c, window, window))
    x = transpose(x, (2, 0, 3, 1, 4))
    x = reshape(x, (c, grid.h_pad, grid.w_pad))
    if grid.shift:
        x = roll(x, (grid.shift, grid.shift), (1, 2))
    if grid.h_pad != grid.h or grid.w_pad != grid.w:
        x = x[:, :grid.h, :grid.w]
    return x


def window_partition_np(arr, window, shift=0):
    """Numpy twin of window_partition for channel-last prior maps (H,W,F).

    Returns (num_windows, window*window, F) token stacks.
    """
    arr = np.asarray(arr)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    h, w, f = arr.shape
    pad_h, pad_w = _pad_to_multiple(h, w, window)
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    if shift:
        arr = np.roll(arr, (-shift, -shift), axis=(0, 1))
    hp, wp = h + pad_h, w + pad_w
    nh, nw = hp // window, wp // window
    toks = arr.reshape(nh, window, nw, window, f).transpose(0, 2, 1, 3, 4)
    toks = toks.reshape(nh * nw, window * window, f)
    return toks[..., 0] if squeeze else toks


def _semantic_batch(s):
    """Pairwise (1+cos)/2 for token stacks (nw, n, d)."""
    g = np.einsum("wnd,wmd->wnm", s, s, optimize=True)
    sq = np.einsum("wnd,wnd->wn", s, s, optimize=True)
    # Single sqrt of the product keeps cos(a,a) exactly 1 for identical rows.
    denom = np.sqrt(sq[:, :, None] * sq[:, None, :])
    valid = (sq[:, :, None] > 1e-16) & (sq[:, None, :] > 1e-16)
    cos = np.where(valid, g / np.where(valid, denom, 1.0), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return (1.0 + cos) * 0.5


def semantic_similarity_map(s_window):
    """Bounded cosine-similarity map of one window's (n, d) features."""
    return _semantic_batch(np.asarray(s_window)[None])[0]


def _geometric_batch(points, normals, tau, valid=None):
    """exp(-point-to-plane distance / tau) for (nw, n, 3) stacks."""
    np_dot = np.einsum("wnd,wmd->wnm", normals, points, optimize=True)
    d = np.abs(np_dot - np.einsum("wnn->wn", np_dot)[:, :, None])
    m = np.exp(-d / tau)
    if valid is None:
        valid = np.einsum("wnd,wnd->wn", normals, normals) > 0.5
    m = np.where(valid[:, :, None], m, 1.0)
    return m


def geometric_consistency_map(points, normals, tau_geo=0.5, valid=None):
    """Plane-consistency map of one window: (n,3) points and unit normals.

    Rows whose normal is degenerate (flagged or near zero) are left at 1,
    applying no modulation there.
    """
    v = None if valid is None else np.asarray(valid)[None]
    return _geometric_batch(np.asarray(points)[None], np.asarray(normals)[None], tau_geo, v)[0]


def modulated_window_attention(q, k, v, modulation=None, mode="mul"):
    """Attention over (nw, heads, n, d_h) tensors with optional modulation.

    ``modulation`` broadcasts over heads as (nw, 1, n, n); "mul" multiplies the
    pre-softmax scores elementwise, "logbias" adds log(modulation) instead.
    """
    d_h = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_h))
    if modulation is not None:
        if mode == "mul":
            scores = mul(scores, modulation)
        elif mode == "logbias":
            scores = add(scores, np.log(np.maximum(modulation, 1e-8)))
        else:
            raise ValueError(f"unknown modulation mode {mode!r}")
    attn = softmax(scores, axis=-1)
    return matmul(attn, v), attn


class WindowAttention(Module):
    def __init__(self, dim, heads, rng=None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)

    def __call__(self, tokens, modulation=None, mode="mul"):
        nw, n, c = tokens.shape
        h = self.heads
        d_h = c // h
        qkv = self.qkv(tokens)
        qkv = transpose(reshape(qkv, (nw, n, 3, h, d_h)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        out, _ = modulated_window_attention(q, k, v, modulation, mode)
        out = reshape(transpose(out, (0, 2, 1, 3)), (nw, n, c))
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim, mlp_ratio=4, rng=None):
        self.fc1 = Linear(dim, dim * mlp_ratio, rng=rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng=rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm window-attention block: x + Attn(LN(x)), then x + MLP(LN(x)).

    ``modulated=True`` turns the block into its scene-prior variant; the
    caller supplies the per-window modulation map for the block's shift.
    """

    def __init__(self, dim, heads, window, shift, mlp_ratio=4, modulated=False, rng=None):
        self.window = window
        self.shift = shift
        self.modulated = modulated
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio, rng=rng)

    def __call__(self, x, modulation=None, mode="mul"):
        if self.modulated and modulation is None:
            raise ValueError("modulated block called without a modulation map")
        c, h, w = x.shape
        wins, grid = window_partition(x, self.window, self.shift)
        nw = wins.shape[0]
        n = self.window * self.window
        tokens = transpose(reshape(wins, (nw, c, n)), (0, 2, 1))
        t = self.attn(self.norm1(tokens), modulation if self.modulated else None, mode)
        awins = reshape(transpose(t, (0, 2, 1)), (nw, c, self.window, self.window))
        x = add(x, window_reverse(awins, grid))

        tokens2 = transpose(reshape(x, (c, h * w)), (1, 0))
        m = self.mlp(self.norm2(tokens2))
        return add(x, reshape(transpose(m, (1, 0)), (c, h, w)))


def build_modulation(stage_priors, window, shift, tau_geo, use_sem=True, use_geo=True):
    """Per-window score modulation (nw, 1, n, n) from stage priors.

    Returns None when both prior channels are disabled.
    """
    if not use_sem and not use_geo:
        return None
    m = None
    if use_sem:
        s_tok = window_partition_np(stage_priors.sem, window, shift)
        m = _semantic_batch(s_tok)
    if use_geo:
        p_tok = window_partition_np(stage_priors.points, window, shift)
        n_tok = window_partition_np(stage_priors.normals, window, shift)
        v_tok = window_partition_np(stage_priors.valid.astype(np.float32), window, shift) > 0.5
        geo = _geometric_batch(p_tok, n_tok, tau_geo, v_tok)
        m = geo if m is None else m * geo
    return m[:, None].astype(np.float32, copy=False)
