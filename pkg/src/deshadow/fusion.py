"""Adaptive dual-branch fusion of an encoder skip with the deeper decoder path.

The low-resolution stream is upsampled 2x under predicted convex smoothing
kernels (consistency); the high-resolution stream is sharpened by predicted
identity-minus-low-pass kernels with a residual add (detail).  Both streams
pass through content-aware reassembly and are summed after 1x1 projections.
``PlainFusion`` is the ablation baseline: nearest-upsample plus projected add.
"""

from .autodiff import Module, add, concat, reshape, transpose
from .kernels import (
    CarafeReassembly, apply_highpass, apply_lowpass_grouped, invert_to_highpass,
    normalize_kernels, pixel_shuffle,
)
from .layers import Conv2d, avg_pool2, nearest_up2

__all__ = ["SmoothingUpsampler", "TextureSharpener", "FusionBlock", "PlainFusion"]


class SmoothingUpsampler(Module):
    """Predicts four convex K x K fields from context and pixel-shuffles the
    filtered sub-pixel groups into a 2x-upsampled, adaptively smoothed map."""

    def __init__(self, ctx_channels, k=5, hamming=False, rng=None):
        self.k = k
        self.hamming = hamming
        self.head = Conv2d(ctx_channels, 4 * k * k, 3, padding=1, pad_mode="reflect", rng=rng)

    def __call__(self, lr_feat, ctx_lr):
        k = self.k
        h, w = ctx_lr.shape[1], ctx_lr.shape[2]
        raw = reshape(self.head(ctx_lr), (4, k * k, h, w))
        fields = [
            normalize_kernels(transpose(raw[g], (1, 2, 0)), k, self.hamming)
            for g in range(4)
        ]
        groups = apply_lowpass_grouped(lr_feat, fields, k)
        return pixel_shuffle(groups)


class TextureSharpener(Module):
    """Projects the high-resolution map, extracts its predicted high-frequency
    component, and adds it back residually."""

    def __init__(self, channels, ctx_channels, k=3, hamming=False, rng=None):
        self.k = k
        self.hamming = hamming
        self.proj = Conv2d(channels, channels, 1, rng=rng)
        self.head = Conv2d(ctx_channels, k * k, 3, padding=1, pad_mode="reflect", rng=rng)

    def __call__(self, hr_feat, ctx_hr):
        x_proj = self.proj(hr_feat)
        raw = transpose(self.head(ctx_hr), (1, 2, 0))
        low = normalize_kernels(raw, self.k, self.hamming)
        hf = apply_highpass(x_proj, invert_to_highpass(low))
        return add(x_proj, hf)


class FusionBlock(Module):
    def __init__(self, c_hr, c_lr, c_out, compressed=64, k_lowpass=5, k_highpass=3,
                 k_up=5, hamming=False, rng=None):
        self.compress_hr = Conv2d(c_hr, compressed, 1, rng=rng)
        self.compress_lr = Conv2d(c_lr, compressed, 1, rng=rng)
        self.ctx_lr_conv = Conv2d(2 * compressed, compressed, 1, rng=rng)
        self.ctx_hr_conv = Conv2d(2 * compressed, compressed, 1, rng=rng)
        self.smoother = SmoothingUpsampler(compressed, k_lowpass, hamming, rng=rng)
        self.sharpener = TextureSharpener(c_hr, compressed, k_highpass, hamming, rng=rng)
        self.reassemble_smooth = CarafeReassembly(compressed, k_up, rng=rng)
        self.reassemble_sharp = CarafeReassembly(compressed, k_up, rng=rng)
        self.proj_smooth = Conv2d(c_lr, c_out, 1, rng=rng)
        self.proj_sharp = Conv2d(c_hr, c_out, 1, rng=rng)

    def build_context(self, hr_c, lr_c):
        """Shared low/high-resolution context maps from the compressed inputs."""
        z_lr = self.ctx_lr_conv(concat([lr_c, avg_pool2(hr_c)], axis=0))
        z_hr = self.ctx_hr_conv(concat([hr_c, nearest_up2(lr_c)], axis=0))
        return z_lr, z_hr

    def __call__(self, hr_feat, lr_feat):
        if hr_feat.shape[1] != 2 * lr_feat.shape[1] or hr_feat.shape[2] != 2 * lr_feat.shape[2]:
            raise ValueError(
                f"hr {hr_feat.shape} must be exactly 2x the lr spatial dims {lr_feat.shape}")
        hr_c = self.compress_hr(hr_feat)
        lr_c = self.compress_lr(lr_feat)
        z_lr, z_hr = self.build_context(hr_c, lr_c)
        smooth = self.reassemble_smooth(self.smoother(lr_feat, z_lr), z_hr)
        assert smooth.shape[1:] == hr_feat.shape[1:], "upsampled stream lost alignment"
        sharp = self.reassemble_sharp(self.sharpener(hr_feat, z_hr), z_hr)
        return add(self.proj_smooth(smooth), self.proj_sharp(sharp))


class PlainFusion(Module):
    """Baseline fusion: nearest-upsampled lr plus 1x1-projected hr."""

    def __init__(self, c_hr, c_lr, c_out, rng=None, **_unused):
        self.proj_hr = Conv2d(c_hr, c_out, 1, rng=rng)
        self.proj_lr = Conv2d(c_lr, c_out, 1, rng=rng)

    def __call__(self, hr_feat, lr_feat):
        return add(self.proj_hr(hr_feat), nearest_up2(self.proj_lr(lr_feat)))
