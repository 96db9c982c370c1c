"""The full shadow-removal network.

Seven stages around a U shape: a 3x3 RGBD input projection, three encoder
stages (two window-attention blocks, the second prior-modulated, then a 4x4
stride-2 downsampling conv), a bottleneck with multi-scale semantic injection
and two modulated blocks, three decoder stages (2x2 transposed-conv upsample,
dual-branch fusion with the encoder skip, two standard blocks), and a 3x3
output projection added to the input through a global residual.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .attention import TransformerBlock, build_modulation
from .autodiff import Module, Tensor, add, concat, leaky_relu
from .config import ModelConfig, apply_config, parse_config_text, serialize_configs
from .fusion import FusionBlock, PlainFusion
from .geometry import backproject, intrinsics_from_fov, normals_from_points
from .layers import Conv2d, ConvTranspose2d, conv_transpose2d
from .tensorio import read_tensor, write_tensor

__all__ = [
    "ScenePriors", "StagePriors", "ForwardTrace", "ShadowRemovalNet",
    "resample_priors", "neutral_priors", "save_checkpoint", "load_checkpoint",
    "STAGE_NAMES",
]

STAGE_NAMES = ("enc0", "enc1", "enc2", "bottleneck", "dec0", "dec1", "dec2")


@dataclass
class ScenePriors:
    """Full-resolution guidance maps: depth (H,W), normals (H,W,3), semantic
    features (H,W,d_sem)."""

    depth: np.ndarray
    normals: np.ndarray
    sem: np.ndarray


@dataclass
class StagePriors:
    depth: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    sem: np.ndarray
    points: np.ndarray
    intr: object


@dataclass
class ForwardTrace:
    """Read-only capture of per-stage output shapes and selected activations."""

    capture: tuple = ()
    shapes: list = field(default_factory=list)
    activations: dict = field(default_factory=dict)

    def record(self, name, tensor):
        self.shapes.append((name, tuple(tensor.shape)))
        if name in self.capture:
            self.activations[name] = np.array(tensor.data, copy=True)


def _pool2d(arr, factor):
    """Area-average pooling of (H,W) or (H,W,F) by an integer factor."""
    if factor == 1:
        return arr
    h, w = arr.shape[0] // factor, arr.shape[1] // factor
    if arr.ndim == 2:
        return arr.reshape(h, factor, w, factor).mean(axis=(1, 3))
    return arr.reshape(h, factor, w, factor, arr.shape[2]).mean(axis=(1, 3))


def resample_priors(priors, cfg, scales=4):
    """Per-stage priors at full, 1/2, 1/4, 1/8 resolution.

    Depth and semantic features are area-averaged; normals are area-averaged
    then renormalized (zero vectors stay zero).  Camera-space point maps are
    rebuilt at each scale from the pooled depth.
    """
    stages = []
    for s in range(scales):
        f = 2 ** s
        depth = _pool2d(priors.depth, f)
        sem = _pool2d(priors.sem, f)
        n = _pool2d(priors.normals, f)
        norm = np.sqrt((n * n).sum(axis=-1, keepdims=True))
        n = n / (norm + norm.dtype.type(1e-20))
        valid = norm[..., 0] > 1e-6
        h, w = depth.shape
        intr = intrinsics_from_fov(cfg.fov_degrees, w, h)
        points = backproject(depth, intr)
        stages.append(StagePriors(depth, n, valid, sem, points, intr))
    return stages


def neutral_priors(h, w, d_sem, depth_value=2.0):
    """Priors that modulate nothing: a fronto-parallel plane and one shared
    semantic vector."""
    depth = np.full((h, w), depth_value, np.float32)
    normals = np.zeros((h, w, 3), np.float32)
    normals[..., 2] = 1.0
    sem = np.zeros((h, w, d_sem), np.float32)
    sem[..., 0] = 1.0
    return ScenePriors(depth, normals, sem)


class EncoderStage(Module):
    def __init__(self, dim, dim_next, heads, cfg, rng):
        mk = lambda shift, modulated: TransformerBlock(
            dim, heads, cfg.window, shift, cfg.mlp_ratio, modulated, rng=rng)
        self.blocks = [mk(0, False), mk(cfg.shift, cfg.use_sim)]
        self.down = Conv2d(dim, dim_next, 4, stride=2, padding=1, rng=rng)

    def __call__(self, x, stage_priors, cfg):
        x = _run_blocks(self.blocks, x, stage_priors, cfg)
        return x, self.down(x)


class BottleneckStage(Module):
    def __init__(self, dim, heads, d_sem, n_scales, cfg, rng):
        self.sem_proj = Conv2d(n_scales * d_sem, dim, 1, rng=rng)
        self.fuse = Conv2d(2 * dim, dim, 1, rng=rng)
        mk = lambda shift: TransformerBlock(
            dim, heads, cfg.window, shift, cfg.mlp_ratio, cfg.use_sim, rng=rng)
        self.blocks = [mk(0), mk(cfg.shift)]

    def __call__(self, x, stage_priors, sem_stack, cfg):
        if cfg.use_sem:
            injected = self.sem_proj(Tensor(sem_stack))
            x = self.fuse(concat([x, injected], axis=0))
        x = _run_blocks(self.blocks, x, stage_priors, cfg)
        return x


class DecoderStage(Module):
    def __init__(self, dim_in, heads, cfg, rng):
        dim_out = dim_in // 2
        self.up = ConvTranspose2d(dim_in, dim_out, rng=rng)
        fusion_cls = FusionBlock if cfg.use_fusion else PlainFusion
        self.fusion = fusion_cls(
            dim_out, dim_in, dim_out, compressed=cfg.compressed_channels,
            k_lowpass=cfg.k_lowpass, k_highpass=cfg.k_highpass, k_up=cfg.k_up,
            hamming=cfg.hamming, rng=rng)
        self.merge = Conv2d(2 * dim_out, dim_out, 1, rng=rng)
        mk = lambda shift: TransformerBlock(
            dim_out, heads, cfg.window, shift, cfg.mlp_ratio, False, rng=rng)
        self.blocks = [mk(0), mk(cfg.shift)]

    def __call__(self, deep, skip, cfg):
        up = self.up(deep)
        fused = self.fusion(skip, deep)
        x = self.merge(concat([up, fused], axis=0))
        return _run_blocks(self.blocks, x, None, cfg)


def _run_blocks(blocks, x, stage_priors, cfg):
    for blk in blocks:
        mod = None
        if blk.modulated:
            mod = build_modulation(
                stage_priors, cfg.window, blk.shift, cfg.tau_geo,
                use_sem=cfg.use_sem, use_geo=cfg.use_normal)
        x = blk(x, mod, cfg.modulation) if blk.modulated else blk(x)
    return x


class ShadowRemovalNet(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dims = cfg.stage_dims
        self.input_proj = Conv2d(4, dims[0], 3, padding=1, pad_mode="reflect",
                                 rng=rng, init_std=cfg.init_std)
        self.encoders = [
            EncoderStage(dims[i], dims[i + 1], cfg.heads[i], cfg, rng) for i in range(3)
        ]
        self.bottleneck = BottleneckStage(dims[3], cfg.heads[3], cfg.d_sem, 4, cfg, rng)
        self.decoders = [
            DecoderStage(dims[3 - i] * 2 if False else dims[3] // (2 ** i), cfg.heads[4 + i], cfg, rng)
            for i in range(3)
        ]
        self.output_proj = Conv2d(dims[6], 3, 3, padding=1, pad_mode="reflect",
                                  rng=rng, init_std=cfg.init_std)

    def __call__(self, image, priors, trace=None):
        """Map a shadowed (3,H,W) image in [0,1] to its restored estimate.

        ``priors`` is a ScenePriors at image resolution.  The output is the
        unclamped global-residual prediction; clamp at inference time only.
        """
        cfg = self.cfg
        image = np.asarray(image, dtype=np.float32)
        _, h, w = image.shape
        pad_h, pad_w = (-h) % 8, (-w) % 8
        if pad_h or pad_w:
            spec3 = ((0, 0), (0, pad_h), (0, pad_w))
            image_p = np.pad(image, spec3, mode="reflect")
            priors = ScenePriors(
                np.pad(priors.depth, spec3[1:], mode="reflect"),
                np.pad(priors.normals, spec3[1:] + ((0, 0),), mode="reflect"),
                np.pad(priors.sem, spec3[1:] + ((0, 0),), mode="reflect"),
            )
        else:
            image_p = image
        if priors.depth.shape != image_p.shape[1:]:
            raise ValueError(
                f"prior resolution {priors.depth.shape} does not match image {image_p.shape[1:]}")

        stage_priors = resample_priors(priors, cfg)
        depth_in = stage_priors[0].depth if cfg.use_depth else np.zeros_like(stage_priors[0].depth)
        rgbd = np.concatenate([image_p, depth_in[None].astype(np.float32)], axis=0)

        x = leaky_relu(self.input_proj(Tensor(rgbd)), 0.01)
        skips = []
        for i, enc in enumerate(self.encoders):
            skip, x = enc(x, stage_priors[i], cfg)
            skips.append(skip)
            if trace is not None:
                trace.record(STAGE_NAMES[i], skip)

        sem_stack = _bottleneck_sem_stack(stage_priors) if cfg.use_sem else None
        x = self.bottleneck(x, stage_priors[3], sem_stack, cfg)
        if trace is not None:
            trace.record("bottleneck", x)

        for i, dec in enumerate(self.decoders):
            x = dec(x, skips[2 - i], cfg)
            if trace is not None:
                trace.record(STAGE_NAMES[4 + i], x)

        residual = self.output_proj(x)
        pred = add(residual, Tensor(image_p))
        if pad_h or pad_w:
            pred = pred[:, :h, :w]
        return pred

    def infer(self, image, priors):
        """Forward pass clamped to [0,1], returned as a plain array."""
        out = self(image, priors)
        return np.clip(out.data, 0.0, 1.0).astype(np.float32)


def _bottleneck_sem_stack(stage_priors):
    """Semantic maps from every scale pooled to bottleneck resolution and
    stacked along channels, channel-first."""
    target = stage_priors[-1].sem.shape[:2]
    maps = []
    for sp in stage_priors:
        f = sp.sem.shape[0] // target[0]
        maps.append(_pool2d(sp.sem, f))
    return np.concatenate([m.transpose(2, 0, 1) for m in maps], axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model, out_dir, train_cfg=None):
    """Write every parameter as a tensor file keyed by its attribute path,
    plus a config manifest."""
    os.makedirs(os.path.join(out_dir, "params"), exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize_configs(model.cfg, train_cfg))
    for name, p in model.named_parameters():
        if name.startswith("cfg"):
            continue
        write_tensor(os.path.join(out_dir, "params", name + ".dst"), p.data)


def load_checkpoint(ckpt_dir, seed=0):
    """Rebuild the model from a checkpoint directory; returns (model, tcfg)."""
    with open(os.path.join(ckpt_dir, "config.txt"), encoding="utf-8") as fh:
        mcfg, tcfg = apply_config(parse_config_text(fh.read()))
    model = ShadowRemovalNet(mcfg, seed=seed)
    pdir = os.path.join(ckpt_dir, "params")
    on_disk = {fn[:-4] for fn in os.listdir(pdir) if fn.endswith(".dst")}
    expected = {name for name, _ in model.named_parameters()}
    if on_disk != expected:
        missing = sorted(expected - on_disk)[:5]
        extra = sorted(on_disk - expected)[:5]
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in model.named_parameters():
        arr = read_tensor(os.path.join(pdir, name + ".dst"))
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr
    return model, tcfg
