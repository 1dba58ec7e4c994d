"""Tiny frozen ViT standing in for a pretrained image encoder."""
from dataclasses import dataclass

import numpy as np

from . import data
from .nn import Block, LayerNorm, Linear, Module, normal
from .optim import AdamW, OptimizerConfig, clip_grad_norm, lr_at
from .tensor import (
    ContractError, Parameter, ShapeError, Tensor, add, backward, cross_entropy, no_grad,
    reshape, transpose,
)

VIT_SIZES = {"S": (64, 2), "M": (96, 4), "L": (128, 6)}


@dataclass
class VitConfig:
    image_size: int = 48
    patch_size: int = 6
    size_tag: str = "S"
    heads: int = 4
    frames: int = 8  # frame count every input is duplicated/sampled to
    pretrain_mode: str = "dense"  # "random" or "dense"
    pretrain_steps: int = 300

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.size_tag not in VIT_SIZES:
            raise ValueError(f"size_tag must be one of {sorted(VIT_SIZES)}")

    @property
    def dim(self):
        return VIT_SIZES[self.size_tag][0]

    @property
    def depth(self):
        return VIT_SIZES[self.size_tag][1]

    @property
    def tokens_per_frame(self):
        return (self.image_size // self.patch_size) ** 2


def patchify(image, patch_size):
    """(..., H, W, C) -> (..., (H/p)*(W/p), p*p*C), patches flattened row-major."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    *lead, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch {p}")
    n = len(lead)
    x = reshape(x, tuple(lead) + (h // p, p, w // p, p, c))
    x = transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return reshape(x, tuple(lead) + ((h // p) * (w // p), p * p * c))


@dataclass
class VisualTokens:
    tensor: Tensor  # (frames * tokens_per_frame, dim)
    frames: int
    tokens_per_frame: int


class VisionEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Linear(p * p * 3, cfg.dim, rng)
        self.pos_emb = Parameter(normal(rng, (cfg.tokens_per_frame, cfg.dim), 0.02), decay=False)
        self.blocks = [Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.dim)

    def __call__(self, images):
        """(B, H, W, 3) pixels in [0, 1] -> (B, tokens_per_frame, dim)."""
        x = patchify(Tensor((np.asarray(images) - 0.5) * 2.0), self.cfg.patch_size)
        x = add(self.patch_embed(x), self.pos_emb)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


def fit_frames(frames, target):
    """Duplicate a short clip (an image) or evenly sample a long one to ``target`` frames."""
    f = len(frames)
    if f == 0:
        raise ContractError("no frames given")
    if f == target:
        return frames
    if f > target:
        idx = np.linspace(0, f - 1, target).round().astype(int)
    else:
        idx = np.arange(target) % f
    return frames[idx]


def encode(frames, cfg, params):
    """Encode one sample's frames (list or (F, H, W, 3) array) to VisualTokens."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    frames = fit_frames(frames, cfg.frames)
    with no_grad():
        out = params(frames)
    d = out.shape[-1]
    return VisualTokens(reshape(out, (cfg.frames * cfg.tokens_per_frame, d)), cfg.frames,
                        cfg.tokens_per_frame)


def encode_batch(params, frame_lists, target_frames, chunk=64):
    """Frozen features for many samples: (N, target_frames, tokens_per_frame, dim) float32."""
    cfg = params.cfg
    stacked = np.stack([fit_frames(np.asarray(f), target_frames) for f in frame_lists])
    n = stacked.shape[0]
    flat = stacked.reshape((n * target_frames,) + stacked.shape[2:])
    out = np.empty((flat.shape[0], cfg.tokens_per_frame, cfg.dim), dtype=np.float32)
    with no_grad():
        for lo in range(0, flat.shape[0], chunk):
            out[lo:lo + chunk] = params(flat[lo:lo + chunk]).data
    return out.reshape(n, target_frames, cfg.tokens_per_frame, cfg.dim)


def patch_labels(scene, cfg, frame_index=0):
    """Class of the object under each patch centre (0 = background,
    1 + colour*3 + shape otherwise) for the dense pretraining objective."""
    p = cfg.patch_size
    g = cfg.image_size // p
    img = data.render(scene, frame_index)
    labels = np.zeros(g * g, dtype=np.int64)
    lut = {tuple(np.float32(v) for v in data.RGB[c]): ci for ci, c in enumerate(data.COLORS)}
    for k in range(g * g):
        r, c = divmod(k, g)
        px = tuple(img[r * p + p // 2, c * p + p // 2])
        if px in lut:
            color = lut[px]
            # the shape under a coloured pixel: the nearest object of that colour
            cy, cx = r * p + p / 2, c * p + p / 2
            best = min(
                (o for o in scene.objects if data.COLORS.index(o.color) == color),
                key=lambda o: sum((a - b) ** 2 for a, b in zip(data.object_center(o), (cy, cx))),
            )
            labels[k] = 1 + color * 3 + data.SHAPES.index(best.shape)
    return labels


def pretrain_stub(cfg, seed, steps=None, batch_size=32, lr=1e-3):
    """Build the frozen encoder.

    ``cfg.pretrain_mode == "random"`` returns the deterministic random init;
    ``"dense"`` additionally trains it briefly to classify the object under
    every patch so its tokens carry colour/shape/location signal.  Returns
    ``(encoder, metadata)``.
    """
    enc = VisionEncoder(cfg, np.random.default_rng([seed, 202]))
    meta = {"pretrain_mode": cfg.pretrain_mode, "size_tag": cfg.size_tag, "steps": 0}
    if cfg.pretrain_mode == "random":
        return enc.requires_grad_(False), meta
    if cfg.pretrain_mode != "dense":
        raise ValueError(f"unknown pretrain_mode {cfg.pretrain_mode!r}")
    steps = cfg.pretrain_steps if steps is None else steps
    head = Linear(cfg.dim, 13, np.random.default_rng([seed, 203]))
    opt_cfg = OptimizerConfig(base_lr=lr, warmup_steps=max(1, steps // 10), total_steps=steps,
                              batch_size=batch_size, weight_decay=0.0)
    named = list(enc.named_parameters()) + [("head." + n, p) for n, p in head.named_parameters()]
    opt = AdamW(named, opt_cfg)
    for step in range(1, steps + 1):
        rng = np.random.default_rng([seed, 204, step])
        scenes = [data.make_scene(seed, "train", int(i)) for i in rng.integers(0, 10 ** 6, batch_size)]
        images = np.stack([data.render(s) for s in scenes])
        labels = np.stack([patch_labels(s, cfg) for s in scenes])
        loss = cross_entropy(head(enc(images)), labels)
        backward(loss)
        clip_grad_norm([p for _, p in named], 1.0)
        opt.step(lr_at(step, opt_cfg))
        opt.zero_grad()
    meta["steps"] = steps
    meta["final_loss"] = loss.item()
    return enc.requires_grad_(False), meta
