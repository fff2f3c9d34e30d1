"""Joint ViT-style encoder over template and search patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Parameter, Value, add, concat, mean, reshape, take
from .nn import EncoderBlock, LayerNorm, Linear, Module, trunc_normal

SEGMENT_TEMPLATE, SEGMENT_DYNAMIC, SEGMENT_SEARCH, SEGMENT_AUX = range(4)
FEATURE_VARIANTS = ("search", "concat", "average")


@dataclass
class EncoderConfig:
    image_size: int = 64
    template_size: int | None = None  # None: same as image_size
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    joint_extraction: bool = True
    channels: int = 3
    out_dim: int = 64

    def __post_init__(self):
        for size in (self.image_size, self.tsize):
            if size % self.patch_size:
                raise ValueError(f"image size {size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def tsize(self) -> int:
        return self.template_size or self.image_size

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_template_patches(self) -> int:
        return (self.tsize // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class VisualFeatures:
    tokens: Value                       # [B, T, out_dim]
    search_span: tuple[int, int]
    image_spans: list[tuple[int, int]]  # templates then search


def patchify(img: np.ndarray, P: int) -> np.ndarray:
    """[C, H, W] or [B, C, H, W] -> [(B,) N, P*P*C], patches in raster order, pixels (row, col, channel)."""
    batched = img.ndim == 4
    x = img if batched else img[None]
    B, C, H, W = x.shape
    if H % P or W % P:
        raise ValueError(f"image {H}x{W} not divisible by patch size {P}")
    x = x.reshape(B, C, H // P, P, W // P, P).transpose(0, 2, 4, 3, 5, 1)
    out = np.ascontiguousarray(x.reshape(B, (H // P) * (W // P), P * P * C))
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, P: int, C: int, H: int, W: int) -> np.ndarray:
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    B = x.shape[0]
    x = x.reshape(B, H // P, W // P, P, P, C).transpose(0, 5, 1, 3, 2, 4)
    out = np.ascontiguousarray(x.reshape(B, C, H, W))
    return out if batched else out[0]


def sincos_grid(side: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table [side*side, dim] in raster order; the starting
    point for the learnable position embedding, so patch tokens carry their location from step 0."""
    if dim % 4:
        raise ValueError(f"position table needs dim divisible by 4, got {dim}")
    freq = 1.0 / 10000.0 ** (np.arange(dim // 4) / (dim // 4))
    ys, xs = np.divmod(np.arange(side * side), side)
    ax, ay = xs[:, None] * freq, ys[:, None] * freq
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1).astype(np.float32)


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        D = cfg.dim
        self.patch_embed = Linear(rng, cfg.patch_dim, D)
        self.pos = Parameter(sincos_grid(cfg.image_size // cfg.patch_size, D))
        if cfg.tsize != cfg.image_size:
            self.pos_template = Parameter(sincos_grid(cfg.tsize // cfg.patch_size, D))
        self.segment = Parameter(trunc_normal(rng, (4, D)))
        self.blocks = [EncoderBlock(rng, D, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)]
        self.norm = LayerNorm(D)
        self.out_proj = Linear(rng, D, cfg.out_dim)

    def embed_image(self, img: np.ndarray, segment: int) -> Value:
        """Patch embedding + position + segment for a batch of images [B, C, H, W]."""
        x = self.patch_embed(Value(patchify(img.astype(self.pos.dtype, copy=False), self.cfg.patch_size)))
        pos = self.pos if img.shape[-1] == self.cfg.image_size else self.pos_template
        return add(_add_rows(x, pos), _row(self.segment, segment))

    def run_blocks(self, x: Value, hook=None, span: tuple[int, int] | None = None) -> Value:
        for i, block in enumerate(self.blocks):
            if hook is not None:
                x = hook.before_block(i, x, span)
            x = block(x)
        return x

    def encode_joint(self, templates: list[np.ndarray], search: np.ndarray, hook=None,
                     prompt: Value | None = None) -> VisualFeatures:
        """Encode 1-2 templates and a search image (all [B, C, H, W]).

        ``hook`` is a bound multimodal fusion hook; ``prompt`` a [B, 1, D] task-prompt embedding.
        """
        cfg = self.cfg
        if not 1 <= len(templates) <= 2:
            raise ValueError(f"expected 1 or 2 templates, got {len(templates)}")
        for t in templates:
            if t.shape[0] != search.shape[0] or t.shape[1:] != (cfg.channels, cfg.tsize, cfg.tsize):
                raise ValueError(f"template shape {t.shape} does not match configured size {cfg.tsize}")
        if search.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"search shape {search.shape} does not match configured size {cfg.image_size}")

        segs = [SEGMENT_TEMPLATE, SEGMENT_DYNAMIC][: len(templates)]
        t_tokens = [self.embed_image(t, s) for t, s in zip(templates, segs)]
        s_tokens = self.embed_image(search, SEGMENT_SEARCH)
        if hook is not None:
            s_tokens = hook.on_input(s_tokens)
        extra = hook.extra_tokens() if hook is not None else None

        offset = 1 if prompt is not None else 0
        spans, pos = [], offset
        for t in t_tokens:
            spans.append((pos, pos + t.shape[1]))
            pos += t.shape[1]
        search_span = (pos, pos + s_tokens.shape[1])
        spans.append(search_span)

        if cfg.joint_extraction:
            parts = ([prompt] if prompt is not None else []) + t_tokens + [s_tokens]
            if extra is not None:
                parts.append(extra)
            x = self.run_blocks(concat(parts, axis=1), hook, search_span)
        else:
            outs = [self.run_blocks(t) for t in t_tokens]
            sparts = ([prompt] if prompt is not None else []) + [s_tokens]
            if extra is not None:
                sparts.append(extra)
            s_in = concat(sparts, axis=1) if len(sparts) > 1 else sparts[0]
            s_out = self.run_blocks(s_in, hook, (offset, offset + s_tokens.shape[1]))
            pieces = []
            if prompt is not None:
                pieces.append(take(s_out, 0, 1, axis=1))
            pieces += outs
            pieces.append(take(s_out, offset, s_out.shape[1], axis=1))
            x = concat(pieces, axis=1)
        x = self.out_proj(self.norm(x))
        return VisualFeatures(x, search_span, spans)


def _row(table: Value, i: int) -> Value:
    return reshape(take(table, i, i + 1, axis=0), (table.shape[1],))


def _add_rows(x: Value, pos: Value) -> Value:
    """Add a [N, D] table to every batch item of x [B, N, D]."""
    B, N, D = x.shape
    return reshape(add(reshape(x, (B, N * D)), reshape(pos, (N * D,))), (B, N, D))


def select_search_features(f: VisualFeatures, variant: str = "search") -> Value:
    if variant == "search":
        return take(f.tokens, f.search_span[0], f.search_span[1], axis=1)
    if variant == "concat":
        return f.tokens
    if variant == "average":
        means = [mean(take(f.tokens, a, b, axis=1), axis=1, keepdims=True) for a, b in f.image_spans]
        return mean(concat(means, axis=1), axis=1, keepdims=True)
    raise ValueError(f"unknown feature variant {variant!r}; expected one of {FEATURE_VARIANTS}")
