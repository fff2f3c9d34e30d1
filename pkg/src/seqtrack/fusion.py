"""Unified auxiliary-modality interface: aux sequences, low-rank block fusion, task prompts."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import TASKS, Vocabulary
from .encoder import SEGMENT_AUX, VisionEncoder, _add_rows, _row, patchify
from .engine import (
    Parameter,
    Value,
    add,
    concat,
    embedding_lookup,
    max_reduce,
    mul,
    reshape,
    take,
)
from .nn import CrossAttention, Linear, Module, splice, trunc_normal

FUSION_KINDS = ("lowrank", "add", "attention", "concat")
AUX_KINDS = ("depth", "thermal", "event", "language", "none")


@dataclass
class FusionConfig:
    kind: str = "lowrank"
    rank: int = 32
    enc_prompt: bool = True
    dec_prompt: bool = True
    text_rows: int = 1024

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}; expected one of {FUSION_KINDS}")


@dataclass
class AuxModalitySequence:
    tokens: Value  # [B, N, D]
    kind: str


def lowrank_param_count(D: int, d: int) -> int:
    return 3 * D * d + 2 * d + D


class LowRankAdapter(Module):
    """``up(down_M(M) + down_V(V_search))``; ``up`` starts at zero."""

    def __init__(self, rng: np.random.Generator, D: int, d: int):
        self.down_m = Linear(rng, D, d)
        self.down_v = Linear(rng, D, d)
        self.up = Linear(rng, d, D, zero=True)

    def __call__(self, m: Value, v_search: Value) -> Value:
        return self.up(add(self.down_m(m), self.down_v(v_search)))


def word_ids(text: str, rows: int) -> list[int]:
    return [zlib.crc32(w.encode("utf-8")) % rows for w in text.lower().split()]


def as_three_channel(img: np.ndarray) -> np.ndarray:
    """Replicate single-channel maps so every image-format modality has 3 channels."""
    if img.shape[-3] == 3:
        return img
    if img.shape[-3] != 1:
        raise ValueError(f"aux image must have 1 or 3 channels, got {img.shape}")
    reps = [1] * img.ndim
    reps[-3] = 3
    return np.tile(img, reps)


def resolve_missing(task: str, rgb: np.ndarray, aux_image: np.ndarray | None,
                    text: str | None) -> tuple[np.ndarray, str]:
    """Fill in the modality a sample lacks: PAD text ("") and/or the RGB image."""
    if task not in TASKS and task not in ("rgb", "none"):
        raise ValueError(f"unknown task {task!r}")
    image = aux_image if aux_image is not None else rgb
    return as_three_channel(image), (text or "")


class UnifiedInterface(Module):
    """Trainable multi-modal additions around a frozen base model."""

    def __init__(self, cfg: FusionConfig, encoder: VisionEncoder, dec_dim: int, n_bins: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        ecfg = encoder.cfg
        D = ecfg.dim
        self.dim = D
        self.patch_size = ecfg.patch_size
        self.vocab = Vocabulary(n_bins)
        self.aux_proj = Linear(rng, ecfg.patch_size ** 2 * 3, D)
        # near-ones so that language modulation starts close to identity
        self.text_table = Parameter(1.0 + trunc_normal(rng, (cfg.text_rows, D)))
        self.enc_prompt = Parameter(trunc_normal(rng, (len(TASKS), D)))
        self.dec_prompt = Parameter(trunc_normal(rng, (len(TASKS), dec_dim)))
        if cfg.kind == "lowrank":
            self.adapters = [LowRankAdapter(rng, D, cfg.rank) for _ in range(ecfg.depth)]
        elif cfg.kind == "attention":
            self.cross = [CrossAttention(rng, D, ecfg.heads, zero_out=True) for _ in range(ecfg.depth)]
        elif cfg.kind == "concat":
            self.aux_segment = Parameter(trunc_normal(rng, (D,)))
        self._encoder = encoder

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if not name[len(prefix):].startswith("_encoder."):
                yield name, p

    # -- unified sequence -------------------------------------------------

    def embed_aux_image(self, img: np.ndarray, kind: str = "none") -> AuxModalitySequence:
        """Patch-embed [B, C, H, W] aux images with the dedicated projection."""
        if kind not in AUX_KINDS:
            raise ValueError(f"unknown aux kind {kind!r}")
        img = as_three_channel(img)
        size = self._encoder.cfg.image_size
        if img.shape[-2:] != (size, size):
            raise ValueError(f"aux image {img.shape[-2:]} does not match search size {size}")
        patches = patchify(img.astype(self.aux_proj.weight.dtype, copy=False), self.patch_size)
        return AuxModalitySequence(self.aux_proj(Value(patches)), kind)

    def embed_language(self, text: str) -> Value:
        """Max-pooled hashed word embedding [D]; empty text is the zero (PAD) vector."""
        ids = word_ids(text, self.cfg.text_rows)
        if not ids:
            return Value(np.zeros(self.dim, self.text_table.dtype))
        return max_reduce(embedding_lookup(self.text_table, ids), axis=0)

    @staticmethod
    def channelwise_modulate(seq: AuxModalitySequence, text: Sequence[Value | None]) -> AuxModalitySequence:
        """Multiply every token of sample b by ``text[b]``; ``None`` (PAD) leaves it unchanged."""
        if all(t is None for t in text):
            return seq
        B, N, D = seq.tokens.shape
        rows = []
        for b, t in enumerate(text):
            tok = take(seq.tokens, b, b + 1, axis=0)
            if t is not None:
                if t.shape != (D,):
                    raise ValueError(f"text embedding {t.shape} does not match token dim {D}")
                tok = mul(tok, t)
            rows.append(tok)
        return AuxModalitySequence(concat(rows, axis=0) if B > 1 else rows[0], seq.kind)

    def aux_sequence(self, aux_images: np.ndarray, texts: Sequence[str], kind: str = "none") -> AuxModalitySequence:
        seq = self.embed_aux_image(aux_images, kind)
        emb = [self.embed_language(t) if word_ids(t, self.cfg.text_rows) else None for t in texts]
        return self.channelwise_modulate(seq, emb)

    # -- task prompts -----------------------------------------------------

    def inject_task_prompt(self, task: str, where: str):
        """Encoder: the prompt embedding row [D]. Decoder: the prompt token id."""
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        if where == "encoder":
            return _row(self.enc_prompt, TASKS.index(task))
        if where == "decoder":
            return self.vocab.prompt(task)
        raise ValueError(f"prompt location must be 'encoder' or 'decoder', got {where!r}")

    def encoder_prompts(self, tasks: Sequence[str]) -> Value | None:
        if not self.cfg.enc_prompt:
            return None
        idx = [TASKS.index(t) for t in tasks]
        return reshape(embedding_lookup(self.enc_prompt, idx), (len(idx), 1, self.dim))

    def first_tokens(self, tasks: Sequence[str]) -> list[int]:
        if not self.cfg.dec_prompt:
            return [self.vocab.start] * len(tasks)
        return [self.vocab.prompt(t) for t in tasks]

    def bind(self, aux: AuxModalitySequence) -> "FusionHook":
        return FusionHook(self, aux.tokens)


class FusionHook:
    """Per-forward fusion state handed to the encoder."""

    def __init__(self, iface: UnifiedInterface, m0: Value):
        self.iface = iface
        self.kind = iface.cfg.kind
        self.m0 = m0
        self.m = m0

    def on_input(self, search_tokens: Value) -> Value:
        if self.kind == "add":
            return add(search_tokens, self.m0)
        return search_tokens

    def extra_tokens(self) -> Value | None:
        if self.kind != "concat":
            return None
        enc = self.iface._encoder
        x = _add_rows(self.m0, enc.pos)
        return add(add(x, _row(enc.segment, SEGMENT_AUX)), self.iface.aux_segment)

    def before_block(self, i: int, x: Value, span: tuple[int, int]) -> Value:
        a, b = span
        if self.m.shape[1] != b - a:
            raise ValueError(f"aux sequence of {self.m.shape[1]} tokens does not align with span {span}")
        if self.kind == "lowrank":
            return fuse_block_input(self.iface.adapters[i], self, x, span)
        if self.kind == "attention":
            return splice(x, a, b, self.iface.cross[i](take(x, a, b, axis=1), self.m0))
        return x


def fuse_block_input(adapter: LowRankAdapter, hook: FusionHook, x: Value, span: tuple[int, int]) -> Value:
    """Compute ``M_l`` from ``M_{l-1}`` and the search span of ``V_{l-1}``; return ``V'``."""
    a, b = span
    hook.m = adapter(hook.m, take(x, a, b, axis=1))
    return splice(x, a, b, hook.m)


def fuse_block(m_prev: Value, v_prev: Value, adapter: LowRankAdapter, block,
               span: tuple[int, int]) -> tuple[Value, Value]:
    """One fused encoder block: ``(M_l, E_l(V'))``."""
    a, b = span
    if m_prev.shape[1] != b - a or b > v_prev.shape[1]:
        raise ValueError(f"aux sequence of {m_prev.shape[1]} tokens does not align with span {span}")
    m_next = adapter(m_prev, take(v_prev, a, b, axis=1))
    return m_next, block(splice(v_prev, a, b, m_next))


def fusion_variant(kind: str) -> str:
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    return kind
