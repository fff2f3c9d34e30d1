"""Autoregressive box-token decoder with a causal self-attention mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import Vocabulary
from .engine import Parameter, Value, add, concat, embedding_lookup, gelu, reshape, take
from .nn import DecoderBlock, LayerNorm, Linear, Module, trunc_normal


@dataclass
class DecoderConfig:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 5
    n_bins: int = 4000
    bidirectional: bool = False
    head_hidden: int | None = None  # None: same as dim

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class CausalMask:
    allowed: np.ndarray  # bool [L, L], allowed[i, j] = j <= i


def build_causal_mask(L: int) -> CausalMask:
    if L < 1:
        raise ValueError("mask length must be at least 1")
    return CausalMask(np.tril(np.ones((L, L), dtype=bool)))


class CausalDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = Vocabulary(cfg.n_bins)
        D = cfg.dim
        H = cfg.head_hidden or D
        # coordinate words, END and START; task prompts live with the fusion module
        self.word_embed = Parameter(trunc_normal(rng, (cfg.n_bins + 2, D)))
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.max_len, D)))
        if cfg.bidirectional:
            self.queries = Parameter(trunc_normal(rng, (4, D)))
        self.blocks = [DecoderBlock(rng, D, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)]
        self.norm = LayerNorm(D)
        self.head1 = Linear(rng, D, H)
        self.head2 = Linear(rng, H, H)
        self.head3 = Linear(rng, H, self.vocab.head_size)

    def head(self, x: Value) -> Value:
        return self.head3(gelu(self.head2(gelu(self.head1(x)))))

    def _embed(self, ids: np.ndarray, prompt_table: Value | None) -> Value:
        n_words = self.word_embed.shape[0]
        if ids.min() < 0 or ids.max() >= self.vocab.size:
            raise ValueError(f"token id outside vocabulary of {self.vocab.size}")
        if ids.max() >= n_words:
            if prompt_table is None:
                raise ValueError("task-prompt token given but no prompt embeddings are available")
            table = concat([self.word_embed, prompt_table], axis=0)
        else:
            table = self.word_embed
        return embedding_lookup(table, ids)

    def _run(self, x: Value, memory: Value, causal: bool) -> Value:
        B, L, D = x.shape
        pos = reshape(take(self.pos_embed, 0, L, axis=0), (L * D,))
        x = reshape(add(reshape(x, (B, L * D)), pos), (B, L, D))
        mask = build_causal_mask(L).allowed if causal else None
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.head(self.norm(x))

    def forward_teacher_forced(self, input_ids, visual: Value,
                               prompt_table: Value | None = None) -> Value:
        """Logits [B, 5, n_bins+1] for decoder inputs [B, 5] (START-or-prompt, 4 coordinates).

        In bidirectional mode the ids are ignored and [B, 4, n_bins+1] logits are produced
        from four learned query tokens attending to each other without a mask.
        """
        if self.cfg.bidirectional:
            return self.forward_bidirectional(visual)
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.max_len:
            raise ValueError(f"teacher forcing needs [B, {self.cfg.max_len}] ids, got {ids.shape}")
        return self._run(self._embed(ids, prompt_table), visual, causal=True)

    def forward_bidirectional(self, visual: Value) -> Value:
        B = visual.shape[0]
        q = reshape(concat([reshape(self.queries, (1, 4, self.cfg.dim))] * B, axis=0), (B, 4, self.cfg.dim))
        return self._run(q, visual, causal=False)

    def decode_step(self, prefix_ids: Sequence[Sequence[int]] | np.ndarray, visual: Value,
                    prompt_table: Value | None = None) -> Value:
        """Logits [B, n_bins+1] for the position following ``prefix_ids`` [B, k]."""
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if not 1 <= ids.shape[1] <= self.cfg.max_len:
            raise ValueError(f"prefix length {ids.shape[1]} outside [1, {self.cfg.max_len}]")
        logits = self._run(self._embed(ids, prompt_table), visual, causal=True)
        L = ids.shape[1]
        return reshape(take(logits, L - 1, L, axis=1), (ids.shape[0], logits.shape[-1]))
