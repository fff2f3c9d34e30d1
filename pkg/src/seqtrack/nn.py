"""Transformer building blocks on top of the autodiff engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .engine import (
    Parameter,
    Value,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    take,
    transpose,
)


class Module:
    """Parameter container; parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False):
        w = np.zeros((d_in, d_out), np.float32) if zero else xavier(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32))

    def __call__(self, x: Value) -> Value:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))

    def __call__(self, x: Value) -> Value:
        return layer_norm(x, self.gamma, self.beta, 1e-5)


def split_heads(x: Value, heads: int) -> Value:
    B, T, D = x.shape
    return transpose(reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def merge_heads(x: Value) -> Value:
    B, H, T, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def attention(q: Value, k: Value, v: Value, mask: np.ndarray | None = None) -> Value:
    """Scaled dot-product attention on [B, H, T, dh] operands."""
    dh = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return matmul(softmax(scores, mask), v)


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Value, mask: np.ndarray | None = None) -> Value:
        D = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = (split_heads(take(qkv, i * D, (i + 1) * D, axis=-1), self.heads) for i in range(3))
        return self.proj(merge_heads(attention(q, k, v, mask)))


class CrossAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, kv_dim: int | None = None,
                 zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.kv = Linear(rng, kv_dim or dim, 2 * dim)
        self.proj = Linear(rng, dim, dim, zero=zero_out)

    def __call__(self, x: Value, memory: Value) -> Value:
        D = x.shape[-1]
        q = split_heads(self.q(x), self.heads)
        kv = self.kv(memory)
        k = split_heads(take(kv, 0, D, axis=-1), self.heads)
        v = split_heads(take(kv, D, 2 * D, axis=-1), self.heads)
        return self.proj(merge_heads(attention(q, k, v)))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Value) -> Value:
        return self.fc2(gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm bidirectional transformer block."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn: int):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn)

    def __call__(self, x: Value) -> Value:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.ffn(self.norm2(x)))


class DecoderBlock(Module):
    """Masked self-attention, cross-attention to visual features, then FFN (all pre-norm)."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn: int):
        self.norm1 = LayerNorm(dim)
        self.self_attn = SelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = CrossAttention(rng, dim, heads)
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn)

    def __call__(self, x: Value, memory: Value, mask: np.ndarray | None) -> Value:
        x = add(x, self.self_attn(self.norm1(x), mask))
        x = add(x, self.cross_attn(self.norm2(x), memory))
        return add(x, self.ffn(self.norm3(x)))


def splice(x: Value, start: int, stop: int, delta: Value) -> Value:
    """Return ``x`` with ``delta`` added to tokens ``[start, stop)`` along axis 1."""
    parts = []
    if start > 0:
        parts.append(take(x, 0, start, axis=1))
    parts.append(add(take(x, start, stop, axis=1), delta))
    if stop < x.shape[1]:
        parts.append(take(x, stop, x.shape[1], axis=1))
    return concat(parts, axis=1) if len(parts) > 1 else parts[0]
