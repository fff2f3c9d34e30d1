from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Value


class Parameter(Value):
    """A trainable leaf value carrying AdamW moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str | None = None, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def assign(self, data: np.ndarray) -> None:
        """Replace the value in place (shape must match); moments are reset."""
        data = np.asarray(data)
        if data.shape != self.shape:
            raise ValueError(f"{self.name}: cannot assign shape {data.shape} to {self.shape}")
        self.data = np.ascontiguousarray(data, dtype=self.dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.dtype.type(scale)
    return norm


def adamw_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update with decoupled weight decay; gradients are cleared afterwards.

    Parameters without a gradient are skipped entirely (their step count does not advance).
    """
    for p in params:
        if p.grad is None:
            continue
        t = p.dtype.type
        g = p.grad
        p.step += 1
        if weight_decay:
            p.data *= t(1.0 - lr * weight_decay)
        p.m *= t(beta1)
        p.m += t(1.0 - beta1) * g
        p.v *= t(beta2)
        p.v += t(1.0 - beta2) * g * g
        bc1 = 1.0 - beta1 ** p.step
        bc2 = 1.0 - beta2 ** p.step
        denom = np.sqrt(p.v) / t(np.sqrt(bc2)) + t(eps)
        p.data -= t(lr / bc1) * p.m / denom
        p.grad = None
