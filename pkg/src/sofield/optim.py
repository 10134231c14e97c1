"""Adam optimizer and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the per-parameter step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Adam with bias correction.

    Parameters are registered as a name->Tensor mapping. ``step`` reads
    each tensor's ``.grad`` and updates ``.data`` in place; tensors whose
    grad is None are skipped, and their state does not advance, so an
    untouched parameter is bit-identical after the call.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: dict[str, float] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scales = dict(lr_scales or {})
        self.state: dict[str, AdamState] = {
            name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2, eps = self.beta1, self.beta2, self.eps
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            st = self.state[name]
            st.t += 1
            st.m = b1 * st.m + (1.0 - b1) * g
            st.v = b2 * st.v + (1.0 - b2) * (g * g)
            mhat = st.m / (1.0 - b1**st.t)
            vhat = st.v / (1.0 - b2**st.t)
            scale = self.lr_scales.get(name, 1.0)
            p.data -= (lr * scale * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def warmup_cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int,
                     floor: float = 0.0) -> float:
    """Linear ramp over ``warmup_steps`` then cosine decay to ``floor``.

    ``step`` is zero-based; step 0 of a nonzero warmup returns 0 so the
    first update is a no-op in magnitude (not direction of state).
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
