"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from relayformer.errors import ShapeError
from relayformer.numerics.tensor import Tensor


@dataclass
class CosineSchedule:
    base_lr: float = 1e-4
    min_lr: float = 5e-7
    warmup_steps: int = 0
    total_steps: int = 1

    def lr_at(self, step: int) -> float:
        """Learning rate for the ``step``-th update (1-based)."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    schedule: CosineSchedule = field(default_factory=CosineSchedule)
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def base_lr(self) -> float:
        return self.schedule.base_lr


def adamw_step(params: dict[str, Tensor], state: OptimState, grads: dict[str, np.ndarray] | None = None) -> float:
    """Apply one decoupled-weight-decay Adam update in place; returns the lr used.

    ``grads`` defaults to each parameter's accumulated ``.grad``; parameters
    without a gradient are skipped. Weight decay only touches tensors of rank
    >= 2, leaving norm affines and biases alone.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.schedule.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and p.ndim >= 2:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None
