"""AdamW optimizer and the warmup-plus-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


def base_lr_for_batch(batch: int, reference_lr: float = 5e-4,
                      reference_batch: int = 512) -> float:
    """Linear learning-rate scaling: reference_lr * batch / reference_batch."""
    return reference_lr * batch / reference_batch


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to base_lr, then cosine decay to min_lr.

    The curve is continuous on [0, total_steps] with lr(warmup_steps) ==
    base_lr and lr(total_steps) == min_lr.
    """

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        problems = []
        if self.base_lr <= 0:
            problems.append(f"base_lr must be positive, got {self.base_lr}")
        if self.min_lr < 0:
            problems.append(f"min_lr must be nonnegative, got {self.min_lr}")
        if self.min_lr > self.base_lr:
            problems.append("min_lr must not exceed base_lr")
        if self.total_steps < 1:
            problems.append(f"total_steps must be positive, got {self.total_steps}")
        if self.warmup_steps < 0:
            problems.append("warmup_steps must be nonnegative")
        if self.warmup_steps >= self.total_steps:
            problems.append(
                f"warmup_steps {self.warmup_steps} must be below "
                f"total_steps {self.total_steps}"
            )
        if problems:
            raise ConfigError(problems)

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ContractError(
                f"step {step} outside schedule range [0, {self.total_steps}]"
            )
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (
            1.0 + math.cos(math.pi * progress)
        )


class AdamW:
    """Adam with decoupled weight decay over a named parameter registry.

    Update per parameter (bias-corrected moments m_hat, v_hat):

        p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    The decay term multiplies the raw parameter, not the gradient, so it is
    unaffected by the adaptive scaling.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        if not params:
            raise ConfigError(["optimizer needs at least one parameter"])
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        """Apply one update using each parameter's accumulated gradient.

        Parameters whose grad is None are left untouched.  ``lr`` overrides
        the stored rate for this step only (schedule hook).
        """
        rate = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= rate * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of moment buffers for checkpointing."""
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out
