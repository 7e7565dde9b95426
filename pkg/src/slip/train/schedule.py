"""Learning-rate schedule and optimizer hyperparameters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

from ..errors import ConfigError, ContractError

# decoupled weight decay per training mode; SSL-only training follows the joint recipe
DEFAULT_WEIGHT_DECAY = {"clip": 0.5, "slip": 0.1, "simclr": 0.1, "decoupled": 0.1}


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: Optional[float] = None  # None: the mode default
    batch_size: int = 64
    epochs: int = 25
    warmup_epochs: float = 1.0
    grad_accum_steps: int = 1
    min_lr: float = 0.0
    max_steps: Optional[int] = None  # overrides epochs * steps_per_epoch
    warmup_steps: Optional[int] = None  # overrides warmup_epochs * steps_per_epoch

    def __post_init__(self):
        if self.base_lr <= 0 or self.eps <= 0:
            raise ConfigError("base_lr and eps must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if self.epochs <= 0:
            raise ConfigError("epochs must be > 0")
        if self.warmup_steps is None and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.warmup_steps is not None and self.max_steps is not None and self.warmup_steps >= self.max_steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be < max_steps ({self.max_steps})")
        if self.grad_accum_steps < 1 or self.batch_size % self.grad_accum_steps:
            raise ConfigError("grad_accum_steps must be >= 1 and divide batch_size")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError("min_lr must lie in [0, base_lr]")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    def decay_for(self, mode: str) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        try:
            return DEFAULT_WEIGHT_DECAY[mode]
        except KeyError:
            raise ConfigError(f"no default weight decay for mode {mode!r}") from None

    def total_steps(self, steps_per_epoch: int) -> int:
        return self.max_steps if self.max_steps is not None else self.epochs * steps_per_epoch

    def warmup(self, steps_per_epoch: int) -> int:
        total = self.total_steps(steps_per_epoch)
        w = self.warmup_steps if self.warmup_steps is not None else int(round(self.warmup_epochs * steps_per_epoch))
        return min(w, total - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0, then half-cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ContractError(f"need 0 <= warmup_steps ({warmup_steps}) < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
