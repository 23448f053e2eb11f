"""
AdamW optimizer with global-norm gradient clipping, and the step schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from vecmap.numerics.tensor import Tensor
from vecmap.utils.errors import TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    """Linear warm-up followed by a single 10x step decay."""

    base_lr: float
    warmup_steps: int
    decay_step: int
    decay_factor: float = 0.1

    def lr_at(self, step: int) -> float:
        """
        Learning rate at a given step.

        Args:
            step: Zero-based optimizer step

        Returns:
            base * min(step / warmup, 1) * (decay_factor if step >= decay_step else 1)
        """
        warm = 1.0 if self.warmup_steps <= 0 else min(step / self.warmup_steps, 1.0)
        decay = self.decay_factor if step >= self.decay_step else 1.0
        return self.base_lr * warm * decay


def lr_at(step: int, schedule: LRSchedule) -> float:
    return schedule.lr_at(step)


@dataclass
class OptimState:
    """Moment buffers and step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Flat arrays for checkpointing."""
        arrays = {f"adam.m.{k}": a for k, a in self.m.items()}
        arrays.update({f"adam.v.{k}": a for k, a in self.v.items()})
        arrays["adam.step"] = np.array([self.step], dtype=np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "OptimState":
        state = cls()
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                state.m[key[len("adam.m.") :]] = value.copy()
            elif key.startswith("adam.v."):
                state.v[key[len("adam.v.") :]] = value.copy()
        if "adam.step" in arrays:
            state.step = int(arrays["adam.step"][0])
        return state


class AdamW:
    """
    Adam with decoupled weight decay.

    Gradients are clipped to a global L2 norm before the moment update.
    """

    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        schedule: LRSchedule,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
        clip_norm: float = 5.0,
        state: Optional[OptimState] = None,
    ):
        self.params: List[Tuple[str, Tensor]] = list(params)
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = state or OptimState()
        for name, p in self.params:
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))
            if self.state.m[name].shape != p.shape:
                raise TrainingError(
                    f"optimizer state shape mismatch for {name}", detail={"param": name}
                )

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def clip_gradients(self) -> float:
        """
        Scale gradients so their global norm is at most clip_norm.

        Returns:
            Global norm before clipping

        Raises:
            TrainingError: If any gradient is non-finite
        """
        total = 0.0
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(
                    f"non-finite gradient in {name} at step {self.state.step}",
                    detail={"param": name, "step": self.state.step},
                )
            total += float(np.sum(p.grad * p.grad))
        norm = float(np.sqrt(total))
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self) -> float:
        """
        Apply one clipped AdamW update.

        Returns:
            Global gradient norm before clipping
        """
        norm = self.clip_gradients()
        lr = self.schedule.lr_at(self.state.step)
        self.state.step += 1
        t = self.state.step
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t

        for name, p in self.params:
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            if p.grad is None:
                continue
            m = self.state.m[name] = self.beta1 * self.state.m[name] + (1 - self.beta1) * p.grad
            v = self.state.v[name] = self.beta2 * self.state.v[name] + (1 - self.beta2) * p.grad**2
            p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
        return norm


def adamw_step(optimizer: AdamW) -> float:
    """One optimizer step; returns the pre-clip gradient norm."""
    return optimizer.step()
