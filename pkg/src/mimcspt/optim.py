"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = ["AdamW", "cosine_lr"]


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter table.

    Decay is applied multiplicatively (w *= 1 - lr * wd) before the
    bias-corrected Adam delta. Moments are float32 buffers keyed by
    parameter name and can be exported/imported for checkpointing.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 lr_scale: dict[str, float] | None = None):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_scale = lr_scale or {}
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param {name} shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            plr = lr * self.lr_scale.get(name, 1.0)
            if self.weight_decay != 0.0:
                p.data = p.data * (1.0 - plr * self.weight_decay)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - plr * update

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat view of the moment buffers for checkpointing."""
        out = {}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"optim.m.{k}"].copy()
            self.v[k] = tensors[f"optim.v.{k}"].copy()
        self.step_count = int(step_count)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to base_lr over warmup_steps, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup {warmup_steps} must be < total {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
