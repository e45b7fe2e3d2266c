"""AdamW with decoupled weight decay and a cosine schedule with warm restarts."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDiverged


def default_decay_mask(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return name.rsplit(".", 1)[-1] not in ("bias", "gamma", "beta")


def adamw_update(param, grad, m, v, t, lr, weight_decay, decay, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW step on raw arrays; ``m`` and ``v`` are updated in place, the new param returned."""
    b1, b2 = betas
    if decay and weight_decay:
        param = param - lr * weight_decay * param
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(
        self,
        named_params,
        lr: float = 5e-5,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        decay_mask=default_decay_mask,
    ):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decay = {name: bool(decay_mask(name)) for name, _ in self.named}
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        for name, p in self.named:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            new = adamw_update(
                p.data, grad, self.m[name], self.v[name], self.t, lr, self.weight_decay,
                self.decay[name], self.betas, self.eps,
            )
            p.data = new.astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out


@dataclass(frozen=True)
class CosineWarmRestarts:
    lr_max: float = 5e-5
    lr_min: float = 5e-6
    t0: int = 40000
    t_mult: int = 2

    def __post_init__(self):
        if self.t0 < 1 or self.t_mult < 1 or self.lr_min > self.lr_max:
            raise ValueError(f"invalid schedule {self}")

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        period = self.t0
        while step >= period:
            step -= period
            period *= self.t_mult
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * step / period))
