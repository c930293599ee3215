from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.8, 0.99), eps: float = 1e-8,
                 clip_norm: float | None = 1e3):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self) -> tuple[float, bool]:
        """Apply one update. Returns (pre-clip gradient norm, whether clipping fired)."""
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = 1.0
        clipped = self.clip_norm is not None and norm > self.clip_norm
        if clipped:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm, clipped
