"""AdamW, global-norm clipping and the warm-up + cosine learning-rate curve."""
from __future__ import annotations

import math
from typing import Dict, Iterable

import numpy as np

from .autodiff import Tensor


def warmup_cosine(step: float, total_steps: int, peak: float, warmup_ratio: float) -> float:
    """Linear ramp 0 -> ``peak`` over ``warmup_ratio * total_steps`` steps,
    then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_ratio * total_steps
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    progress = (step - warm) / (total_steps - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    return math.sqrt(sq)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = grad_norm(params)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay over a fixed list of tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, lr_scales=None):
        self.params = list(params)
        # optional per-tensor multipliers on the step size
        scales = [1.0] * len(self.params) if lr_scales is None else [float(x) for x in lr_scales]
        if len(scales) != len(self.params):
            raise ValueError(f"{len(scales)} lr scales for {len(self.params)} tensors")
        self.scales = {id(p): c for p, c in zip(self.params, scales)}
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            step = lr * self.scales[id(p)]
            if step == 0.0:
                continue
            if self.weight_decay:
                p.data *= 1.0 - step * self.weight_decay
            p.data -= step * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
