"""AdamW with global-norm gradient clipping and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            step_count=0,
        )


def clip_global_norm(grads, clip_norm):
    """Scale all gradients so the joint L2 norm is at most clip_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if clip_norm is not None and norm > clip_norm > 0.0:
        factor = clip_norm / norm
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads, norm


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.95, eps=1e-8,
               weight_decay=1e-5, clip_norm=1.0):
    """One optimizer step, in place on `params` and `state`.

    Clipping is applied to the global gradient norm before the moment
    updates; weight decay is decoupled (p *= 1 - lr*wd).
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be positive, got {lr}")
    for name in params:
        g = grads[name]
        if params[name].data.shape != g.shape:
            raise ValueError(f"adamw_step: shape mismatch for {name}: "
                             f"{params[name].data.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adamw_step: non-finite gradient for parameter {name}")

    grads, norm = clip_global_norm(grads, clip_norm)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * update
    return norm
