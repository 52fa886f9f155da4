"""Adam optimizer with linear learning-rate warmup."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class TrainingError(RuntimeError):
    """Non-recoverable optimization failure (e.g. non-finite gradient)."""


class AdamState:
    """Per-parameter moment accumulators plus the warmup schedule.

    The effective learning rate is ``base_lr * min(1, step / warmup_steps)``:
    zero at step 0, reaching ``base_lr`` exactly at ``step == warmup_steps``.
    """

    def __init__(self, base_lr: float = 3e-5, warmup_steps: int = 500,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def effective_lr(self) -> float:
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, self.step / self.warmup_steps)


def adam_step(params: dict[str, Tensor], state: AdamState,
              grad_clip: float = 0.0) -> float:
    """Apply one Adam update from the gradients currently stored on `params`.

    Parameters without a gradient are skipped. Returns the effective
    learning rate used. ``grad_clip`` > 0 rescales the global gradient norm.
    """
    lr = state.effective_lr()
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        grads[name] = p.grad

    if grad_clip > 0.0 and grads:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    state.step += 1
    return lr


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None
