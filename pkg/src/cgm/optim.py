"""Adam with bias correction and a cosine learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mlp import ParamVector


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total)) / 2``, decaying from ``lr0`` to 0."""
    if total < 1:
        raise ValueError("total must be positive")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros(len(params)), np.zeros(len(params)), 0)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector, lr: float,
              eps: float = 1e-8, betas=(0.9, 0.999)) -> tuple[AdamState, ParamVector]:
    """One bias-corrected Adam update; returns a new state and new parameters."""
    params.check_compatible(grad)
    if state.m.shape != params.values.shape or state.v.shape != params.values.shape:
        raise ValueError("optimizer state does not match the parameters")
    b1, b2 = betas
    g = grad.values
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), params.with_values(new_values)
