"""Calibration statistics ``h(x)`` and their targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class ConstraintSpec:
    """A statistic together with the expectation we want it to have.

    ``kind="coordinate-threshold"`` gives ``h(x)[i] = 1{x[i] > thresholds[i]}``;
    ``kind="custom"`` calls ``statistic`` on an ``(M, state_dim)`` array of
    terminal states and expects an ``(M, dim)`` array back.
    """

    target: np.ndarray
    kind: str = "coordinate-threshold"
    thresholds: Optional[np.ndarray] = None
    statistic: Optional[Callable[[np.ndarray], np.ndarray]] = None
    condition_id: Optional[int] = None

    def __post_init__(self):
        self.target = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        if self.target.ndim != 1:
            raise ValueError("target must be a vector")
        if self.kind == "coordinate-threshold":
            if self.thresholds is None:
                self.thresholds = np.zeros_like(self.target)
            self.thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
            if self.thresholds.shape != self.target.shape:
                raise ValueError("thresholds and target must have the same length")
            if np.any((self.target <= 0) | (self.target >= 1)):
                raise ValueError("indicator targets must lie strictly inside (0, 1)")
        elif self.kind == "custom":
            if self.statistic is None:
                raise ValueError("custom constraints need a statistic callback")
        else:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite")

    @property
    def dim(self) -> int:
        return self.target.size

    @property
    def is_binary(self) -> bool:
        return self.kind == "coordinate-threshold"


def coordinate_indicator(terminal_state, thresholds) -> np.ndarray:
    x = np.atleast_1d(np.asarray(terminal_state, dtype=np.float64))
    tau = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if x.shape[-1] != tau.shape[-1]:
        raise ValueError(f"state has length {x.shape[-1]} but thresholds have {tau.shape[-1]}")
    return (x > tau).astype(np.float64)


def evaluate_batch(spec: ConstraintSpec, terminal_states) -> np.ndarray:
    """Row ``m`` of the result is ``h(terminal_states[m])``."""
    states = np.asarray(terminal_states, dtype=np.float64)
    if states.ndim != 2:
        raise ValueError("terminal_states must be an (M, k) matrix")
    if spec.kind == "coordinate-threshold":
        if states.shape[1] != spec.dim:
            raise ValueError(f"expected {spec.dim} columns, got {states.shape[1]}")
        return coordinate_indicator(states, spec.thresholds).reshape(states.shape[0], spec.dim)
    out = np.asarray(spec.statistic(states), dtype=np.float64)
    out = out.reshape(states.shape[0], -1)
    if out.shape[1] != spec.dim:
        raise ValueError(f"statistic returned {out.shape[1]} columns, expected {spec.dim}")
    return out
