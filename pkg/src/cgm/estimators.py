"""Unbiased loss estimates and score-function gradient estimates.

Every gradient estimator here has the form ``sum_m c_m * score_m`` where
``score_m = grad_theta log p_theta(x_m)`` is the gradient of the importance
weight ``w_m = p_theta(x_m) / p_sg(theta)(x_m)`` at the snapshot (``w_m == 1``
numerically). The coefficient functions return ``c``; the model-specific
``BatchStats.accumulate`` turns ``c`` into a parameter vector without ever
materialising per-sample scores.

Coefficient and loss functions accept extra leading axes, with the sample axis
second-to-last for statistics (``(..., M, k)``) and last for per-sample
scalars (``(..., M)``), so many independent batches can be processed at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class BatchStats:
    """Per-sample quantities of one batch drawn from the snapshot.

    ``accumulate(c)`` must return ``sum_m c[m] * grad_theta log p_theta(x_m)``.
    """

    log_ratio: np.ndarray
    stats: np.ndarray
    accumulate: Callable[[np.ndarray], object]
    rewards: Optional[np.ndarray] = None

    def __post_init__(self):
        self.log_ratio = np.asarray(self.log_ratio, dtype=np.float64)
        self.stats = np.asarray(self.stats, dtype=np.float64)
        if self.stats.ndim == 1:
            self.stats = self.stats[:, None]
        m = self.log_ratio.shape[0]
        if m < 2:
            raise ValueError("a batch needs at least two samples")
        if self.stats.shape[0] != m:
            raise ValueError("stats and log_ratio lengths differ")
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64)
            if self.rewards.shape != (m,):
                raise ValueError("rewards and log_ratio lengths differ")

    @property
    def size(self) -> int:
        return self.log_ratio.shape[0]


@dataclass
class LossReport:
    kl: float
    viol: float = 0.0
    reward_term: float = 0.0
    total: float = 0.0

    @classmethod
    def relax(cls, kl, viol, lam):
        return cls(kl=float(kl), viol=float(viol), total=float(viol + lam * kl))

    @classmethod
    def reward(cls, kl, reward_term):
        return cls(kl=float(kl), reward_term=float(reward_term), total=float(kl + reward_term))


def loo_center(values) -> np.ndarray:
    """Subtract from each entry the mean of the *other* entries (last axis)."""
    v = np.asarray(values, dtype=np.float64)
    m = v.shape[-1]
    if m < 2:
        raise ValueError("leave-one-out centering needs at least two samples")
    total = v.sum(axis=-1, keepdims=True)
    return v - (total - v) / (m - 1)


def kl_loss(log_ratio) -> float:
    return np.mean(np.asarray(log_ratio, dtype=np.float64), axis=-1)


def viol_loss(rows, target=None):
    """Bias-corrected estimate of ``|E[h] - h_star|^2``.

    ``rows`` are the per-sample vectors ``w_m (h(x_m) - h_star)``; pass
    ``target`` to have it subtracted from raw statistics first. The result is
    ``|mean|^2 - trace(sample covariance) / M`` and can be negative.
    """
    y = np.asarray(rows, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if target is not None:
        y = y - np.asarray(target, dtype=np.float64)
    m = y.shape[-2]
    if m < 2:
        raise ValueError("the violation estimate needs at least two samples")
    mean = y.mean(axis=-2)
    spread = ((y - mean[..., None, :]) ** 2).sum(axis=(-2, -1))
    return (mean ** 2).sum(axis=-1) - spread / (m * (m - 1))


def viol_loss_row_grad(rows) -> np.ndarray:
    """Exact derivative of :func:`viol_loss` with respect to each row."""
    y = np.asarray(rows, dtype=np.float64)
    m = y.shape[-2]
    mean = y.mean(axis=-2, keepdims=True)
    return (2.0 / m) * mean - (2.0 / (m * (m - 1))) * (y - mean)


def reward_loss(log_ratio, rewards):
    """KL-to-tilt estimate with the constant log-normalizer dropped."""
    return kl_loss(log_ratio) - np.mean(np.asarray(rewards, dtype=np.float64), axis=-1)


def kl_coefficients(log_ratio) -> np.ndarray:
    """Coefficients of the score-function KL gradient with LOO baseline."""
    l_loo = loo_center(log_ratio)
    return l_loo / l_loo.shape[-1]


def viol_coefficients(stats, target) -> np.ndarray:
    """Chain-rule coefficients of the violation estimate in the weights ``w_m``.

    Rows ``w_m (h_m - h_star)`` are differentiated at ``w = 1``, so
    ``c_m = (h_m - h_star) . dL/dy_m``.
    """
    a = np.asarray(stats, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sum(a * viol_loss_row_grad(a), axis=-1)


def relax_coefficients(log_ratio, stats, target, lam) -> np.ndarray:
    return viol_coefficients(stats, target) + lam * kl_coefficients(log_ratio)


def reward_coefficients(log_ratio, rewards) -> np.ndarray:
    diff = loo_center(log_ratio) - loo_center(rewards)
    return diff / diff.shape[-1]


def forward_kl_coefficients(rewards, base_log_ratio) -> np.ndarray:
    """Distributional policy-gradient weights ``-exp(r_m + log p_base/p_theta) / M``."""
    r = np.asarray(rewards, dtype=np.float64)
    b = np.asarray(base_log_ratio, dtype=np.float64)
    return -np.exp(r + b) / r.shape[-1]


def relax_loss_report(batch: BatchStats, lam, target) -> LossReport:
    kl = kl_loss(batch.log_ratio)
    viol = viol_loss(batch.stats, target)
    return LossReport.relax(kl, viol, lam)


def reward_loss_report(batch: BatchStats) -> LossReport:
    if batch.rewards is None:
        raise ValueError("batch has no rewards")
    kl = kl_loss(batch.log_ratio)
    return LossReport.reward(kl, -np.mean(batch.rewards))


def grad_relax(batch: BatchStats, lam, target):
    return batch.accumulate(relax_coefficients(batch.log_ratio, batch.stats, target, lam))


def grad_reward(batch: BatchStats):
    if batch.rewards is None:
        raise ValueError("reward gradient needs per-sample rewards")
    return batch.accumulate(reward_coefficients(batch.log_ratio, batch.rewards))


def grad_forward_kl_baseline(batch: BatchStats, base_log_ratio):
    if batch.rewards is None:
        raise ValueError("forward-KL baseline needs per-sample rewards")
    return batch.accumulate(forward_kl_coefficients(batch.rewards, base_log_ratio))
