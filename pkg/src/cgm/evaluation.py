"""Constraint-violation and KL metrics, and the analytic max-entropy reference."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .constraints import ConstraintSpec, evaluate_batch
from .diffusion import DiffusionModel
from .estimators import LossReport
from .maxent import reference_kl
from .mlp import ParamVector


@dataclass
class RunMetrics:
    iteration: int
    violation_norm: float
    kl_to_base: float
    reference_kl: float
    loss: LossReport = field(default_factory=lambda: LossReport(kl=math.nan))
    wall_time: float = 0.0
    kl_se: float = math.nan
    mean_abs_violation: float = math.nan
    expectation: np.ndarray = None
    expectation_se: np.ndarray = None
    eval_batch: int = 0

    @property
    def excess_kl(self) -> float:
        return excess_kl(self)

    def row(self) -> dict:
        """Flat scalar fields in CSV column order (wall time excluded so that
        reruns produce identical tables)."""
        return {
            "iteration": self.iteration,
            "violation_norm": self.violation_norm,
            "mean_abs_violation": self.mean_abs_violation,
            "kl_to_base": self.kl_to_base,
            "kl_se": self.kl_se,
            "reference_kl": self.reference_kl,
            "excess_kl": self.excess_kl,
            "loss_kl": self.loss.kl,
            "loss_viol": self.loss.viol,
            "loss_reward": self.loss.reward_term,
            "loss_total": self.loss.total,
            "eval_batch": self.eval_batch,
        }

    def to_dict(self) -> dict:
        out = self.row()
        out["wall_time"] = self.wall_time
        out["loss"] = asdict(self.loss)
        out["expectation"] = None if self.expectation is None else self.expectation.tolist()
        out["expectation_se"] = (None if self.expectation_se is None
                                 else self.expectation_se.tolist())
        return out


def excess_kl(run: RunMetrics) -> float:
    """KL beyond the max-entropy optimum; can dip below 0 from Monte-Carlo noise."""
    return run.kl_to_base - run.reference_kl


METRIC_COLUMNS = tuple(RunMetrics(0, 0.0, 0.0, 0.0).row())


def estimate_expectation(params: ParamVector, model: DiffusionModel, spec: ConstraintSpec,
                         m_eval: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean of ``h`` under ``p_theta`` and its standard error."""
    if m_eval < 1:
        raise ValueError("m_eval must be at least 1")
    batch = model.sample_terminal(params, m_eval, seed)
    return _mean_and_se(evaluate_batch(spec, batch.terminal))


def _mean_and_se(stats):
    n = stats.shape[0]
    mean = stats.mean(axis=0)
    se = stats.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(mean.shape, np.nan)
    return mean, se


def model_reference_kl(model: DiffusionModel, spec: ConstraintSpec) -> float:
    """Max-entropy KL for threshold constraints on the mixture; NaN otherwise."""
    if not spec.is_binary:
        return math.nan
    h_b = model.gmm.prob_above(spec.thresholds)
    return float(reference_kl(h_b, spec.target))


def evaluate(params: ParamVector, model: DiffusionModel, spec: ConstraintSpec, m_eval: int,
             seed, iteration: int = 0, loss: LossReport | None = None,
             wall_time: float = 0.0, reference: float | None = None) -> RunMetrics:
    """Expectation, violation and KL-to-base on one fresh evaluation batch."""
    batch = model.sample_terminal(params, m_eval, seed)
    mean, se = _mean_and_se(evaluate_batch(spec, batch.terminal))
    gap = mean - spec.target
    kl = batch.kl_terms
    return RunMetrics(
        iteration=iteration,
        violation_norm=float(np.linalg.norm(gap)),
        kl_to_base=float(kl.mean()),
        reference_kl=model_reference_kl(model, spec) if reference is None else reference,
        loss=loss if loss is not None else LossReport(kl=math.nan, viol=math.nan,
                                                      reward_term=math.nan, total=math.nan),
        wall_time=wall_time,
        kl_se=float(kl.std(ddof=1) / np.sqrt(m_eval)) if m_eval > 1 else math.nan,
        mean_abs_violation=float(np.mean(np.abs(gap))),
        expectation=mean,
        expectation_se=se,
        eval_batch=m_eval,
    )
