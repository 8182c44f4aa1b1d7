"""Fine-tuning loops: relax, reward, the forward-KL baseline, and the lambda sweep.

All randomness comes from ``SeedSequence([seed, purpose, ...])`` so training,
dual estimation, evaluation and initialisation never share draws, and a run is
reproducible from its config alone.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .constraints import ConstraintSpec, evaluate_batch
from .diffusion import DiffusionModel, StepActivations
from .estimators import (LossReport, forward_kl_coefficients, kl_loss, relax_coefficients,
                         reward_coefficients, viol_loss)
from .evaluation import RunMetrics, evaluate, model_reference_kl
from .maxent import DualProblem, DualSolution, solve_dual
from .mlp import ParamVector, init_params
from .optim import AdamState, adam_step, cosine_lr

ALGORITHMS = ("relax", "reward", "forward-kl-baseline")

# seed-stream purposes
SEED_INIT, SEED_TRAIN, SEED_EVAL, SEED_DUAL, SEED_GRID = 1, 2, 3, 4, 5


def derive_seed(seed: int, purpose: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), purpose, *(int(k) for k in keys)])


def derive_int_seed(seed: int, purpose: int, *keys: int) -> int:
    return int(derive_seed(seed, purpose, *keys).generate_state(1, np.uint64)[0])


def lambda_grid(n: int = 10, hi: float = 1.0, lo: float = 1e-3) -> np.ndarray:
    return np.logspace(np.log10(hi), np.log10(lo), n)


@dataclass
class TrainConfig:
    algorithm: str = "relax"
    lam: Optional[float] = None
    batch_size: int = 512
    dual_samples: int = 100_000
    iterations: int = 2000
    lr0: float = 1e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    eval_every: int = 50
    eval_batch: int = 4096
    final_eval_batch: int = 100_000
    sub_batch: int = 128
    chunk_size: int = 8
    activation_cache_mb: float = 512.0
    conditions: list = field(default_factory=list)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be positive")
        for name in ("batch_size", "dual_samples", "iterations", "eval_every", "eval_batch",
                     "final_eval_batch", "sub_batch", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class NumericAbort(RuntimeError):
    def __init__(self, iteration: int, term: str, diagnostics: dict | None = None):
        super().__init__(f"non-finite {term} at iteration {iteration}")
        self.iteration = iteration
        self.term = term
        self.diagnostics = diagnostics or {}


class DualInfeasibleError(RuntimeError):
    def __init__(self, report: DualSolution, condition: int = 0):
        super().__init__(f"empirical dual infeasible for condition {condition}: {report.message}")
        self.report = report
        self.condition = condition


@dataclass
class RunResult:
    params: ParamVector
    history: list
    alphas: list = field(default_factory=list)
    dual_reports: list = field(default_factory=list)


@dataclass
class _Condition:
    model: DiffusionModel
    spec: ConstraintSpec
    reference: float
    alpha: Optional[np.ndarray] = None
    store: Optional[StepActivations] = None


def _activation_bytes(model: DiffusionModel, m: int) -> int:
    widths = model.mlp.state_dim * 2 + 2 * sum(model.mlp.hidden_dims)
    return model.schedule.steps * m * widths * 8


def _fit_dual(cond: _Condition, params: ParamVector, config: TrainConfig, index: int):
    base = cond.model.sample_terminal(params, config.dual_samples,
                                      derive_seed(config.seed, SEED_DUAL, index))
    stats = evaluate_batch(cond.spec, base.terminal)
    sol = solve_dual(DualProblem(stats, cond.spec.target))
    if sol.status == "infeasible":
        raise DualInfeasibleError(sol, index)
    if not sol.converged:
        raise NumericAbort(0, "dual solve", {"status": sol.status, "message": sol.message})
    return sol


def _batch_terms(config: TrainConfig, cond: _Condition, batch, lam):
    """Loss report and score coefficients of one sampled batch."""
    stats = evaluate_batch(cond.spec, batch.terminal)
    log_ratio = batch.log_ratio
    if config.algorithm == "relax":
        kl = kl_loss(log_ratio)
        viol = viol_loss(stats, cond.spec.target)
        return LossReport.relax(kl, viol, lam), relax_coefficients(
            log_ratio, stats, cond.spec.target, lam)
    rewards = stats @ cond.alpha
    report = LossReport.reward(kl_loss(log_ratio), -np.mean(rewards))
    if config.algorithm == "reward":
        return report, reward_coefficients(log_ratio, rewards)
    return report, forward_kl_coefficients(rewards, -log_ratio)


def _train(config: TrainConfig, conditions: list[_Condition], params: ParamVector,
           progress: Optional[Callable] = None) -> RunResult:
    lam = config.lam
    if config.algorithm == "relax" and lam is None:
        raise ValueError("relax training needs a lambda (or use lambda_grid_search)")
    dual_reports = []
    if config.algorithm != "relax":
        for i, cond in enumerate(conditions):
            sol = _fit_dual(cond, params, config, i)
            cond.alpha = sol.alpha
            dual_reports.append(sol)
    for cond in conditions:
        if _activation_bytes(cond.model, config.batch_size) <= config.activation_cache_mb * 2**20:
            cond.store = StepActivations()

    total = config.iterations
    history = [[] for _ in conditions]
    state = AdamState.zeros(params)
    start = time.perf_counter()
    eval_points = set(range(0, total + 1, config.eval_every)) | {total}

    for it in range(total + 1):
        # the snapshot: everything in this iteration is computed at `params`
        grad = params.zeros_like() if it < total else None
        reports = []
        for c, cond in enumerate(conditions):
            batch = cond.model.sample(params, config.batch_size,
                                      derive_seed(config.seed, SEED_TRAIN, it, c),
                                      keep_activations=cond.store or False)
            report, coeffs = _batch_terms(config, cond, batch, lam)
            reports.append(report)
            if not (math.isfinite(report.total) and np.all(np.isfinite(coeffs))):
                raise NumericAbort(it, "loss", {"condition": c, "loss": dataclasses.asdict(report)})
            if grad is not None:
                g = cond.model.accumulate_scores(params, batch, coeffs, config.chunk_size,
                                                 config.sub_batch)
                grad.values += g.values
        if it in eval_points:
            m_eval = config.final_eval_batch if it == total else config.eval_batch
            for c, cond in enumerate(conditions):
                row = evaluate(params, cond.model, cond.spec, m_eval,
                               derive_seed(config.seed, SEED_EVAL, it, c), iteration=it,
                               loss=reports[c], wall_time=time.perf_counter() - start,
                               reference=cond.reference)
                history[c].append(row)
            if progress is not None:
                progress(it, [h[-1] for h in history])
        if grad is None:
            break
        if not np.all(np.isfinite(grad.values)):
            raise NumericAbort(it, "gradient", {"max_abs": float(np.nanmax(np.abs(grad.values)))})
        state, params = adam_step(state, params, grad, cosine_lr(it, total, config.lr0),
                                  betas=config.betas)

    alphas = [cond.alpha for cond in conditions]
    return RunResult(params, history, alphas, dual_reports)


def initial_params(model: DiffusionModel, seed: int) -> ParamVector:
    return init_params(model.mlp, np.random.default_rng(derive_seed(seed, SEED_INIT)))


def _single(config: TrainConfig, model, constraint, algorithm, params0, progress):
    if config.algorithm != algorithm:
        raise ValueError(f"config.algorithm is {config.algorithm!r}, expected {algorithm!r}")
    params = initial_params(model, config.seed) if params0 is None else params0
    cond = _Condition(model, constraint, model_reference_kl(model, constraint))
    result = _train(config, [cond], params, progress)
    result.history = result.history[0]
    return result


def run_cgm_relax(config: TrainConfig, model: DiffusionModel, constraint: ConstraintSpec,
                  params0: Optional[ParamVector] = None, progress=None) -> RunResult:
    return _single(config, model, constraint, "relax", params0, progress)


def run_cgm_reward(config: TrainConfig, model: DiffusionModel, constraint: ConstraintSpec,
                   params0: Optional[ParamVector] = None, progress=None) -> RunResult:
    return _single(config, model, constraint, "reward", params0, progress)


def run_forward_kl_baseline(config: TrainConfig, model: DiffusionModel,
                            constraint: ConstraintSpec, params0: Optional[ParamVector] = None,
                            progress=None) -> RunResult:
    return _single(config, model, constraint, "forward-kl-baseline", params0, progress)


def condition_inputs(n: int) -> list:
    """Network condition vectors: one-hot for several conditions, none for one."""
    if n < 1:
        raise ValueError("need at least one condition")
    return [None] if n == 1 else list(np.eye(n))


def run_multi_condition(config: TrainConfig, model: DiffusionModel,
                        constraints: Sequence[ConstraintSpec],
                        params0: Optional[ParamVector] = None, progress=None) -> RunResult:
    """One shared network trained on the sum of per-condition losses.

    ``model.mlp.cond_dim`` must equal ``len(constraints)`` (or 0 for a single
    condition); condition ``c`` sees the ``c``-th one-hot vector.
    """
    n = len(constraints)
    expected = 0 if n == 1 else n
    if model.mlp.cond_dim != expected:
        raise ValueError(f"network takes a {model.mlp.cond_dim}-dim condition but "
                         f"{n} conditions need {expected}")
    conds = []
    for vec, spec in zip(condition_inputs(n), constraints):
        m = model if vec is None else model.with_condition(vec)
        conds.append(_Condition(m, spec, model_reference_kl(m, spec)))
    params = initial_params(model, config.seed) if params0 is None else params0
    return _train(config, conds, params, progress)


@dataclass
class GridPoint:
    lam: float
    result: RunResult

    @property
    def initial(self) -> RunMetrics:
        return self.result.history[0]

    @property
    def final(self) -> RunMetrics:
        return self.result.history[-1]

    @property
    def qualifies(self) -> bool:
        return self.final.violation_norm <= self.initial.violation_norm / 10.0


def select_lambda(points: Sequence[GridPoint]) -> GridPoint:
    """Smallest final KL among runs that cut the violation tenfold, else overall."""
    if not points:
        raise ValueError("empty grid")
    pool = [p for p in points if p.qualifies] or list(points)
    return min(pool, key=lambda p: p.final.kl_to_base)


def lambda_grid_search(config: TrainConfig, model: DiffusionModel, constraint: ConstraintSpec,
                       grid=None, progress=None) -> tuple[float, list[GridPoint]]:
    """Full-length relax runs over a log grid of lambdas; returns the pick and all runs.

    Grid point ``i`` trains with its own derived seed. Every point shares the
    initial parameters drawn from ``config.seed``.
    """
    if config.algorithm != "relax":
        raise ValueError("the lambda sweep applies to relax training")
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    params0 = initial_params(model, config.seed)
    points = []
    for i, lam in enumerate(grid):
        cfg = config.replace(lam=float(lam), seed=derive_int_seed(config.seed, SEED_GRID, i))
        result = run_cgm_relax(cfg, model, constraint, params0=params0)
        points.append(GridPoint(float(lam), result))
        if progress is not None:
            progress(i, points[-1])
    return select_lambda(points).lam, points
