"""Data series for the simulation figures, written as CSV tables.

Analytic and exact-sampling series are cheap and always produced. Series that
need fine-tuned models are produced only when ``train`` is set; they use a
fixed lambda rather than a sweep per point.
"""
from __future__ import annotations

import numpy as np

from .constraints import ConstraintSpec
from .diffusion import (DiffusionModel, SdeSchedule, forward_marginal_logpdf, rare_preset,
                        symmetric_preset)
from .maxent import (DualProblem, InfeasibleDualError, asymptotic_covariance,
                     bernoulli_log_normalizer, closed_form_alpha_1d, reference_kl, solve_dual,
                     solve_relax_fixed_point)
from .mlp import MlpSpec
from .trainer import TrainConfig, derive_seed, lambda_grid, run_cgm_relax, run_cgm_reward

FIGURE_SEED = 7


def mode_reweighting(target=0.8, train_cfg: TrainConfig | None = None, model=None,
                     n_grid: int = 161, lo: float = -4.0, hi: float = 4.0):
    """Terminal densities: base, max-entropy tilt, and optionally fine-tuned models."""
    gmm = symmetric_preset(1)
    x = np.linspace(lo, hi, n_grid)
    base = np.exp(forward_marginal_logpdf(gmm, x[:, None], 1.0))
    h_b = float(gmm.prob_above(0.0)[0])
    alpha = closed_form_alpha_1d(h_b, target)
    z = h_b * np.exp(alpha) + 1 - h_b
    tilt = base * np.exp(alpha * (x > 0)) / z
    cols = {"x": x, "base_density": base, "maxent_density": tilt}
    if train_cfg is not None:
        edges = np.concatenate([[x[0] - (x[1] - x[0]) / 2], (x[1:] + x[:-1]) / 2,
                                [x[-1] + (x[1] - x[0]) / 2]])
        spec = ConstraintSpec(target=[target])
        for name, runner, algo in (("relax", run_cgm_relax, "relax"),
                                   ("reward", run_cgm_reward, "reward")):
            result = runner(train_cfg.replace(algorithm=algo), model, spec)
            terminal = model.sample_terminal(result.params, train_cfg.final_eval_batch,
                                             derive_seed(train_cfg.seed, 90, len(cols))).terminal
            hist, _ = np.histogram(terminal[:, 0], bins=edges, density=True)
            cols[f"{name}_density"] = hist
    return _rows(cols)


def relax_tradeoff(target=0.8, grid=None, train_cfg: TrainConfig | None = None, model=None):
    """Violation and KL of the exact relax optimum across lambda (plus trained runs)."""
    grid = lambda_grid() if grid is None else np.asarray(grid)
    h_b = symmetric_preset(1).prob_above(0.0)
    a_val, a_grad = bernoulli_log_normalizer(h_b)
    rows = []
    spec = ConstraintSpec(target=[target])
    for lam in grid:
        sol = solve_relax_fixed_point(float(lam), a_grad, [target])
        mean = a_grad(sol.alpha)
        row = {"lambda": float(lam), "alpha": float(sol.alpha[0]),
               "exact_violation": float(abs(mean[0] - target)),
               "exact_kl": float(sol.alpha @ mean - a_val(sol.alpha)),
               "reference_kl": reference_kl(h_b, target)}
        if train_cfg is not None:
            final = run_cgm_relax(train_cfg.replace(lam=float(lam)), model, spec).history[-1]
            row["trained_violation"] = final.violation_norm
            row["trained_kl"] = final.kl_to_base
        rows.append(row)
    return rows


def dual_recovery(target=0.8, sizes=(10, 100, 1000, 10_000, 100_000), reps: int = 20,
                  seed: int = FIGURE_SEED):
    """Accuracy of the empirical dual estimate against the closed form, by sample size."""
    gmm = symmetric_preset(1)
    h_b = float(gmm.prob_above(0.0)[0])
    alpha_star = closed_form_alpha_1d(h_b, target)
    rows = []
    for n in sizes:
        for r in range(reps):
            stats = (gmm.sample(n, derive_seed(seed, 1, n, r)) > 0).astype(float)
            problem = DualProblem(stats, [target])
            sol = solve_dual(problem)
            row = {"n": n, "rep": r, "status": sol.status, "alpha_star": alpha_star,
                   "alpha_hat": float(sol.alpha[0]),
                   "abs_error": float(abs(sol.alpha[0] - alpha_star)),
                   "predicted_se": np.nan}
            if sol.converged:
                try:
                    row["predicted_se"] = float(np.sqrt(asymptotic_covariance(
                        problem, sol.alpha)[0, 0] / n))
                except InfeasibleDualError:
                    pass
            rows.append(row)
    return rows


def rare_events(target=0.8, pis=(0.8, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5),
                train_cfg: TrainConfig | None = None, mlp: MlpSpec | None = None,
                steps: int = 64):
    rows = []
    spec = ConstraintSpec(target=[target])
    for pi in pis:
        gmm = rare_preset(pi)
        h_b = gmm.prob_above(0.0)
        row = {"pi": pi, "base_mean": float(h_b[0]),
               "initial_violation": float(abs(h_b[0] - target)),
               "reference_kl": reference_kl(h_b, target) if abs(h_b[0] - target) > 0 else 0.0}
        if train_cfg is not None:
            model = DiffusionModel(gmm, SdeSchedule(steps), mlp)
            final = run_cgm_relax(train_cfg, model, spec).history[-1]
            row["trained_violation"] = final.violation_norm
            row["trained_kl"] = final.kl_to_base
        rows.append(row)
    return rows


def high_dimension(target=0.8, dims=(1, 2, 4, 8, 16, 32, 64), dual_n: int = 1000,
                   reps: int = 10, seed: int = FIGURE_SEED,
                   train_cfg: TrainConfig | None = None, hidden=(64, 64), steps: int = 64,
                   train_max_dim: int = 32):
    """Reference KL, dual feasibility at ``dual_n`` samples and trained violation vs k."""
    rows = []
    for k in dims:
        gmm = symmetric_preset(k)
        h_b = gmm.prob_above(0.0)
        feasible = 0
        for r in range(reps):
            stats = (gmm.sample(dual_n, derive_seed(seed, 2, k, r)) > 0).astype(float)
            if solve_dual(DualProblem(stats, np.full(k, target))).converged:
                feasible += 1
        row = {"k": k, "reference_kl": reference_kl(h_b, np.full(k, target)),
               "initial_mean_abs_violation": float(np.mean(np.abs(h_b - target))),
               "dual_n": dual_n, "dual_feasible_fraction": feasible / reps}
        if train_cfg is not None and k <= train_max_dim:
            model = DiffusionModel(gmm, SdeSchedule(steps), MlpSpec(k, tuple(hidden)))
            spec = ConstraintSpec(target=np.full(k, target))
            final = run_cgm_relax(train_cfg, model, spec).history[-1]
            row["trained_mean_abs_violation"] = final.mean_abs_violation
            row["trained_kl"] = final.kl_to_base
        rows.append(row)
    return rows


def _rows(cols: dict):
    n = len(next(iter(cols.values())))
    return [{k: (v[i].item() if hasattr(v[i], "item") else v[i]) for k, v in cols.items()}
            for i in range(n)]
