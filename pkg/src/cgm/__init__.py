"""Calibrating generative models to expectation constraints.

Fine-tunes a diffusion model so that ``E[h(x)]`` hits a target while staying
close in KL to the base model, on a testbed where the base model's marginals
are Gaussian mixtures known in closed form.
"""
from .constraints import ConstraintSpec, coordinate_indicator, evaluate_batch
from .diffusion import (DiffusionModel, GmmSpec, PathBatch, SdeSchedule, StepActivations,
                        euler_maruyama, forward_marginal_logpdf, forward_marginal_score,
                        rare_preset, symmetric_preset)
from .estimators import (BatchStats, LossReport, grad_forward_kl_baseline, grad_relax,
                         grad_reward, kl_loss, loo_center, reward_loss, viol_loss)
from .evaluation import RunMetrics, estimate_expectation, evaluate, excess_kl
from .maxent import (DualProblem, DualSolution, InfeasibleDualError, closed_form_alpha_1d,
                     dual_gradient, dual_objective, reference_kl, solve_dual,
                     solve_relax_fixed_point)
from .mlp import MlpSpec, ParamVector, init_params, mlp_forward, mlp_grad_params, sinusoidal_embed
from .optim import AdamState, adam_step, cosine_lr
from .trainer import (DualInfeasibleError, NumericAbort, RunResult, TrainConfig,
                      lambda_grid_search, run_cgm_relax, run_cgm_reward,
                      run_forward_kl_baseline, run_multi_condition)
