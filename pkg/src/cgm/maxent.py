"""Maximum-entropy tilts: the empirical dual, its solver, and analytic oracles.

The empirical dual is

    f(alpha) = alpha . h_star - log( mean_n exp(alpha . h_n) )

which is concave in ``alpha``. Its maximizer defines the tilt
``p_alpha(x) ∝ p_base(x) exp(alpha . h(x))`` whose tilted sample mean hits
``h_star`` exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize, sparse
from scipy.special import logsumexp, softmax

log = logging.getLogger(__name__)


class InfeasibleDualError(RuntimeError):
    """Raised when the empirical dual has no (unique) finite maximizer."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class DualProblem:
    sample_stats: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        stats = np.asarray(self.sample_stats, dtype=np.float64)
        if stats.ndim == 1:
            stats = stats[:, None]
        target = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        if stats.ndim != 2 or stats.shape[0] < 2:
            raise ValueError("need an (N, k) statistic table with N >= 2")
        if target.shape != (stats.shape[1],):
            raise ValueError(f"target has shape {target.shape}, expected ({stats.shape[1]},)")
        if not (np.all(np.isfinite(stats)) and np.all(np.isfinite(target))):
            raise ValueError("statistics and target must be finite")
        self.sample_stats = stats
        self.target = target

    @property
    def n(self) -> int:
        return self.sample_stats.shape[0]

    @property
    def k(self) -> int:
        return self.sample_stats.shape[1]


@dataclass
class DualSolution:
    alpha: np.ndarray
    objective: float
    grad_norm: float
    status: str
    iterations: int
    asymptotic_cov: Optional[np.ndarray] = None
    last_iterate: Optional[np.ndarray] = None
    message: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "alpha": arr(self.alpha),
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "status": self.status,
            "iterations": self.iterations,
            "asymptotic_cov": arr(self.asymptotic_cov),
            "message": self.message,
            "diagnostics": self.diagnostics,
        }


@dataclass
class AnalyticTilt:
    """``p_alpha ∝ p_base exp(alpha . h)``, known only through its log-weights."""

    base: object
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))


def tilt_log_weight(tilt: AnalyticTilt, stat) -> np.ndarray:
    """Unnormalized log-tilt ``alpha . h``; ``stat`` may be ``(k,)`` or ``(M, k)``."""
    return np.asarray(stat, dtype=np.float64) @ tilt.alpha


def _log_terms(alpha, problem: DualProblem):
    return problem.sample_stats @ alpha


def dual_objective(alpha, problem: DualProblem) -> float:
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    r = _log_terms(alpha, problem)
    return float(alpha @ problem.target - logsumexp(r) + np.log(problem.n))


def dual_gradient(alpha, problem: DualProblem) -> np.ndarray:
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    w = softmax(_log_terms(alpha, problem))
    return problem.target - w @ problem.sample_stats


def tilted_moments(alpha, problem: DualProblem):
    """Self-normalized tilted mean and covariance of the sample statistics."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    w = softmax(_log_terms(alpha, problem))
    mean = w @ problem.sample_stats
    centered = problem.sample_stats - mean
    cov = (centered * w[:, None]).T @ centered
    return w, mean, cov


def binary_hull_check(problem: DualProblem) -> Optional[str]:
    """Per-coordinate hull test for 0/1 statistics.

    Returns a description of the first failing coordinate, or ``None`` if every
    coordinate sees both values and its target lies strictly inside (0, 1).
    Non-binary tables are not checked.
    """
    s = problem.sample_stats
    if not np.all((s == 0) | (s == 1)):
        return None
    lo, hi = s.min(axis=0), s.max(axis=0)
    for i in range(problem.k):
        t = problem.target[i]
        if not (lo[i] < t < hi[i]):
            return (f"coordinate {i}: target {t:g} not strictly inside observed range "
                    f"[{lo[i]:g}, {hi[i]:g}]")
    return None


def hull_interior_margin(problem: DualProblem) -> float:
    """Largest ``t`` such that the target is a convex combination of the samples
    with every weight at least ``t / N``.

    Positive values mean the target lies in the relative interior of the convex
    hull of the sample statistics; values ``<= 0`` (or ``-inf`` when the LP is
    infeasible) mean the empirical dual has no finite maximizer.
    """
    n, k = problem.n, problem.k
    # variables: w_1..w_n, t ; minimize -t
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_eq = sparse.vstack([
        sparse.hstack([sparse.csr_matrix(problem.sample_stats.T), sparse.csr_matrix((k, 1))]),
        sparse.hstack([sparse.csr_matrix(np.ones((1, n))), sparse.csr_matrix((1, 1))]),
    ]).tocsr()
    b_eq = np.concatenate([problem.target, [1.0]])
    a_ub = sparse.hstack([-sparse.identity(n), sparse.csr_matrix(np.full((n, 1), 1.0 / n))]).tocsr()
    b_ub = np.zeros(n)
    bounds = [(0, None)] * n + [(None, 1.0)]
    # HiGHS simplex occasionally stops with an unknown status on near-degenerate
    # tables; the interior-point method usually settles them
    messages = []
    for method in ("highs", "highs-ipm"):
        res = optimize.linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                               bounds=bounds, method=method)
        if res.status == 2:
            return -np.inf
        if res.success:
            return float(res.x[-1])
        messages.append(res.message)
    # plain membership test: outside the hull means no margin at all
    member = optimize.linprog(np.zeros(n), A_eq=a_eq[:, :n], b_eq=b_eq, bounds=[(0, None)] * n,
                              method="highs")
    if member.status == 2:
        return -np.inf
    raise RuntimeError(f"hull LP failed: {messages[-1]}")


def _newton_direction(g, cov):
    k = g.size
    scale = max(np.trace(cov) / k, 1e-300)
    try:
        return np.linalg.solve(cov + 1e-12 * scale * np.eye(k), g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(cov, g, rcond=None)[0]


def solve_dual(problem: DualProblem, tol: float = 1e-8, max_iters: int = 500,
               divergence_bound: float = 100.0, newton_max_dim: int = 64,
               alpha0=None) -> DualSolution:
    """Maximize the empirical dual.

    Newton's method with Armijo backtracking for ``k <= newton_max_dim``,
    gradient ascent with the same line search otherwise. The iterate is
    declared divergent (status ``"infeasible"``) once ``max|alpha|`` exceeds
    ``divergence_bound``; for 0/1 statistics a per-coordinate hull test runs
    first.
    """
    reason = binary_hull_check(problem)
    if reason is not None:
        nan = np.full(problem.k, np.nan)
        return DualSolution(nan, np.nan, np.nan, "infeasible", 0,
                            message=f"target outside sample hull ({reason})",
                            diagnostics={"check": "binary-hull"})

    alpha = np.zeros(problem.k) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    f = dual_objective(alpha, problem)
    use_newton = problem.k <= newton_max_dim
    status, message = "max-iters", "iteration limit reached"
    it = 0
    for it in range(1, max_iters + 1):
        _, mean, cov = tilted_moments(alpha, problem)
        g = problem.target - mean
        gnorm = np.max(np.abs(g))
        if gnorm <= tol:
            status, message = "converged", ""
            it -= 1
            break
        d = _newton_direction(g, cov) if use_newton else g
        slope = g @ d
        if not np.isfinite(slope) or slope <= 0:
            d, slope = g, g @ g
        step = 1.0
        # near the optimum the predicted ascent drops below the rounding of f,
        # and the gradient norm is the only reliable progress measure
        flat = slope <= 1e-12 * max(1.0, abs(f))
        while True:
            cand = alpha + step * d
            fc = dual_objective(cand, problem)
            if fc >= f + 1e-4 * step * slope:
                break
            if flat and np.max(np.abs(dual_gradient(cand, problem))) < gnorm:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            status, message = "max-iters", "line search failed to make progress"
            break
        alpha, f = cand, fc
        if np.max(np.abs(alpha)) > divergence_bound:
            status = "infeasible"
            message = (f"|alpha| exceeded {divergence_bound:g} after {it} iterations; "
                       "target is not in the interior of the sample hull")
            break
    g = dual_gradient(alpha, problem)
    gnorm = float(np.max(np.abs(g)))
    if status == "max-iters" and gnorm <= tol:
        status, message = "converged", ""
    if status == "infeasible":
        return DualSolution(np.full(problem.k, np.nan), float(f), gnorm, status, it,
                            last_iterate=alpha, message=message,
                            diagnostics={"check": "divergence"})
    cov = None
    if status == "converged":
        try:
            cov = asymptotic_covariance(problem, alpha)
        except InfeasibleDualError:
            cov = None
    return DualSolution(alpha, float(f), gnorm, status, it, asymptotic_cov=cov,
                        last_iterate=alpha, message=message)


def closed_form_alpha_1d(h_b, target):
    """Exact tilt for a single 0/1 statistic with base mean ``h_b``."""
    h_b = np.asarray(h_b, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any((h_b <= 0) | (h_b >= 1) | (target <= 0) | (target >= 1)):
        raise ValueError("h_b and target must lie strictly inside (0, 1)")
    out = np.log(target * (1 - h_b) / ((1 - target) * h_b))
    return float(out) if out.ndim == 0 else out


def bernoulli_log_normalizer(h_b):
    """Log-normalizer ``A(alpha) = sum_i log(h_b e^alpha_i + 1 - h_b)`` of a
    product of independent 0/1 statistics, and its gradient."""
    h_b = np.atleast_1d(np.asarray(h_b, dtype=np.float64))

    def value(alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), h_b.shape)
        return float(np.sum(np.logaddexp(np.log(h_b) + alpha, np.log1p(-h_b))))

    def grad(alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), h_b.shape)
        return 1.0 / (1.0 + (1 - h_b) / h_b * np.exp(-alpha))

    return value, grad


def reference_kl(h_b, target) -> float:
    """KL of the max-entropy tilt from the base for independent 0/1 statistics.

    Scalars give the one-dimensional value; arrays give the sum over
    coordinates.
    """
    h_b = np.atleast_1d(np.asarray(h_b, dtype=np.float64))
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), h_b.shape)
    alpha = np.atleast_1d(closed_form_alpha_1d(h_b, target))
    a_val, _ = bernoulli_log_normalizer(h_b)
    return float(alpha @ target - a_val(alpha))


def solve_relax_fixed_point(lam: float, grad_A: Callable[[np.ndarray], np.ndarray], target,
                            tol: float = 1e-9, max_iters: int = 500) -> DualSolution:
    """Solve ``alpha = -(2/lam) (grad_A(alpha) - target)``.

    The root is the unique maximizer of the strongly concave
    ``-lam/4 |alpha|^2 - A(alpha) + alpha . target``. One dimension uses
    bracketing bisection; higher dimensions use MINPACK's hybrid root finder.
    ``grad_norm`` of the result holds the fixed-point residual.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))

    def ascent_dir(a):
        return target - np.atleast_1d(grad_A(a)) - 0.5 * lam * a

    def residual(a):
        return float(np.max(np.abs(a + (2.0 / lam) * (np.atleast_1d(grad_A(a)) - target))))

    if target.size == 1:
        def g(a):
            return float(ascent_dir(np.array([a]))[0])
        lo, hi = -1.0, 1.0
        n_expand = 0
        while g(lo) < 0 and n_expand < 200:
            lo *= 2
            n_expand += 1
        while g(hi) > 0 and n_expand < 200:
            hi *= 2
            n_expand += 1
        it = 0
        for it in range(1, max_iters + 1):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            if g(mid) > 0:
                lo = mid
            else:
                hi = mid
        alpha = np.array([lo if abs(g(lo)) <= abs(g(hi)) else hi])
    else:
        res = optimize.root(ascent_dir, np.zeros_like(target), method="hybr",
                            options={"maxfev": max_iters * (target.size + 1), "xtol": 1e-14})
        alpha, it = np.asarray(res.x), int(res.nfev)
    r = residual(alpha)
    status = "converged" if r <= tol else "max-iters"
    return DualSolution(alpha, np.nan, r, status, it, last_iterate=alpha)


def asymptotic_covariance(problem: DualProblem, alpha) -> np.ndarray:
    """Per-sample sandwich covariance ``V^-1 S V^-1`` of the dual estimator.

    ``V`` is the tilted covariance of ``h`` and
    ``S = N sum_n w_n^2 (h_n - h_star)(h_n - h_star)^T`` with self-normalized
    tilt weights ``w``. Divide by ``N`` for the estimator's covariance.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha must be finite")
    w, _, v = tilted_moments(alpha, problem)
    dev = problem.sample_stats - problem.target
    s = problem.n * (dev * (w ** 2)[:, None]).T @ dev
    if np.linalg.matrix_rank(v) < problem.k or np.linalg.cond(v) > 1e12:
        raise InfeasibleDualError("tilted covariance of the statistics is singular")
    v_inv = np.linalg.inv(v)
    out = v_inv @ s @ v_inv
    return 0.5 * (out + out.T)
