"""How many samples does the empirical dual need?

For k independent fair coordinates with target 0.8 each, the sample-based
dual has a solution only if the target lies inside the convex hull of the
sampled indicator vectors. With few samples in many dimensions it rarely does.

    python demos/dual_feasibility.py    (about two minutes)
"""
import numpy as np

from cgm.maxent import DualProblem, hull_interior_margin, solve_dual

rng = np.random.default_rng(0)
print(" k      N   feasible/10   mean |alpha - ln4|")
for k in (1, 8, 32):
    for n in (100, 1000, 10_000):
        feasible, errors = 0, []
        for _ in range(10):
            stats = (rng.random((n, k)) < 0.5).astype(float)
            problem = DualProblem(stats, np.full(k, 0.8))
            if hull_interior_margin(problem) <= 0:
                continue
            sol = solve_dual(problem)
            if sol.converged:
                feasible += 1
                errors.append(np.mean(np.abs(sol.alpha - np.log(4))))
        err = f"{np.mean(errors):.4f}" if errors else "-"
        print(f"{k:2d} {n:6d}   {feasible:11d}   {err}")
