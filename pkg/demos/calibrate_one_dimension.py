"""Shift the symmetric two-mode mixture so that 80% of its mass sits above zero.

Runs the relax and reward algorithms at a shortened desk scale and prints the
trajectory of the constraint violation and the KL to the base model, next to
the KL of the exact maximum-entropy solution.

    python demos/calibrate_one_dimension.py [iterations]
"""
import sys

from cgm.config import parse_config
from cgm.trainer import run_cgm_relax, run_cgm_reward

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200

for algorithm, extra in (("relax", ', "lambda": 0.01'), ("reward", "")):
    cfg = parse_config(f'{{"algorithm": "{algorithm}", "iterations": {iterations}, '
                       f'"final_eval_batch": 20000{extra}}}')
    runner = run_cgm_relax if algorithm == "relax" else run_cgm_reward
    result = runner(cfg.train_config(), cfg.model(), cfg.constraints()[0],
                    progress=lambda it, rows: print(f"  {algorithm:6s} iter {it:4d}  "
                                                    f"E[h] {rows[0].expectation[0]:.3f}  "
                                                    f"kl {rows[0].kl_to_base:.3f}"))
    final = result.history[-1]
    print(f"{algorithm}: E[h] = {final.expectation[0]:.4f} (target 0.8), "
          f"kl {final.kl_to_base:.4f}, exact max-entropy kl {final.reference_kl:.4f}")
    if algorithm == "reward":
        print(f"  fitted tilt coefficient {result.alphas[0][0]:.4f} (ln 4 = 1.3863)")
