"""Command-line entry point: ``python -m cgm {run,sweep-lambda,maxent,figures}``.

Exit codes: 0 success, 2 configuration error, 3 dual infeasible, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .diffusion import DiffusionModel, SdeSchedule, symmetric_preset
from .mlp import MlpSpec
from .config import ConfigError, ExperimentConfig, parse_config
from .evaluation import METRIC_COLUMNS, RunMetrics, evaluate
from .maxent import DualProblem, solve_dual
from .trainer import (SEED_EVAL, SEED_GRID, DualInfeasibleError, GridPoint, NumericAbort,
                      derive_int_seed, derive_seed, initial_params, run_cgm_relax,
                      run_cgm_reward, run_forward_kl_baseline, run_multi_condition,
                      select_lambda)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_ABORT = 0, 2, 3, 4


def fmt(value) -> str:
    """Full-precision decimal rendering (17 significant digits) for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, rows: list[dict], columns=None):
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c, "")) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metrics_rows(histories: list[list[RunMetrics]]) -> list[dict]:
    rows = []
    for c, history in enumerate(histories):
        for m in history:
            rows.append({"condition": c, **m.row()})
    return rows


METRICS_HEADER = ("condition",) + METRIC_COLUMNS


def _sweep(config: ExperimentConfig, out: Path, log) -> tuple[GridPoint, list[GridPoint]]:
    """Run the lambda grid; each point evaluates its final state on the small batch,
    and only the selected run is re-evaluated on the full final batch."""
    model = config.model()
    (spec,) = config.constraints()
    cfg = config.train_config().replace(algorithm="relax")
    points = []
    params0 = initial_params(model, cfg.seed)
    for i, lam in enumerate(config.grid()):
        point_cfg = cfg.replace(lam=float(lam), final_eval_batch=cfg.eval_batch,
                                seed=derive_int_seed(cfg.seed, SEED_GRID, i))
        t0 = time.perf_counter()
        result = run_cgm_relax(point_cfg, model, spec, params0=params0)
        point = GridPoint(float(lam), result)
        points.append(point)
        log(f"lambda={lam:.4g}: violation {point.initial.violation_norm:.4f} -> "
            f"{point.final.violation_norm:.4f}, kl {point.final.kl_to_base:.4f} "
            f"({time.perf_counter() - t0:.1f}s)")
    chosen = select_lambda(points)
    idx = points.index(chosen)
    last = chosen.final
    point_seed = derive_int_seed(cfg.seed, SEED_GRID, idx)
    refreshed = evaluate(chosen.result.params, model, spec, cfg.final_eval_batch,
                         derive_seed(point_seed, SEED_EVAL, cfg.iterations, 0),
                         iteration=last.iteration, loss=last.loss, wall_time=last.wall_time,
                         reference=last.reference_kl)
    chosen.result.history[-1] = refreshed
    sweep_rows = [{"lambda": p.lam, "initial_violation": p.initial.violation_norm,
                   "final_violation": p.final.violation_norm,
                   "final_kl_to_base": p.final.kl_to_base, "reference_kl": p.final.reference_kl,
                   "qualifies": p.qualifies, "selected": p is chosen} for p in points]
    write_csv(out / "sweep.csv", sweep_rows)
    return chosen, points


def run_experiment(config: ExperimentConfig, force_sweep: bool = False, log=None) -> int:
    log = log or (lambda msg: print(msg, file=sys.stderr))
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config-resolved.json").write_text(config.to_json(), encoding="utf-8")
    summary = {"profile": config["profile"], "preset": config["preset"],
               "algorithm": config["algorithm"], "seed": config["seed"],
               "selected_lambda": None, "alpha_hat": None}
    start = time.perf_counter()
    constraints = config.constraints()
    try:
        sweep = force_sweep or (config["algorithm"] == "relax" and config["lambda"] is None)
        if sweep:
            if len(constraints) != 1:
                raise ConfigError("lambda", "required when several conditions are given")
            summary["algorithm"] = "relax"
            chosen, _ = _sweep(config, out, log)
            summary["selected_lambda"] = chosen.lam
            histories = [chosen.result.history]
        else:
            model = config.model()
            cfg = config.train_config()
            if len(constraints) > 1:
                result = run_multi_condition(cfg, model, constraints)
                histories = result.history
            else:
                runner = {"relax": run_cgm_relax, "reward": run_cgm_reward,
                          "forward-kl-baseline": run_forward_kl_baseline}[cfg.algorithm]
                result = runner(cfg, model, constraints[0])
                histories = [result.history]
            if cfg.algorithm != "relax":
                summary["alpha_hat"] = result.alphas
                summary["dual"] = [r.to_dict() for r in result.dual_reports]
            summary["selected_lambda"] = cfg.lam
    except DualInfeasibleError as exc:
        summary.update(status="dual-infeasible", reason=str(exc), dual=exc.report.to_dict())
        write_json(out / "summary.json", summary)
        log(str(exc))
        return EXIT_INFEASIBLE
    except NumericAbort as exc:
        summary.update(status="numeric-abort", reason=str(exc), iteration=exc.iteration,
                       term=exc.term, diagnostics=exc.diagnostics)
        write_json(out / "summary.json", summary)
        log(str(exc))
        return EXIT_ABORT
    except ConfigError as exc:
        summary.update(status="config-error", reason=str(exc), field=exc.field)
        write_json(out / "summary.json", summary)
        log(f"configuration error: {exc}")
        return EXIT_CONFIG

    write_csv(out / "metrics.csv", metrics_rows(histories), METRICS_HEADER)
    summary.update(status="ok", final=[h[-1].to_dict() for h in histories],
                   wall_time=time.perf_counter() - start)
    write_json(out / "summary.json", summary)
    return EXIT_OK


def _load_config(args) -> ExperimentConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else "{}"
    return parse_config(text, {"seed": args.seed, "profile": args.profile, "out": args.out})


def _cmd_run(args, force_sweep=False) -> int:
    try:
        config = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(config, force_sweep=force_sweep)


def _cmd_maxent(args) -> int:
    try:
        stats = np.loadtxt(args.stats, delimiter=",", ndmin=2, dtype=np.float64)
        target = [float(v) for v in args.target.split(",")]
        problem = DualProblem(stats, target)
    except (OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sol = solve_dual(problem)
    report = sol.to_dict()
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "summary.json", report)
    if sol.status == "infeasible":
        return EXIT_INFEASIBLE
    return EXIT_OK if sol.converged else EXIT_ABORT


def _cmd_figures(args) -> int:
    try:
        config = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    which = set(args.which.split(",")) if args.which != "all" else {"1a", "1b", "2a", "2b"}
    train_cfg = model = None
    if args.with_training:
        train_cfg = config.train_config().replace(lam=config["lambda"] or 0.01,
                                                  dual_samples=100_000)
        model = DiffusionModel(symmetric_preset(1), SdeSchedule(config["steps"]),
                               MlpSpec(1, tuple(config["hidden_dims"]), config["embed_dim"]))
    if "1a" in which:
        write_csv(out / "fig1a_densities.csv", figures.mode_reweighting(train_cfg=train_cfg,
                                                                        model=model))
    if "1b" in which:
        write_csv(out / "fig1b_lambda.csv", figures.relax_tradeoff(
            grid=config.grid(), train_cfg=train_cfg, model=model))
        write_csv(out / "fig1b_dual.csv", figures.dual_recovery(seed=config["seed"]))
    if "2a" in which:
        write_csv(out / "fig2a_rare.csv", figures.rare_events(
            train_cfg=train_cfg, mlp=model.mlp if model else None, steps=config["steps"]))
    if "2b" in which:
        write_csv(out / "fig2b_dimension.csv", figures.high_dimension(
            seed=config["seed"], train_cfg=train_cfg, hidden=config["hidden_dims"],
            steps=config["steps"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (default: all defaults)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--profile", choices=("desk", "paper"))
        return p

    common(sub.add_parser("run", help="run one experiment"))
    common(sub.add_parser("sweep-lambda", help="relax runs over the lambda grid"))
    p = sub.add_parser("maxent", help="solve the empirical dual for a statistic table")
    p.add_argument("stats", help="CSV, one row per sample, k columns, no header")
    p.add_argument("--target", required=True, help="comma-separated target values")
    p.add_argument("--out", help="directory for summary.json")
    p = common(sub.add_parser("figures", help="emit figure data series as CSV"))
    p.add_argument("--which", default="all", help="comma list of 1a,1b,2a,2b or 'all'")
    p.add_argument("--with-training", action="store_true",
                   help="add series from fine-tuned models (slow)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep-lambda":
        return _cmd_run(args, force_sweep=True)
    if args.command == "maxent":
        return _cmd_maxent(args)
    return _cmd_figures(args)


if __name__ == "__main__":
    sys.exit(main())
