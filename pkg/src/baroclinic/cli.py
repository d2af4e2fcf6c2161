"""Command-line entry point: ``baroclinic <command> [flags]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, ValidationFailure
from .experiments import (
    SWEEP_COLUMNS,
    TIMESERIES_COLUMNS,
    ExperimentConfig,
    constants_table,
    read_csv_column,
    regime_checks,
    run_ensemble,
    sweep_nu,
    timeseries_rows,
    verify_balance,
    verify_linear,
    write_csv,
    write_json,
)
from .model import constants_report
from .stats import bl_distance, dirac_sample

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_VALIDATION = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--nu", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--variant", choices=("a3", "a3hat"))
    common.add_argument("--regime", choices=("scaled", "fixed"))
    common.add_argument("--linear", action="store_true", default=None, help="drop the nonlinear term B")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")

    p = argparse.ArgumentParser(prog="baroclinic", description=__doc__)
    p.add_argument("--version", action="version", version=f"baroclinic {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="one trajectory: time series, summary, checkpoint")
    sub.add_parser("sweep-nu", parents=[common], help="statistics and bound checks along the viscosity grid")
    sub.add_parser("verify-balance", parents=[common], help="stationary energy balance residual")
    sub.add_parser("verify-linear", parents=[common], help="linear run against closed-form moments")
    sub.add_parser("constants", parents=[common], help="named constants and stability thresholds")
    d = sub.add_parser("distance", parents=[common], help="bounded-Lipschitz distance between sampled functionals")
    d.add_argument("first", type=Path, help="time-series CSV")
    d.add_argument("second", type=Path, nargs="?", help="time-series CSV (omit to compare with a point mass)")
    d.add_argument("--column", default="h2", help="functional column to compare")
    d.add_argument("--dirac", type=float, default=0.0, help="location of the point mass")
    return p


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "nu", "alpha", "variant", "regime", "linear")
                 if getattr(args, k, None) is not None}
    return cfg.replace(**overrides)


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    cfg.validate()
    params = cfg.params()
    noise = cfg.noise_spectrum()
    rate = 0.0 if noise.is_zero() else constants_report(params, noise).kappa_star * cfg.nu
    res = run_ensemble(cfg, params, cfg.integrator(cfg.nu), exp_rate=rate, track_budget=False, members=1)
    write_csv(out / "timeseries.csv", timeseries_rows(res, cfg), TIMESERIES_COLUMNS)
    s = res.summaries[0]
    summary = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "steps": s.steps,
               "t_final": s.t_final, "n_samples": s.n_samples, "diverged": s.diverged,
               "blowup_time": s.blowup_time, "blowup_norm": s.blowup_norm}
    if res.accumulator.count and not res.accumulator.poisoned:
        summary["moments"] = res.accumulator.summary() if res.accumulator.count >= 2 else {}
    write_json(out / "summary.json", summary)
    if s.checkpoint is not None:
        s.checkpoint.save(out / "checkpoint.json")
    if s.diverged:
        print(f"blow-up at t={s.blowup_time:g} (|||u|||_2 = {s.blowup_norm:g})", file=sys.stderr)
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    res = sweep_nu(cfg)
    write_csv(out / "sweep.csv", res.rows, SWEEP_COLUMNS)
    checks = regime_checks(res)
    write_json(out / "sweep.json", {"config": cfg.to_dict(), "rows": res.rows, "regime_checks": checks})
    for r in res.rows:
        flags = " ".join(f"{k[5:]}={'ok' if v else 'FAIL'}" for k, v in r.items() if k.startswith("pass_"))
        state = "blow-up" if r["diverged"] else flags
        print(f"nu={r['nu']:<8g} alpha={r['alpha']:<5g} {state}")
    return EXIT_OK if res.bounds_ok else EXIT_VALIDATION


def cmd_verify_balance(cfg: ExperimentConfig, out: Path) -> int:
    plain, corrected, res = verify_balance(cfg)
    write_json(out / "balance.json", {"config_hash": cfg.config_hash(), "balance": plain.to_dict(),
                                      "balance_martingale_corrected": corrected.to_dict()})
    print(f"lhs={plain.lhs:.6g} rhs={plain.rhs:.6g} residual={plain.residual:.3g} se={plain.se:.3g}")
    return EXIT_OK if plain.passed() else EXIT_VALIDATION


def cmd_verify_linear(cfg: ExperimentConfig, out: Path) -> int:
    comps, _ = verify_linear(cfg)
    write_json(out / "linear.json", {"config_hash": cfg.config_hash(), "comparisons": [
        {"name": c.name, "empirical": c.empirical, "se": c.se, "exact": c.exact, "z": c.z, "passed": c.passed}
        for c in comps]})
    for c in comps:
        print(f"{c.name:<11} empirical={c.empirical:.6g} exact={c.exact:.6g} z={c.z:.2f} {'ok' if c.passed else 'FAIL'}")
    return EXIT_OK if all(c.passed for c in comps) else EXIT_VALIDATION


def cmd_constants(cfg: ExperimentConfig, out: Path) -> int:
    table = constants_table(cfg)
    write_json(out / "constants.json", table)
    print((out / "constants.json").read_text(), end="")
    return EXIT_OK


def cmd_distance(args: argparse.Namespace) -> int:
    a = read_csv_column(args.first, args.column)
    b = read_csv_column(args.second, args.column) if args.second else dirac_sample(args.dirac).values
    print(repr(bl_distance(a, b)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "distance":
            return cmd_distance(args)
        cfg = load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        handler = {
            "simulate": cmd_simulate,
            "sweep-nu": cmd_sweep,
            "verify-balance": cmd_verify_balance,
            "verify-linear": cmd_verify_linear,
            "constants": cmd_constants,
        }[args.command]
        return handler(cfg, args.out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationFailure, ValueError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FloatingPointError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    sys.exit(main())
