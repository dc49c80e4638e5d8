"""Command-line entry point: ``arcline <command> ...``.

Exit codes: 0 success, 1 bad input (validation error, unknown flag,
degenerate data), 2 the solver did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace

import numpy as np

from .calibration import calibrate
from .dataset import Dataset, DatasetError, read_dataset, write_dataset
from .evaluation import EvalConfig, InsufficientData, fit_holdout_eval, loocv
from .geometry import RigidTransform
from .registration import (
    DEFAULT_LAMBDA_INIT_MM,
    DEFAULT_THETA_BOUND_RAD,
    RegistrationProblem,
    register,
)
from .simulation import (
    SimConfig,
    run_calibration_sweep,
    run_pose_count_sweep,
    run_registration_sweep,
    simulate_dataset,
)
from .tracking import TrackingError, TrackingQuery, track

EXIT_OK, EXIT_INVALID, EXIT_NOCONVERGE = 0, 1, 2

REG_SWEEP_COLUMNS = ["deviation_deg", "trial", "tre_mm", "iters", "converged"]
REG_SUMMARY_COLUMNS = ["deviation_deg", "mean_tre_mm", "std_mm", "mean_outer_iters"]
CALIB_SWEEP_COLUMNS = ["n_poses", "mean_residual_mm", "std_mm", "fit_residual_mm"]
NS_SWEEP_COLUMNS = ["n_fit", "mean_tre_mm", "std_mm"]
EVAL_COLUMNS = ["n_fit", "n_holdout", "tre_mean_mm", "tre_std_mm", "converged", "outer_iterations"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for non-convergence here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _write_csv(rows, columns, out) -> None:
    w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def _emit(args, text: str) -> None:
    if getattr(args, "output", None):
        with open(args.output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    _write_csv(rows, columns, buf)
    return buf.getvalue()


def _theta_bound(args) -> float:
    if args.theta_bound_deg is None:
        return DEFAULT_THETA_BOUND_RAD
    if not args.theta_bound_deg > 0:
        raise ValueError("--theta-bound-deg must be > 0")
    return math.radians(args.theta_bound_deg)


def _lambda_init(args) -> float:
    return DEFAULT_LAMBDA_INIT_MM if args.lambda_init_mm is None else args.lambda_init_mm


def _fit_indices(n: int, n_fit: int | None, seed: int) -> list[int]:
    if n_fit is None or n_fit == n:
        return list(range(n))
    if not 3 <= n_fit <= n:
        raise ValueError(f"--n-fit must be between 3 and {n}")
    return sorted(int(i) for i in np.random.default_rng(seed).permutation(n)[:n_fit])


def _load_config(args) -> SimConfig:
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    cfg = SimConfig.from_dict(d)
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.trials is not None:
        over["trials"] = args.trials
    if args.theta_bound_deg is not None:
        over["theta_bound_rad"] = _theta_bound(args)
    if args.lambda_init_mm is not None:
        over["lambda_init_mm"] = args.lambda_init_mm
    if args.theta_quant_deg is not None:
        over["theta_quant_rad"] = math.radians(args.theta_quant_deg)
    return replace(cfg, **over) if over else cfg


# ------------------------------------------------------------------ commands

def cmd_calibrate(args) -> int:
    ds = read_dataset(args.dataset)
    if ds.calibration_input is None:
        raise DatasetError("dataset has no calibration_input section")
    calib = calibrate(ds.calibration_input)
    ds.calibration = calib
    if args.write:
        write_dataset(ds, args.write)
    rows = [{"pose": i, "residual_mm": float(r)} for i, r in enumerate(calib.per_point_residuals_mm)]
    _emit(args, _csv_text(rows, ["pose", "residual_mm"]))
    print(f"mean residual {calib.residual_mm:.4f} mm over {len(rows)} poses", file=sys.stderr)
    return EXIT_OK


def _registration_json(res, prob, fit_idx) -> dict:
    return {
        "f_reg": res.f_reg.matrix().reshape(-1).tolist(),
        "fit_pairs": fit_idx,
        "lambdas_mm": res.lambdas_mm.tolist(),
        "delta_theta_deg": np.degrees(res.delta_thetas(prob)).tolist(),
        "final_cost_mm": res.final_cost_mm,
        "outer_iterations": res.outer_iterations,
        "converged": res.converged,
    }


def cmd_register(args) -> int:
    ds = read_dataset(args.dataset)
    idx = _fit_indices(len(ds), args.n_fit, args.seed if args.seed is not None else 0)
    prob = RegistrationProblem(ds.pairs(idx), ds.geometry, _theta_bound(args), _lambda_init(args))
    res = register(prob)
    _emit(args, json.dumps(_registration_json(res, prob, idx), indent=1) + "\n")
    if not res.converged:
        print("registration did not converge", file=sys.stderr)
        return EXIT_NOCONVERGE
    return EXIT_OK


def cmd_track(args) -> int:
    ds = read_dataset(args.dataset)
    if not 0 <= args.pair < len(ds):
        raise ValueError(f"--pair must be in [0, {len(ds) - 1}]")
    bound = _theta_bound(args)
    if args.registration:
        with open(args.registration) as fh:
            f_reg = RigidTransform.from_matrix(json.load(fh)["f_reg"])
    else:
        # register on every other pair so the tracked one stays unseen
        rest = [i for i in range(len(ds)) if i != args.pair]
        res = register(RegistrationProblem(ds.pairs(rest), ds.geometry, bound, _lambda_init(args)))
        if not res.converged:
            print("registration did not converge", file=sys.stderr)
            return EXIT_NOCONVERGE
        f_reg = res.f_reg
    line, obs = ds.pairs([args.pair])[0]
    code = EXIT_OK
    try:
        dt, lam, r = track(TrackingQuery(f_reg, line, obs, ds.geometry, bound))
    except TrackingError as e:
        print(str(e), file=sys.stderr)
        dt, lam, r = e.delta_theta_rad, e.lambda_mm, e.residual_mm
        code = EXIT_NOCONVERGE
    row = {"pair": args.pair, "delta_theta_deg": math.degrees(dt), "lambda_mm": lam, "residual_mm": r}
    _emit(args, _csv_text([row], ["pair", "delta_theta_deg", "lambda_mm", "residual_mm"]))
    return code


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if args.kind == "config":
        _emit(args, json.dumps(cfg.to_dict(), indent=1) + "\n")
    elif args.kind == "calib-sweep":
        _emit(args, _csv_text(run_calibration_sweep(cfg), CALIB_SWEEP_COLUMNS))
    elif args.kind == "reg-sweep":
        rows, _ = run_registration_sweep(cfg)
        _emit(args, _csv_text(rows, REG_SWEEP_COLUMNS))
    elif args.kind == "ns-sweep":
        _emit(args, _csv_text(run_pose_count_sweep(cfg, args.datasets), NS_SWEEP_COLUMNS))
    elif args.kind == "dataset":
        if not args.output:
            raise ValueError("simulate dataset needs -o/--output")
        seed = 0 if args.seed is None else args.seed
        write_dataset(simulate_dataset(cfg, seed, calibration_poses=args.calibration_poses), args.output)
    return EXIT_OK


def _eval_config(args) -> EvalConfig:
    return EvalConfig(theta_bound_rad=_theta_bound(args), lambda_init_mm=_lambda_init(args),
                      repetitions=args.repetitions)


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.dataset)
    ec = _eval_config(args)
    if args.kind == "tre":
        n_fit = args.n_fit if args.n_fit is not None else min(10, len(ds) - 1)
        rep = fit_holdout_eval(ds, n_fit, args.seed if args.seed is not None else 0, ec)
        _emit(args, _csv_text([rep.to_row()], EVAL_COLUMNS))
        return EXIT_OK if rep.converged else EXIT_NOCONVERGE
    mean, std, folds = loocv(ds, ec)
    rows = [{"fold": i, "error_mm": float(e)} for i, e in enumerate(folds)]
    _emit(args, _csv_text(rows, ["fold", "error_mm"]))
    print(f"LOOCV {mean:.3f} +/- {std:.3f} mm over {len(folds)} folds", file=sys.stderr)
    return EXIT_OK


def summarize_reg_rows(rows) -> list[dict]:
    by_dev: dict[float, list[dict]] = {}
    for r in rows:
        by_dev.setdefault(float(r["deviation_deg"]), []).append(r)
    out = []
    for dev in sorted(by_dev):
        sel = by_dev[dev]
        tre = np.array([float(r["tre_mm"]) for r in sel])
        out.append({"deviation_deg": dev, "mean_tre_mm": float(tre.mean()), "std_mm": float(tre.std()),
                    "mean_outer_iters": float(np.mean([float(r["iters"]) for r in sel]))})
    return out


def cmd_report(args) -> int:
    with open(args.table, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if header == REG_SWEEP_COLUMNS:
        _emit(args, _csv_text(summarize_reg_rows(rows), REG_SUMMARY_COLUMNS))
    elif header in (CALIB_SWEEP_COLUMNS, NS_SWEEP_COLUMNS, REG_SUMMARY_COLUMNS, EVAL_COLUMNS):
        _emit(args, _csv_text(rows, header))
    else:
        raise ValueError(f"unrecognized table columns: {header}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--theta-bound-deg", type=float, default=None,
                   help="slice-thickness half-width searched by the solver (default 6)")
    p.add_argument("--lambda-init-mm", type=float, default=None)
    p.add_argument("-o", "--output", default=None, help="write to this file instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arcline", description="Arc-to-line camera/TRUS registration tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="fit the laser line from the dataset's calibration poses")
    p.add_argument("dataset")
    p.add_argument("--write", metavar="PATH", help="save the dataset with the fitted calibration")
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("register", help="estimate F_reg from the dataset's pairs")
    p.add_argument("dataset")
    p.add_argument("--n-fit", type=int, default=None, help="register a seeded random subset of this size")
    _common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("track", help="angle correction for one pair")
    p.add_argument("dataset")
    p.add_argument("--pair", type=int, required=True)
    p.add_argument("--registration", help="JSON written by `register`; default: fit on the other pairs")
    _common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("simulate", help="Monte-Carlo sweeps and synthetic datasets")
    p.add_argument("kind", choices=["calib-sweep", "reg-sweep", "ns-sweep", "dataset", "config"])
    p.add_argument("config", nargs="?", help="SimConfig JSON (defaults when omitted)")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--theta-quant-deg", type=float, default=None,
                   help="quantize simulated scan angles to this step")
    p.add_argument("--datasets", type=int, default=40, help="sessions for ns-sweep")
    p.add_argument("--calibration-poses", type=int, default=None,
                   help="dataset: also simulate an aiming session and fit the line from it")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="holdout TRE or leave-one-out error")
    p.add_argument("kind", choices=["tre", "loocv"])
    p.add_argument("dataset")
    p.add_argument("--n-fit", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit a table as plot-ready CSV (per-trial sweeps are summarized)")
    p.add_argument("table")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, InsufficientData, DatasetError, KeyError, OSError) as e:
        print(f"arcline: error: {e}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
