"""Command-line front end.

Every subcommand writes its outputs under ``--out`` together with a
``manifest_<command>.json`` (argv, config, input digests, seed, version, wall-clock,
output list). ``nmfre rerun <manifest>`` replays a run.

Exit codes: 0 ok, 1 I/O, 2 validation, 3 non-convergence,
4 singular information, 5 too many failed simulation replicates.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, backend
from .complexity import calibrate_cap, write_lookup_csv
from .data import DataSet, FitConfig, WarmStart, bundled_path, load_dataset
from .errors import (NMFREError, NotConvergedWarning, SimulationFailure,
                     SingularInformation)
from .estimator import FitResult, fit, init_covariate_nmf
from .inference import InferenceConfig, MULTIPLIERS, infer
from .simulation import (STRESS_COLUMNS, BASELINE_COLUMNS, baseline_design, default_workers,
                         run_monte_carlo, stress_design, write_records_csv,
                         write_summary_csv)

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NOT_CONVERGED, EXIT_SINGULAR, EXIT_SIMULATION = range(6)


class _Run:
    """Collects inputs and outputs of one invocation for the manifest."""

    def __init__(self, argv, args):
        self.argv = list(argv)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.config = {}
        self.seed = getattr(args, "seed", None)
        self.manifest = f"manifest_{args.command.replace('-', '_')}.json"
        self.t0 = time.perf_counter()

    def read(self, path):
        data = Path(path).read_bytes()
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def path(self, name):
        self.outputs.append(name)
        return self.out / name

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, allow_nan=True)
            fh.write("\n")

    def finish(self, exit_code):
        manifest = {
            "command": self.argv, "config": self.config,
            "inputs": self.inputs, "seed": self.seed,
            "version": __version__, "backend": backend(),
            "wall_clock_s": round(time.perf_counter() - self.t0, 6),
            "outputs": sorted(self.outputs + [self.manifest]),
            "exit_code": exit_code,
        }
        with open(self.out / self.manifest, "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        return exit_code


# -- data ----------------------------------------------------------------------

def _load_data(args, run) -> DataSet:
    if args.example:
        if args.y or args.a:
            raise _Usage("--example cannot be combined with --y/--a")
        y, a = bundled_path(f"{args.example}_Y.csv"), bundled_path(f"{args.example}_A.csv")
        run.inputs[f"bundled:{args.example}_Y.csv"] = hashlib.sha256(y.read_bytes()).hexdigest()
        run.inputs[f"bundled:{args.example}_A.csv"] = hashlib.sha256(a.read_bytes()).hexdigest()
        return load_dataset(y, a)
    if not args.y or not args.a:
        raise _Usage("both --y and --a are required (or use --example)")
    run.read(args.y)
    run.read(args.a)
    return load_dataset(args.y, args.a)


def _dataset_dict(ds):
    return {"Y": ds.Y.tolist(), "A": ds.A.tolist(), "row_labels_Y": list(ds.row_labels_Y),
            "row_labels_A": list(ds.row_labels_A), "col_labels": list(ds.col_labels)}


def _dataset_from_dict(d):
    return DataSet(np.array(d["Y"], dtype=float), np.array(d["A"], dtype=float),
                   tuple(d["row_labels_Y"]), tuple(d["row_labels_A"]), tuple(d["col_labels"]))


def _cap_arg(text):
    if text is None:
        return None
    if text.lower() in ("off", "none"):
        return "off"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--cap expects a number or 'off', got {text!r}")


def _fit_config(args, run):
    base = {}
    if args.config:
        base = json.loads(run.read(args.config))
    cfg = FitConfig.from_dict(base).to_dict()
    overrides = {"Q": args.q, "lambda_init": args.lambda_init, "maxit": args.maxit,
                 "n_restarts": args.restarts, "tol": args.tol, "rng_seed": args.seed}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.cap is not None:
        cfg["cap_ratio"] = None if args.cap == "off" else args.cap
    if args.warm_start:
        cfg["warm_start"] = cfg.get("warm_start") or WarmStart().__dict__
    return FitConfig.from_dict(cfg)


# -- subcommands ---------------------------------------------------------------

def _diagnostics_row(res: FitResult, ds):
    d = res.diagnostics
    return {"N": ds.N, "P": ds.P, "Q": d.Q, "NQ": d.N * d.Q, "df_U": f"{d.df_U:.2f}",
            "r": f"{d.saturation_ratio:.3f}",
            "r_max": "off" if d.cap_ratio is None else f"{d.cap_ratio:.2f}",
            "lambda": f"{d.lambda_final:.2f}", "Cap": "Yes" if d.cap_ever_activated else "No"}


def _write_rows(path, rows, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_fit(args, run):
    ds = _load_data(args, run)
    cfg = _fit_config(args, run)
    run.config = cfg.to_dict()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        res = fit(ds, cfg)

    doc = res.to_dict()
    doc["data"] = _dataset_dict(ds)
    doc["version"] = __version__
    run.write_json("fit.json", doc)

    row = _diagnostics_row(res, ds)
    _write_rows(run.path("diagnostics.csv"), [row])
    _write_rows(run.path("trace.csv"), res.trace.records(),
                ["iteration", "objective", "lambda", "df_U", "cap_activated", "safeguard"])

    p = res.params
    fixed = p.X @ p.Theta @ ds.A
    fitted = p.X @ (p.Theta @ ds.A + p.U)
    rows = [{"unit": ds.col_labels[n], "row": ds.row_labels_Y[i],
             "observed": repr(float(ds.Y[i, n])), "fitted": repr(float(fitted[i, n])),
             "fixed_part": repr(float(fixed[i, n]))}
            for n in range(ds.N) for i in range(ds.P)]
    _write_rows(run.path("fitted.csv"), rows)
    _write_rows(run.path("basis.csv"),
                [{"row": ds.row_labels_Y[i], **{f"Basis{q + 1}": repr(float(p.X[i, q]))
                                                for q in range(p.Q)}}
                 for i in range(ds.P)])

    print(",".join(row))
    print(",".join(str(v) for v in row.values()))
    if not res.converged:
        print(f"warning: not converged within maxit={cfg.maxit}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_calibrate_cap(args, run):
    ds = _load_data(args, run)
    cfg = FitConfig(Q=args.q, rng_seed=args.seed or 0)
    run.config = {"Q": args.q, "lambda_min": args.lambda_min, "rng_seed": cfg.rng_seed}
    X_fix, _ = init_covariate_nmf(ds, cfg)
    df_max, table = calibrate_cap(X_fix, args.lambda_min, ds.N, return_table=True)
    r_max = df_max / (ds.N * args.q)
    write_lookup_csv(run.path("lookup.csv"), table)
    run.write_json("calibration.json", {"df_max": df_max, "r_max": r_max,
                                        "lambda_min": args.lambda_min, "X_fix": X_fix.tolist()})
    print(f"df_max={df_max:.6g} r_max={r_max:.6g}")
    return EXIT_OK


def cmd_infer(args, run):
    doc = json.loads(run.read(args.fit))
    if "data" not in doc:
        raise _Usage(f"{args.fit} has no embedded data; produce it with 'nmfre fit'")
    ds = _dataset_from_dict(doc["data"])
    res = FitResult.from_dict(doc)
    icfg = InferenceConfig(B=args.b, rng_seed=args.seed or 0, multiplier_dist=args.multiplier,
                           small_sample=not args.no_small_sample,
                           test_side="two_sided" if args.two_sided else "one_sided")
    run.config = {k: v for k, v in icfg.__dict__.items()}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = infer(ds, res.params, icfg, covariate_labels=ds.row_labels_A)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rep.to_csv(run.path("report.csv"))
    run.write_json("report.json", rep.to_dict(include_replicates=args.dump_replicates))
    print(run.out.joinpath("report.csv").read_text(), end="")
    return EXIT_OK


def _mc(args, run, design, columns, row_fn, name):
    run.config = {"design": design.label, "N": design.N, "R": design.R, "B": design.B,
                  "seed": design.seed, "fit": design.fit_cfg.to_dict()}
    workers = args.threads if args.threads else default_workers()
    summary = run_monte_carlo(design, workers)
    row = row_fn(summary)
    write_summary_csv(run.path(name), [row], columns)
    write_records_csv(run.path("replicates.csv"), summary.records)
    print(",".join(columns))
    print(",".join(str(row[c]) for c in columns))
    return EXIT_OK


def _scenario(text):
    return "null_boundary" if text == "null" else "alternative_interior"


def cmd_simulate(args, run):
    design = baseline_design(args.n, args.error, _scenario(args.scenario), args.r, args.b,
                             seed=20260101 if args.seed is None else args.seed)
    return _mc(args, run, design, BASELINE_COLUMNS, lambda s: s.baseline_row(), "summary_baseline.csv")


def cmd_stress(args, run):
    cap = 0.21 if args.cap is None else args.cap
    design = stress_design(cap, args.error, _scenario(args.scenario), args.r, args.b,
                           seed=20260202 if args.seed is None else args.seed, N=args.n)
    return _mc(args, run, design, STRESS_COLUMNS, lambda s: s.stress_row(), "summary_stress.csv")


def cmd_rerun(args, run_unused=None):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["command"])
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    for path, digest in manifest["inputs"].items():
        if path.startswith("bundled:"):
            continue
        if hashlib.sha256(Path(path).read_bytes()).hexdigest() != digest:
            print(f"error: {path} changed since the recorded run", file=sys.stderr)
            return EXIT_IO
    return main(argv)


# -- parser --------------------------------------------------------------------

class _Usage(Exception):
    pass


def _common(p, seed_help="master seed"):
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $NMFRE_THREADS or 1)")


def _data_args(p):
    p.add_argument("--y", help="response matrix CSV (P x N, labelled)")
    p.add_argument("--a", help="covariate matrix CSV (K x N, labelled)")
    p.add_argument("--example", choices=["orthodont"], help="use a bundled data set")


def build_parser():
    parser = argparse.ArgumentParser(prog="nmfre", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"nmfre {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model")
    _data_args(p)
    p.add_argument("--q", type=int, default=None, help="number of basis vectors")
    p.add_argument("--config", help="FitConfig JSON; explicit flags override it")
    p.add_argument("--cap", type=_cap_arg, default=None, help="df-cap ratio or 'off'")
    p.add_argument("--lambda-init", dest="lambda_init", type=float, default=None)
    p.add_argument("--maxit", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--warm-start", action="store_true",
                   help="update lambda from an EMA of the residual variance")
    _common(p, "restart seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate-cap", help="df cap implied by a penalty floor")
    _data_args(p)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--lambda-min", dest="lambda_min", type=float, required=True)
    _common(p, "initialization seed")
    p.set_defaults(func=cmd_calibrate_cap)

    p = sub.add_parser("infer", help="sandwich SEs, bootstrap and tests for Theta")
    p.add_argument("--fit", required=True, help="fit.json written by 'nmfre fit'")
    p.add_argument("--b", type=int, default=1000, help="bootstrap replicates")
    p.add_argument("--multiplier", choices=MULTIPLIERS, default="exp_centered")
    p.add_argument("--two-sided", action="store_true")
    p.add_argument("--no-small-sample", action="store_true",
                   help="drop the N/(N-1) factor on the score covariance")
    p.add_argument("--dump-replicates", action="store_true")
    _common(p, "bootstrap seed")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="baseline Monte Carlo cell")
    p.add_argument("--n", type=int, default=27)
    p.add_argument("--error", choices=["gaussian", "exp_centered"], default="gaussian")
    p.add_argument("--scenario", choices=["null", "alt"], default="null")
    p.add_argument("--r", type=int, default=200)
    p.add_argument("--b", type=int, default=200)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stress", help="Q=3 df-cap stress test cell")
    p.add_argument("--cap", type=_cap_arg, default=None, help="0.21 (default), a ratio, or 'off'")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--error", choices=["gaussian", "exp_centered"], default="gaussian")
    p.add_argument("--scenario", choices=["null", "alt"], default="null")
    p.add_argument("--r", type=int, default=100)
    p.add_argument("--b", type=int, default=200)
    _common(p)
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to this directory instead")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO

    try:
        run = _Run(argv, args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        code = args.func(args, run)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"nmfre {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except SingularInformation as exc:
        print(f"error: singular information (factor {exc.factor}): {exc}", file=sys.stderr)
        code = EXIT_SINGULAR
    except SimulationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_SIMULATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except (NMFREError, ValueError, ArithmeticError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
