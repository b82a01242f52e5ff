"""Command-line entry point: ``onlinecqr fit | fit-oracle | simulate``.

Exit codes: 0 success, 2 usage, 3 unreadable input, 4 dimension mismatch,
5 numerical failure, 6 checkpoint locked.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import checkpoint
from .batch import SolverError, fit_batch
from .core import DomainError, QuantileGrid, RecordBatch
from .datafile import ParseError, format_diagnostics, format_results, read_records
from .gamma import GammaError, RelsConfig
from .online import (
    SEED_RESAMPLE,
    IngestError,
    MmConfig,
    OnlineConfig,
    SummaryState,
    derive_seed,
    ingest_batch_with_diagnostics,
)
from .sim import ERROR_KINDS, SimDesign, StudyError, format_metrics, format_path_export, run_study
from .variance import VarianceError, _report, resample_batch_variance

EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_DIMENSION = 4
EXIT_SOLVER = 5
EXIT_LOCK = 6

DEFAULTS = {
    "grid": "step=0.01,max=0.5",
    "tau_max": None,
    "seed": 0,
    "resample_s": 250,
    "resample_S": 250,
    "omega0": 0.5,
    "lambda": 2.0,
    "tol": 1e-4,
    "threads": 1,
    "delimiter": ",",
    "design": "standard_normal",
    "reps": 200,
    "mode": "online",
    "n_b": 200,
    "batches": 5,
    "censor_upper": None,
    "censor_rate": None,
    "taus": "0.1,0.3,0.5",
}


class UsageError(Exception):
    pass


class DimensionError(Exception):
    pass


def parse_grid(text: str, tau_max=None) -> QuantileGrid:
    """``"step=0.01,max=0.5"`` or an explicit list such as ``"0.1,0.2,0.3"``."""
    text = str(text).strip()
    try:
        if "=" in text:
            opts = dict(part.split("=", 1) for part in text.split(","))
            unknown = set(opts) - {"step", "max"}
            if unknown:
                raise UsageError(f"unknown grid key(s): {', '.join(sorted(unknown))}")
            step = float(opts.get("step", 0.01))
            top = float(tau_max if tau_max is not None else opts.get("max", 0.5))
            return QuantileGrid.regular(step, top)
        taus = [float(t) for t in text.split(",") if t.strip()]
        if tau_max is not None:
            taus = [t for t in taus if t <= float(tau_max) + 1e-12]
        return QuantileGrid(taus)
    except (ValueError, DomainError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"bad grid {text!r}: {exc}") from None


def _settings(args):
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        merged.update(from_file)
    merged.update({k: v for k, v in vars(args).items() if k in DEFAULTS})
    return merged


def _online_config(cfg):
    try:
        return OnlineConfig(
            mm=MmConfig(omega0=float(cfg["omega0"]), lam=float(cfg["lambda"]), tol=float(cfg["tol"])),
            rels=RelsConfig(s=int(cfg["resample_s"]), seed=int(cfg["seed"])),
            resample_S=int(cfg["resample_S"]),
            threads=int(cfg["threads"]),
        )
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _diagnostics_path(args):
    if args.diagnostics:
        return args.diagnostics
    if args.out and args.out != "-":
        return args.out + ".diagnostics.csv"
    return None


def cmd_fit(args) -> int:
    cfg = _settings(args)
    config = _online_config(cfg)
    if not args.batch:
        raise UsageError("fit needs at least one --batch file")
    if args.checkpoint_in:
        state = checkpoint.load(args.checkpoint_in)
        if "grid" in vars(args) or "tau_max" in vars(args):
            wanted = parse_grid(cfg["grid"], cfg["tau_max"])
            if wanted != state.grid:
                raise UsageError("--grid differs from the checkpoint's grid")
        if "seed" in vars(args) and int(args.seed) != state.seed:
            raise UsageError(f"--seed {args.seed} differs from checkpoint seed {state.seed}")
    else:
        state = None
        grid = parse_grid(cfg["grid"], cfg["tau_max"])

    lock = checkpoint.CheckpointLock(args.checkpoint_out) if args.checkpoint_out else None
    if lock:
        lock.__enter__()
    diag_path = _diagnostics_path(args)
    diag = open(diag_path, "w", newline="") if diag_path else None
    try:
        result = names = None
        for path in args.batch:
            records, names = read_records(path, cfg["delimiter"])
            if state is None:
                state = SummaryState.empty(grid, records.p, int(cfg["seed"]))
            if records.p != state.p:
                raise DimensionError(
                    f"{path} has {records.p - 1} covariates, checkpoint expects {state.p - 1}")
            result = ingest_batch_with_diagnostics(state, records, config)
            state = result.state
            del records
            if diag:
                # streamed so memory does not grow with the number of batches
                diag.write(format_diagnostics([(state.batch_index, d) for d in result.levels],
                                              cfg["delimiter"], header=diag.tell() == 0))
        if args.checkpoint_out:
            checkpoint.save(state, args.checkpoint_out)
    finally:
        if diag:
            diag.close()
        if lock:
            lock.__exit__(None, None, None)

    _write(args.out, format_results(state.grid, state.beta, result.report.se, names, cfg["delimiter"]))
    return 0


def cmd_fit_oracle(args) -> int:
    cfg = _settings(args)
    if not args.batch:
        raise UsageError("fit-oracle needs at least one --batch file")
    grid = parse_grid(cfg["grid"], cfg["tau_max"])
    parts, names = [], None
    for path in args.batch:
        records, these = read_records(path, cfg["delimiter"])
        if names is not None and these != names:
            raise DimensionError(f"{path} covariates {these} differ from {names}")
        names = these
        parts.append(records)
    data = RecordBatch.concatenate(parts)
    path_fit = fit_batch(data, grid)
    # same resampling stream as the first block of an online fit
    cov = resample_batch_variance(
        data, grid, int(cfg["resample_S"]), derive_seed(int(cfg["seed"]), SEED_RESAMPLE, 1),
        threads=int(cfg["threads"]),
    )
    report = _report(grid, cov)
    _write(args.out, format_results(grid, path_fit.coefs, report.se, names, cfg["delimiter"]))
    return 0


def cmd_simulate(args) -> int:
    cfg = _settings(args)
    if cfg["design"] not in ERROR_KINDS:
        raise UsageError(f"unknown design {cfg['design']!r}; choose from {', '.join(ERROR_KINDS)}")
    if cfg["mode"] not in ("online", "oracle"):
        raise UsageError("--mode must be online or oracle")
    kw = dict(n_b=int(cfg["n_b"]), B=int(cfg["batches"]), seed=int(cfg["seed"]))
    if cfg["censor_upper"] is not None:
        kw.update(censor_upper=float(cfg["censor_upper"]), target_censor_rate=None)
    elif cfg["censor_rate"] is not None:
        kw.update(target_censor_rate=float(cfg["censor_rate"]), censor_upper=None)
    try:
        design = SimDesign.preset(cfg["design"], **kw)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    grid = parse_grid(cfg["grid"], cfg["tau_max"])
    taus = [float(t) for t in str(cfg["taus"]).split(",")]
    try:
        result = run_study(design, int(cfg["reps"]), taus, cfg["mode"], grid,
                           _online_config(cfg), threads=int(cfg["threads"]))
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    _write(args.out, format_metrics(result.rows, cfg["delimiter"]))
    if args.path_out:
        _write(args.path_out, format_path_export(result, cfg["delimiter"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onlinecqr",
        description="Censored quantile regression fitted online over data batches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        S = argparse.SUPPRESS
        p.add_argument("--config", help="JSON file of defaults (flags take precedence)")
        p.add_argument("--grid", default=S, help='"step=0.01,max=0.5" or "0.1,0.2,..."')
        p.add_argument("--tau-max", dest="tau_max", type=float, default=S)
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--resample-s", dest="resample_s", type=int, default=S,
                       help="perturbations per weight-matrix estimate")
        p.add_argument("--resample-S", dest="resample_S", type=int, default=S,
                       help="weighted refits per block for the covariance")
        p.add_argument("--omega0", type=float, default=S)
        p.add_argument("--lambda", dest="lambda", type=float, default=S)
        p.add_argument("--tol", type=float, default=S)
        p.add_argument("--threads", type=int, default=S)
        p.add_argument("--delimiter", default=S)
        p.add_argument("--out", default="-", help="output table (default stdout)")

    fit = sub.add_parser("fit", help="ingest batches into a checkpointed online fit")
    common(fit)
    fit.add_argument("--batch", action="append", default=[], help="data file; repeat to stream several")
    fit.add_argument("--checkpoint-in", dest="checkpoint_in")
    fit.add_argument("--checkpoint-out", dest="checkpoint_out")
    fit.add_argument("--diagnostics", help="per-level diagnostics table (default <out>.diagnostics.csv)")
    fit.set_defaults(func=cmd_fit)

    oracle = sub.add_parser("fit-oracle", help="fit all batches pooled at once")
    common(oracle)
    oracle.add_argument("--batch", action="append", default=[])
    oracle.set_defaults(func=cmd_fit_oracle)

    sim = sub.add_parser("simulate", help="Monte Carlo study of a simulation design")
    common(sim)
    S = argparse.SUPPRESS
    sim.add_argument("--design", default=S, help=" | ".join(ERROR_KINDS))
    sim.add_argument("--reps", type=int, default=S)
    sim.add_argument("--mode", default=S, help="online | oracle")
    sim.add_argument("--n-b", dest="n_b", type=int, default=S)
    sim.add_argument("--batches", type=int, default=S)
    sim.add_argument("--censor-upper", dest="censor_upper", type=float, default=S)
    sim.add_argument("--censor-rate", dest="censor_rate", type=float, default=S)
    sim.add_argument("--taus", default=S, help="report quantiles, comma separated")
    sim.add_argument("--path-out", dest="path_out", help="coefficient path export for plotting")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ParseError, checkpoint.CheckpointError, OSError) as exc:
        print(f"onlinecqr: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DimensionError as exc:
        print(f"onlinecqr: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except checkpoint.LockError as exc:
        print(f"onlinecqr: {exc}", file=sys.stderr)
        return EXIT_LOCK
    except (IngestError, SolverError, GammaError, VarianceError, StudyError) as exc:
        print(f"onlinecqr: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
