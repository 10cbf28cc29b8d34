"""Command-line front end: corrupt, impute, evaluate, sweep, generate.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .dataset import CorruptionPlan, ParseError, SchemaError, conform, corrupt_mcar, dumps, load, load_schema
from .eval import load_sweep_config, score, sweep
from .imputers import GRAMMAR, SpecError, impute, default_grid, parse_spec
from .trainer import TrainedModel, sample_latent_grid


class UsageError(Exception):
    pass


def _percentage(text):
    u = float(text)
    if not 0 < u < 100:
        raise argparse.ArgumentTypeError(f"u must lie strictly between 0 and 100, got {text}")
    return u


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_input_flags(p, flag="--in", dest="input"):
    p.add_argument(flag, dest=dest, required=True, help="CSV file, '?' marks missing cells")
    p.add_argument("--schema", help="JSON schema: list of {name, kind, categories}")
    hdr = p.add_mutually_exclusive_group()
    hdr.add_argument("--header", dest="header", action="store_true", default=None,
                     help="first row is a header")
    hdr.add_argument("--no-header", dest="header", action="store_false", help="no header row")
    p.add_argument("--missing-token", default="?", help="token for missing cells (default ?)")


def _read(path, args):
    schema = load_schema(args.schema) if getattr(args, "schema", None) else None
    return load(path, schema=schema, header=args.header, missing=args.missing_token)


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _trainer_overrides(args) -> dict:
    keys = {"eta_start": "eta_start", "eta_floor": "eta_floor", "gamma": "gamma", "lam": "lam",
            "max_epochs": "max_epochs_per_phase", "holdout_fraction": "holdout_fraction"}
    out = {dst: getattr(args, src) for src, dst in keys.items() if getattr(args, src, None) is not None}
    if getattr(args, "h_before_w", False):
        out["h_before_w"] = True
    return out


def _add_trainer_flags(p):
    g = p.add_argument_group("trainer overrides (mf, nlpca, ubp)")
    g.add_argument("--eta-start", type=float)
    g.add_argument("--eta-floor", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--max-epochs", type=_positive_int, help="cap on epochs per phase")
    g.add_argument("--holdout-fraction", type=float,
                   help="fraction of known cells held out to drive the learning-rate decay")
    g.add_argument("--h-before-w", action="store_true",
                   help="compute the input gradient before the weight update")


def _progress_line(phase, epoch, rmse, eta):
    print(f"phase={phase} epoch={epoch} rmse={rmse:.10g} eta={eta:.10g}", file=sys.stderr, flush=True)


def cmd_corrupt(args):
    ds = _read(args.input, args)
    corrupted, plan = corrupt_mcar(ds, args.u, args.seed)
    _write(dumps(corrupted), args.out)
    if args.plan_out:
        Path(args.plan_out).write_text(plan.to_json() + "\n")
    print(f"removed {len(plan.removed)} of {ds.n * ds.d} cells", file=sys.stderr)


def cmd_impute(args):
    try:
        spec = parse_spec(args.method, seed=args.seed)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    ds = _read(args.input, args)
    progress = None if args.quiet else _progress_line
    result = impute(ds, spec, overrides=_trainer_overrides(args), progress=progress)
    _write(dumps(result.completed), args.out)
    if args.model_out:
        if result.trained is None:
            raise UsageError(f"--model-out needs a network method (ubp, nlpca), got {spec.method}")
        Path(args.model_out).write_text(result.trained.to_json())
    print(json.dumps({"method": str(spec), **{k: v for k, v in result.diagnostics.items()}},
                     default=str), file=sys.stderr)


def cmd_evaluate(args):
    original = _read(args.original, args)
    imputed = conform(_read(args.imputed, args), original)
    plan = CorruptionPlan.from_json(Path(args.plan).read_text())
    report = score(original, imputed, plan)
    _write(json.dumps(report.to_dict(), indent=2) + "\n", args.out)


def _sweep_specs(grids, width_by_dataset):
    # returns spec strings; "default" expands to the built-in grid for that method
    if isinstance(grids, list):
        return [str(parse_spec(s)) for s in grids]
    specs = []
    min_width = min(width_by_dataset.values())
    for method, grid in grids.items():
        if grid == "default":
            specs.extend(str(s) for s in default_grid(method, width=min_width))
        else:
            specs.extend(str(parse_spec(s if ":" in s or s == method else f"{method}:{s}")) for s in grid)
    return specs


def cmd_sweep(args):
    from .dataset import normalize_encode

    cfg = load_sweep_config(args.config)
    base = Path(args.config).parent
    datasets = []
    for entry in cfg["datasets"]:
        if isinstance(entry, str):
            entry = {"path": entry}
        path = base / entry["path"]
        schema = load_schema(base / entry["schema"]) if entry.get("schema") else None
        name = entry.get("name", Path(entry["path"]).stem)
        datasets.append((name, load(path, schema=schema, header=entry.get("header"))))
    widths = {name: normalize_encode(ds).values.shape[1] for name, ds in datasets}
    try:
        specs = _sweep_specs(cfg["grids"], widths)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    workers = args.workers or cfg.get("workers", 1)

    def progress(rec):
        status = rec.error or f"avg_error={rec.avg_error:.6g}"
        print(f"{rec.dataset} u={rec.u} seed={rec.seed} {rec.spec} {status}", file=sys.stderr, flush=True)

    result = sweep(datasets, cfg["u_levels"], cfg["seeds"], specs, workers=workers,
                   overrides=cfg.get("trainer"), progress=None if args.quiet else progress)
    out_csv = args.out_csv or cfg.get("out_csv")
    out_json = args.out_json or cfg.get("out_json")
    out_tsv = args.out_tsv or cfg.get("out_tsv")
    _write(result.to_csv(), out_csv or "-")
    summary = json.dumps(result.summary(reference=cfg.get("reference", "ubp")), indent=2) + "\n"
    if out_json:
        Path(out_json).write_text(summary)
    else:
        sys.stderr.write(summary)
    if out_tsv:
        Path(out_tsv).write_text(result.to_tsv())


def cmd_generate(args):
    tm = TrainedModel.from_json(Path(args.model).read_text())
    try:
        dims = tuple(int(x) for x in args.dims.split(","))
        bounds = None
        if args.bounds:
            b = [float(x) for x in args.bounds.split(",")]
            if len(b) != 4:
                raise ValueError
            bounds = [(b[0], b[1]), (b[2], b[3])]
        if len(dims) != 2:
            raise ValueError
    except ValueError:
        raise UsageError("--dims takes 'i,j' and --bounds 'lo_i,hi_i,lo_j,hi_j'") from None
    try:
        axis_i, axis_j, out = sample_latent_grid(tm, dims=dims, steps=args.steps, bounds=bounds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lines = []
    width = out.shape[2]
    lines.append(",".join([f"z{dims[0]}", f"z{dims[1]}"] + [f"out{c}" for c in range(width)]))
    for a, zi in enumerate(axis_i):
        for b, zj in enumerate(axis_j):
            lines.append(",".join(repr(float(x)) for x in (zi, zj, *out[a, b])))
    _write("\n".join(lines) + "\n", args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubpimpute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="remove u%% of cells completely at random")
    _add_input_flags(p)
    p.add_argument("--u", type=_percentage, required=True, help="percentage of cells to remove")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="corrupted CSV (default stdout)")
    p.add_argument("--plan-out", help="JSON record of the removed cells")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("impute", help="fill missing cells", epilog=f"method grammar: {GRAMMAR}")
    _add_input_flags(p)
    p.add_argument("--method", required=True, help="e.g. baseline, ibi:k=5, ubp:t=8,hidden=16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="completed CSV (default stdout)")
    p.add_argument("--model-out", help="save the trained ubp/nlpca model as JSON")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    _add_trainer_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("evaluate", help="score an imputation against the original data")
    _add_input_flags(p, flag="--original", dest="original")
    p.add_argument("--imputed", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a grid experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.add_argument("--out-tsv", help="gnuplot-ready error-vs-sparsity table")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate", help="decode a uniform grid over two latent coordinates")
    p.add_argument("--model", required=True, help="model JSON written by impute --model-out")
    p.add_argument("--dims", default="0,1")
    p.add_argument("--steps", type=_positive_int, default=10)
    p.add_argument("--bounds", help="lo_i,hi_i,lo_j,hi_j (default: range of the latent values)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ParseError, SchemaError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
