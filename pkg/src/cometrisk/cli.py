"""Command-line entry point: ``cometrisk <command> ...``.

Exit codes: 0 success, 2 invalid input or usage, 3 VaR did not converge.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import demo, engine, files
from .errors import CometRiskError, GarchFitError, ValidationError
from .price_model import fit_garch, load_price_csv, log_returns
from .slippage import clean_samples, fit_slippage, load_samples

EXIT_OK, EXIT_INVALID, EXIT_UNCONVERGED = 0, 2, 3

log = logging.getLogger("cometrisk")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError([f"{self.prog}: {message}"])


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _scenario_args(p):
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--snapshot", type=Path, help="defaults to the config's 'snapshot' entry")
    p.add_argument("--seed", type=_u64, help=f"master seed (default: config value, else {files.DEFAULT_SEED})")
    p.add_argument("--epsilon", help="convergence bound: USD amount, percent of round-1 p95 (e.g. 1%%), or inf")
    p.add_argument("--paths-per-round", type=_positive)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--workers", type=_positive, help="worker processes (capped by RISKSIM_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cometrisk", description="Monte Carlo risk engine for a Comet-style lending market.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit-garch", help="fit ARMA-GARCH to a price history and store it in a config")
    p.add_argument("--prices", required=True, type=Path, help="CSV with header timestamp,asset,price")
    p.add_argument("--asset", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--arma-p", type=int, default=0)
    p.add_argument("--arma-q", type=int, default=0)

    p = sub.add_parser("fit-slippage", help="fit a slippage curve to execution samples")
    p.add_argument("--samples", required=True, type=Path, help='JSON array of {"sell", "slippagePercent"}')
    p.add_argument("--asset", required=True)
    p.add_argument("--form", required=True, choices=["log", "log_linear", "linear"])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--whale-quantile", type=float, default=0.995)
    p.add_argument("--no-clean", action="store_true", help="fit the raw samples")

    p = sub.add_parser("simulate", help="run staged VaR plus LaR and write a report")
    _scenario_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--format", choices=["json", "csv"], default="json")

    p = sub.add_parser("var", help="run the staged VaR protocol and print the result")
    _scenario_args(p)
    p.add_argument("--out", type=Path, help="also write the full JSON report")

    p = sub.add_parser("lar", help="LaR percentiles over several independent seeds")
    _scenario_args(p)
    p.add_argument("--sets", type=_positive, default=3, help="number of seeds: seed, seed+1, ...")
    p.add_argument("--paths", type=_positive, help="paths per set (default 3 rounds)")
    p.add_argument("--out", type=Path, help="write the per-set tables as JSON")

    p = sub.add_parser("report", help="convert a JSON report")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    p.add_argument("--out", type=Path, help="output path (csv: directory); default next to the input")

    p = sub.add_parser("demo", help="write the bundled demo config and snapshot")
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("schema", help="write JSON schemas for config, snapshot and report files")
    p.add_argument("--out-dir", required=True, type=Path)
    return parser


# ---------------------------------------------------------------------------
# Helpers shared by commands
# ---------------------------------------------------------------------------


def _merge_json(path: Path, keys: tuple[str, ...], value, drop: tuple[str, ...] | None = None) -> dict:
    """Set ``value`` at nested ``keys`` in the JSON file at ``path`` (created if absent)."""
    data = json.loads(path.read_text()) if path.exists() else {}
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    if drop:
        node = data
        for k in drop[:-1]:
            node = node.get(k, {})
        node.pop(drop[-1], None)
    if "schema_version" in data:
        files.ConfigFile.model_validate(data)
    files.write_json(data, path)
    return data


def load_inputs(args):
    cfg = files.load_config(args.config)
    base = args.config.parent
    snap_path = args.snapshot
    if snap_path is None:
        if cfg.snapshot is None:
            raise ValidationError(["no --snapshot given and the config names none"])
        snap_path = base / cfg.snapshot
    snap = files.load_snapshot(snap_path, cfg)
    sim = cfg.simulation
    opts = {
        "seed": sim.seed if args.seed is None else args.seed,
        "epsilon": str(engine.Tolerance.parse(args.epsilon if args.epsilon is not None else sim.epsilon)),
        "paths_per_round": args.paths_per_round or sim.paths_per_round,
        "max_rounds": args.max_rounds if args.max_rounds is not None else sim.max_rounds,
        "lar_bins": sim.lar_bins,
    }
    if opts["max_rounds"] < 3:
        raise ValidationError(["--max-rounds must be >= 3"])
    sc = files.build_scenario(cfg, snap, base, seed=opts["seed"])
    return cfg, snap, sc, opts


def build_report(cfg, snap, sc, opts, workers=None) -> files.ReportFile:
    var, outcomes = engine.estimate_var(
        sc, opts["epsilon"], opts["paths_per_round"], opts["max_rounds"], workers=workers
    )
    lar = engine.estimate_lar(outcomes, opts["lar_bins"])
    options = {k: v for k, v in opts.items() if k != "seed"}
    return files.ReportFile(
        fingerprint=files.fingerprint(cfg, snap, opts["seed"], options),
        seed=opts["seed"],
        var=files.var_model(var, opts["epsilon"], opts["paths_per_round"]),
        lar=files.lar_model(lar),
        diagnostics=files.diagnostics(sc, outcomes, len(snap.accounts)),
    )


def _print_var(v: files.VarModel):
    eps = "unbounded" if v.epsilon_usd is None else f"{v.epsilon_usd} USD"
    for c in v.checks:
        gap = "" if c.gap_usd is None else f"  gap {c.gap_usd}  {'within' if c.within else 'outside'}"
        print(f"round {c.round}: n={c.n_samples}  p95 {c.p95_usd}{gap}")
    state = "converged" if v.converged else "NOT converged"
    print(f"VaR95 {v.var95_usd} USD ({state}, epsilon {v.epsilon} = {eps}, {v.n_samples} paths)")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit_garch(args) -> int:
    series = load_price_csv(args.prices)
    if args.asset not in series:
        raise ValidationError([f"{args.prices}: no rows for asset {args.asset}"])
    try:
        spec = fit_garch(log_returns(series[args.asset]), p=args.p, q=args.q, arma_p=args.arma_p, arma_q=args.arma_q)
    except GarchFitError as exc:
        print(f"fit did not converge: {exc}; best so far {exc.best}", file=sys.stderr)
        return EXIT_UNCONVERGED
    _merge_json(args.out, ("price_model", "garch", args.asset), spec.to_dict(), drop=("price_model", "fit", args.asset))
    print(f"{args.asset}: {json.dumps(spec.to_dict())} -> {args.out}")
    return EXIT_OK


def cmd_fit_slippage(args) -> int:
    samples = load_samples(args.samples)
    if not args.no_clean:
        samples = clean_samples(samples, args.whale_quantile)
    form = "log_linear" if args.form in ("log", "log_linear") else "linear"
    model = fit_slippage(samples, form, args.asset)
    entry = {"form": model.form, "intercept": model.intercept, "slope": model.slope}
    _merge_json(args.out, ("slippage", "models", args.asset), entry)
    print(f"{args.asset}: {json.dumps(entry)} from {len(samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, snap, sc, opts = load_inputs(args)
    report = build_report(cfg, snap, sc, opts, args.workers)
    files.write_report(report, args.out, args.format)
    _print_var(report.var)
    print(f"report written to {args.out}")
    return EXIT_OK if report.var.converged else EXIT_UNCONVERGED


def cmd_var(args) -> int:
    cfg, snap, sc, opts = load_inputs(args)
    report = build_report(cfg, snap, sc, opts, args.workers)
    if args.out:
        files.write_report(report, args.out, "json")
    _print_var(report.var)
    if not report.var.converged:
        print(f"VaR did not converge within {report.var.rounds} rounds", file=sys.stderr)
        return EXIT_UNCONVERGED
    return EXIT_OK


def lar_sets(sc: engine.Scenario, sets: int, n_paths: int, bins: int = 100, workers=None) -> list[engine.LarReport]:
    out = []
    for i in range(sets):
        seeded = dataclasses.replace(sc, master_seed=(sc.master_seed + i) % 2**64)
        with engine.Runner(seeded, workers) as runner:
            out.append(engine.estimate_lar(runner.run(range(n_paths)), bins))
    return out


def cmd_lar(args) -> int:
    cfg, snap, sc, opts = load_inputs(args)
    n = args.paths or 3 * opts["paths_per_round"]
    reports = lar_sets(sc, args.sets, n, opts["lar_bins"], args.workers)
    cols = reports[0].columns
    print("set  seed  " + "  ".join(f"{c}_p95" for c in cols))
    for i, rep in enumerate(reports):
        print(f"{i}  {sc.master_seed + i}  " + "  ".join(str(rep.percentiles[c]["p95"]) for c in cols))
    if args.out:
        data = [
            {"seed": sc.master_seed + i, "n_paths": rep.n_paths, **files.lar_model(rep).model_dump(mode="json")}
            for i, rep in enumerate(reports)
        ]
        files.write_json(data, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    report = files.load_report(args.inp)
    out = args.out or (args.inp.with_suffix("") if args.format == "csv" else args.inp)
    written = files.write_report(report, out, args.format)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_demo(args) -> int:
    for path in demo.write_demo(args.out_dir):
        print(path)
    return EXIT_OK


def cmd_schema(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, schema in files.json_schemas().items():
        print(files.write_json(schema, args.out_dir / f"{name}.schema.json"))
    return EXIT_OK


COMMANDS = {
    "fit-garch": cmd_fit_garch,
    "fit-slippage": cmd_fit_slippage,
    "simulate": cmd_simulate,
    "var": cmd_var,
    "lar": cmd_lar,
    "report": cmd_report,
    "demo": cmd_demo,
    "schema": cmd_schema,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (CometRiskError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
