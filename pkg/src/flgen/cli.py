"""Command-line entry points.

Exit codes: 0 success, 1 bad input (config, sweep file, pool file, usage),
2 runtime failure inside an otherwise valid experiment.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from flgen.config import ConfigError, parse_config, parse_sweep, serialize_config, sweep_runs
from flgen.data import PoolFormatError, load_external_pool, save_pool
from flgen.orchestrator import (
    StageError,
    combined_generated,
    prepare_experiment,
    run_experiment,
)
from flgen.reporting import emit_metrics, emit_plotdata, render_run_figures, render_sweep_figures


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flgen",
        description="Federated learning simulation with generated-data supplementation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and write metrics")
    p_run.add_argument("config", help="flat key = value config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p_sweep = sub.add_parser("sweep", help="run a one-axis sweep with repeats")
    p_sweep.add_argument("sweep_file", help="sweep description file")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p_export = sub.add_parser("export-gen", help="write the generated pool a config would use")
    p_export.add_argument("config", help="flat key = value config file")
    p_export.add_argument("--out", required=True, help="output CSV path")

    p_import = sub.add_parser("import-gen", help="validate a generated-pool CSV")
    p_import.add_argument("pool_file", help="pool CSV to validate")
    p_import.add_argument("--classes", type=int, default=None, help="expected number of classes")
    p_import.add_argument("--dim", type=int, default=None, help="expected feature width")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg)

    (out / "config.txt").write_text(serialize_config(cfg))
    emit_metrics(result.records, out / "metrics.csv")
    written = [out / "config.txt", out / "metrics.csv"]

    pool = combined_generated(result.state)
    if len(pool):
        save_pool(pool, out / "generated_pool.csv")
        written.append(out / "generated_pool.csv")
    if not args.no_figures:
        written.extend(render_run_figures(result.records, out))

    final = result.records[-1]
    print(f"completed {cfg.rounds} rounds, strategy={cfg.strategy}, algorithm={cfg.algorithm.kind}")
    print(f"final global test accuracy: {final.global_test_acc:.6f}")
    if final.attack_acc is not None:
        print(f"final membership attack accuracy: {final.attack_acc:.6f}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = parse_sweep(args.sweep_file)
    runs = sweep_runs(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = []
    for i, (axis_value, seed, cfg) in enumerate(runs):
        run_dir = out / f"run_{i:03d}"
        run_dir.mkdir(exist_ok=True)
        result = run_experiment(cfg)
        (run_dir / "config.txt").write_text(serialize_config(cfg))
        emit_metrics(result.records, run_dir / "metrics.csv")
        results.append((axis_value, seed, result.records))
        final = result.records[-1]
        print(f"[{i + 1}/{len(runs)}] {spec.axis}={axis_value} seed={seed} "
              f"final_acc={final.global_test_acc:.6f}")

    emit_plotdata(results, out / "plotdata.csv")
    print(f"wrote {out / 'plotdata.csv'}")
    if not args.no_figures:
        for path in render_sweep_figures(results, out):
            print(f"wrote {path}")
    return 0


def _cmd_export_gen(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    state = prepare_experiment(cfg)
    pool = combined_generated(state)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_pool(pool, out)
    print(f"wrote {len(pool)} generated samples to {out}")
    return 0


def _cmd_import_gen(args: argparse.Namespace) -> int:
    pool = load_external_pool(args.pool_file, num_classes=args.classes, feature_dim=args.dim)
    n_private = int((pool.origins == 0).sum())
    n_generated = len(pool) - n_private
    label_range = f"{pool.labels.min()}..{pool.labels.max()}" if len(pool) else "none"
    print(f"{args.pool_file}: {len(pool)} rows, {pool.feature_dim} features, "
          f"labels {label_range}, private={n_private} generated={n_generated}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "export-gen": _cmd_export_gen,
    "import-gen": _cmd_import_gen,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, nonzero for usage errors
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, PoolFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        if isinstance(exc.__cause__, PoolFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
