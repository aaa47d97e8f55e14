"""Command-line interface for the continuum pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, NoReturn

from . import __version__
from .config import RunConfig, derive_seed, load_config, with_overrides
from .detect import (
    NODE_LEVEL,
    AnomalyReport,
    DatasetSplit,
    detect,
    load_report,
    save_report,
    split_dataset,
)
from .exceptions import ContinuumError, ContinuumValidationError, ManifestError
from .fedsec import run_federation, write_round_metrics
from .ingest import (
    DatasetManifest,
    ingest,
    load_labels,
    load_node_labels,
    read_dataset,
    write_dataset,
)
from .snapshot import (
    CompressionReport,
    SnapshotDataset,
    compression_report,
    load_snapshot_dataset,
    save_snapshot_dataset,
    snapshot_dataset,
)
from .stgnn import Autoencoder, train, with_dimensions
from .synthetic import write_synthetic_dataset

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with the validation code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"Error: {message}\n")


def handle_error(e: BaseException) -> None:
    """Print an error and exit with the code for its category."""
    print(f"Error: {e}", file=sys.stderr)
    if isinstance(e, ContinuumValidationError):
        sys.exit(EXIT_VALIDATION)
    sys.exit(EXIT_RUNTIME)


def resolve_config(args: argparse.Namespace, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load ``--config`` (or defaults) and apply global and command flags."""
    config = load_config(args.config) if args.config else RunConfig()
    flags: dict[str, Any] = {"seed": args.seed, "jobs": args.jobs}
    if args.serial:
        flags["serial"] = True
    flags.update(overrides or {})
    return with_overrides(config, flags)


def model_for(config: RunConfig, ds: SnapshotDataset) -> Autoencoder:
    model_config = with_dimensions(config.model, ds.d_node, ds.d_edge)
    model_config = replace(model_config, seed=derive_seed(config.seed, "model"))
    return Autoencoder(model_config)


def dataset_split(config: RunConfig, ds: SnapshotDataset) -> DatasetSplit:
    return split_dataset(
        list(ds.graphs),
        ds.labels,
        config.detect.train_fraction,
        config.detect.val_fraction,
        derive_seed(config.seed, "split"),
    )


def cmd_ingest(args: argparse.Namespace) -> None:
    """Parse raw logs into graphs and vocabularies."""
    inputs = [*(args.input_files or []), *args.inputs]
    config = resolve_config(
        args,
        {
            "ingest.format": args.format,
            "ingest.inputs": [str(p) for p in inputs] or None,
            "ingest.labels": args.labels,
            "ingest.node_labels": args.node_labels,
            "paths.graphs": args.out,
        },
    )
    section = config.ingest
    manifest = DatasetManifest(
        format=section.format,  # type: ignore[arg-type]
        paths=[Path(p) for p in section.inputs],
        labels=load_labels(section.labels) if section.labels else {},
        node_labels=load_node_labels(section.node_labels) if section.node_labels else {},
    )
    result = ingest(manifest, jobs=config.jobs, serial=config.serial)
    out = write_dataset(result, config.paths.graphs)
    attacks = sum(1 for label in result.labels.values() if label == "attack")
    print(
        f"Ingested {len(result.graphs)} graph(s), {result.total_events} event(s) "
        f"({attacks} attack graph(s)) into {out}"
    )


def cmd_snapshot(args: argparse.Namespace) -> None:
    """Slice graphs into compressed snapshots and write the compression table."""
    config = resolve_config(
        args,
        {
            "snapshot.n": args.n,
            "snapshot.binary": True if args.binary else None,
            "paths.graphs": args.data,
            "paths.snapshots": args.out,
        },
    )
    result = read_dataset(config.paths.graphs)
    ds = snapshot_dataset(result, config.snapshot.n, jobs=config.jobs, serial=config.serial)
    out = save_snapshot_dataset(ds, config.paths.snapshots, binary=config.snapshot.binary)
    report = compression_report(ds.graphs)
    report_path = Path(args.report) if args.report else out / "compression.csv"
    report.write_csv(report_path)
    total = report.total
    print(
        f"Wrote {config.snapshot.n} snapshot(s) for each of {len(ds.graphs)} graph(s) to {out}"
    )
    print(
        f"Edges before/after compression: {total.before_edges} -> {total.after_edges} "
        f"({total.reduction_pct:.2f}% reduction), table in {report_path}"
    )


def cmd_train(args: argparse.Namespace) -> None:
    """Train the autoencoder on the benign training split."""
    config = resolve_config(
        args,
        {"model.epochs": args.epochs, "paths.snapshots": args.data, "paths.model": args.out},
    )
    ds = load_snapshot_dataset(config.paths.snapshots)
    split = dataset_split(config, ds)
    model = model_for(config, ds)
    benign = {gid: ds.graphs[gid] for gid in split.train}
    result = train(model, benign, ds.labels)
    Path(config.paths.model).parent.mkdir(parents=True, exist_ok=True)
    model.save(config.paths.model)
    if args.loss_trace:
        result.write_trace(args.loss_trace)
    final = f", final loss {result.loss_trace[-1]:.6f}" if result.loss_trace else ""
    print(
        f"Trained on {len(benign)} benign graph(s) for {len(result.loss_trace)} epoch(s)"
        f"{final}; checkpoint {config.paths.model}"
    )


def cmd_eval(args: argparse.Namespace) -> None:
    """Build the benign index, choose the threshold and report test metrics."""
    config = resolve_config(
        args,
        {
            "detect.k": args.k,
            "detect.level": args.level,
            "paths.model": args.model,
            "paths.report": args.report,
        },
    )
    model = Autoencoder.load(config.paths.model)
    if args.index_from or args.test:
        if not (args.index_from and args.test):
            raise ManifestError("--index-from and --test must be given together")
        index_ds = load_snapshot_dataset(args.index_from)
        index_graphs = {
            gid: snaps for gid, snaps in index_ds.graphs.items()
            if index_ds.labels.get(gid, "benign") == "benign"
        }
        test_ds = load_snapshot_dataset(args.test)
        holdout = split_dataset(
            list(test_ds.graphs),
            test_ds.labels,
            0.0,
            config.detect.val_fraction,
            derive_seed(config.seed, "split"),
        )
        validation = test_ds.subset(holdout.validation)
        test = test_ds.subset(holdout.test)
    else:
        ds = load_snapshot_dataset(args.data or config.paths.snapshots)
        split = dataset_split(config, ds)
        index_graphs = {gid: ds.graphs[gid] for gid in split.train}
        validation = ds.subset(split.validation)
        test = ds.subset(split.test)

    run = detect(
        model,
        index_graphs,
        validation,
        test,
        config.detect.k,
        config.detect.level,
        1 if config.serial else config.jobs,
    )
    Path(config.paths.report).parent.mkdir(parents=True, exist_ok=True)
    save_report(run.report, config.paths.report)
    print(run.report.summary())
    print(f"Report written to {config.paths.report}")


def cmd_fed_train(args: argparse.Namespace) -> None:
    """Train across simulated clients with secret-shared aggregation."""
    config = resolve_config(
        args,
        {
            "federation.n_clients": args.clients,
            "federation.threshold": args.threshold,
            "federation.rounds": args.rounds,
            "federation.local_epochs": args.local_epochs,
            "paths.snapshots": args.data,
            "paths.model": args.out,
        },
    )
    ds = load_snapshot_dataset(config.paths.snapshots)
    split = dataset_split(config, ds)
    n = config.federation.n_clients
    if len(split.train) < n:
        raise ManifestError(f"{len(split.train)} training graph(s) cannot feed {n} clients")
    shards = [
        {gid: ds.graphs[gid] for gid in split.train[i::n]} for i in range(n)
    ]
    initial = model_for(config, ds)
    result = run_federation(
        config.federation,
        shards,
        initial.config,
        seed=derive_seed(config.seed, "federation"),
        jobs=config.jobs,
        serial=config.serial,
        initial=initial,
    )
    Path(config.paths.model).parent.mkdir(parents=True, exist_ok=True)
    result.model.save(config.paths.model)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            for envelope in result.messages:
                f.write(envelope.to_json() + "\n")
    if args.metrics:
        write_round_metrics(result.rounds, args.metrics)
    for metrics in result.rounds:
        losses = ", ".join(f"{cid}: {loss:.6f}" for cid, loss in metrics.client_losses.items())
        print(
            f"Round {metrics.round}: losses [{losses}], "
            f"wall {metrics.wall_seconds:.2f}s, parallel speedup {metrics.speedup:.2f}x"
        )
    print(f"Federated model written to {config.paths.model}")


def _detection_row(path: str, stored: AnomalyReport) -> dict[str, Any]:
    recomputed = stored.recompute()
    return {
        "report": path,
        "level": stored.level,
        "items": stored.count,
        "precision": recomputed.precision,
        "recall": recomputed.recall,
        "f1": recomputed.f1,
        "auc": recomputed.auc,
        "fp": recomputed.fp,
        "fp_rate": recomputed.fp_rate,
        "mismatches": stored.mismatches(recomputed),
    }


def cmd_report(args: argparse.Namespace) -> None:
    """Recompute dataset and detection tables from stored artifacts."""
    output: dict[str, Any] = {}
    if args.compression:
        table = CompressionReport.read_csv(args.compression)
        total = table.total
        stored = table.stored_total
        mismatch = stored is not None and (
            (stored.before_edges, stored.after_edges) != (total.before_edges, total.after_edges)
        )
        output["compression"] = {
            "graphs": len(table.rows),
            "before_edges": total.before_edges,
            "after_edges": total.after_edges,
            "reduction_pct": round(total.reduction_pct, 2),
            "mismatches": ["total"] if mismatch else [],
        }
        print(f"{'Graphs':>8} {'Before':>12} {'After':>12} {'Reduction':>10}")
        flag = "  MISMATCH" if mismatch else ""
        print(
            f"{len(table.rows):>8} {total.before_edges:>12} {total.after_edges:>12} "
            f"{total.reduction_pct:>9.2f}%{flag}"
        )
    if args.eval:
        rows = [_detection_row(path, load_report(path)) for path in args.eval]
        output["detection"] = rows
        print(
            f"{'Report':<30} {'Precision':>9} {'Recall':>7} {'F1':>7} {'AUC':>7} {'FP':>5}"
        )
        for row in rows:
            flag = f"  MISMATCH({','.join(row['mismatches'])})" if row["mismatches"] else ""
            print(
                f"{Path(row['report']).name:<30} {row['precision']:>9.4f} "
                f"{row['recall']:>7.4f} {row['f1']:>7.4f} {row['auc']:>7.4f} "
                f"{row['fp']:>5}{flag}"
            )
    if not output:
        raise ManifestError("report needs --compression and/or --eval")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(output, f, indent=2, sort_keys=True)
            f.write("\n")


def cmd_synth(args: argparse.Namespace) -> None:
    """Write a seeded toy dataset in the canonical format."""
    config = resolve_config(args)
    dataset = write_synthetic_dataset(
        args.out,
        n_benign=args.benign,
        n_attack=args.attack,
        seed=derive_seed(config.seed, "synth"),
        node_level=args.node_level,
    )
    print(f"Wrote {len(dataset.paths)} graph(s) to {args.out}")


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = ArgumentParser(
        prog="continuum",
        description="Provenance-graph intrusion detection with spatial-temporal autoencoders",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  continuum synth --out toy                                  # Write a toy dataset
  continuum ingest --format canonical --labels toy/labels.json --out graphs --input toy/*.tsv
  continuum snapshot --in graphs --n 3 --out snaps           # Slice and compress
  continuum train --data snaps --out model.ckpt              # Train on benign graphs
  continuum eval --model model.ckpt --data snaps --report report.json
  continuum fed-train --data snaps --clients 3 --threshold 2 --out fed.ckpt
  continuum report --compression snaps/compression.csv --eval report.json
        """,
    )
    parser.add_argument("--version", action="version", version=f"continuum {__version__}")
    parser.add_argument("--config", "-c", help="TOML or JSON configuration file")
    parser.add_argument("--seed", type=int, help="Global seed (default: 0)")
    parser.add_argument("--jobs", "-j", type=int, help="Parallel workers (default: 1)")
    parser.add_argument(
        "--serial", action="store_true", help="Run every stage single-threaded"
    )
    parser.add_argument(
        "--verbose", "-v", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Ingest command
    ingest_parser = subparsers.add_parser("ingest", help="Parse provenance logs")
    ingest_parser.add_argument("inputs", nargs="*", help="Input log files")
    ingest_parser.add_argument(
        "--input",
        nargs="+",
        action="extend",
        dest="input_files",
        metavar="PATH",
        help="Input log file(s), same as the positional form",
    )
    ingest_parser.add_argument("--format", choices=["streamspot", "canonical"])
    ingest_parser.add_argument("--labels", help="Graph labels JSON file")
    ingest_parser.add_argument("--node-labels", help="Malicious node ids JSON file")
    ingest_parser.add_argument("--out", help="Output dataset directory")
    ingest_parser.set_defaults(func=cmd_ingest)

    # Snapshot command
    snapshot_parser = subparsers.add_parser(
        "snapshot", help="Build compressed temporal snapshots"
    )
    snapshot_parser.add_argument("--in", "--data", dest="data", help="Ingested dataset directory")
    snapshot_parser.add_argument("--n", type=int, help="Snapshots per graph")
    snapshot_parser.add_argument("--out", help="Output snapshot directory")
    snapshot_parser.add_argument("--report", help="Compression CSV path")
    snapshot_parser.add_argument(
        "--binary", action="store_true", help="Also write protobuf (.pb) snapshots"
    )
    snapshot_parser.set_defaults(func=cmd_snapshot)

    # Train command
    train_parser = subparsers.add_parser("train", help="Train the autoencoder")
    train_parser.add_argument("--data", help="Snapshot directory")
    train_parser.add_argument("--out", help="Checkpoint path")
    train_parser.add_argument("--epochs", type=int, help="Training epochs")
    train_parser.add_argument("--loss-trace", help="Per-epoch loss CSV path")
    train_parser.set_defaults(func=cmd_train)

    # Eval command
    eval_parser = subparsers.add_parser("eval", help="Score graphs or nodes")
    eval_parser.add_argument("--model", help="Checkpoint path")
    eval_parser.add_argument("--data", help="Snapshot directory to split")
    eval_parser.add_argument("--index-from", help="Snapshot directory of benign index graphs")
    eval_parser.add_argument("--test", help="Snapshot directory of held-out graphs")
    eval_parser.add_argument("--level", choices=["graph", NODE_LEVEL])
    eval_parser.add_argument("--k", type=int, help="Neighbors per query")
    eval_parser.add_argument("--report", help="Report JSON path")
    eval_parser.set_defaults(func=cmd_eval)

    # Federated training command
    fed_parser = subparsers.add_parser("fed-train", help="Federated training")
    fed_parser.add_argument("--data", help="Snapshot directory")
    fed_parser.add_argument("--clients", type=int, help="Number of clients")
    fed_parser.add_argument("--threshold", type=int, help="Decryption threshold t")
    fed_parser.add_argument("--rounds", type=int, help="Federation rounds")
    fed_parser.add_argument("--local-epochs", type=int, help="Client epochs per round")
    fed_parser.add_argument("--out", help="Checkpoint path")
    fed_parser.add_argument("--log", help="Message log (JSON lines) path")
    fed_parser.add_argument("--metrics", help="Per-round metrics JSON path")
    fed_parser.set_defaults(func=cmd_fed_train)

    # Report command
    report_parser = subparsers.add_parser(
        "report", help="Recompute result tables from stored artifacts"
    )
    report_parser.add_argument("--compression", help="Compression CSV")
    report_parser.add_argument("--eval", nargs="+", help="Evaluation report JSON file(s)")
    report_parser.add_argument("--out", help="Output JSON path")
    report_parser.set_defaults(func=cmd_report)

    # Synth command
    synth_parser = subparsers.add_parser("synth", help="Write a synthetic dataset")
    synth_parser.add_argument("--out", required=True, help="Output directory")
    synth_parser.add_argument("--benign", type=int, default=20, help="Benign graphs")
    synth_parser.add_argument("--attack", type=int, default=6, help="Attack graphs")
    synth_parser.add_argument(
        "--node-level", action="store_true", help="Inject labeled noise nodes instead"
    )
    synth_parser.set_defaults(func=cmd_synth)

    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> None:
    """Main CLI entry point.

    Args:
        argv: Command line arguments (uses sys.argv if None).
    """
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return

    configure_logging(args.verbose)
    try:
        args.func(args)
    except (ContinuumError, OSError) as e:
        handle_error(e)


if __name__ == "__main__":
    main()
