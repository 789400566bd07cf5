"""Command-line front end.

Four subcommands: `simulate` sweeps algorithms and seeds over one
experiment config and writes paired traces; `serve` and `client` are the
two halves of the TCP mode; `report` rebuilds the metric table from a
sweep directory's summaries.

Every run directory gets a trace.csv plus summary.json, and each sweep a
metrics.csv/metrics.json pair. Sweeps are paired by construction: the
partition plan, initial parameters, and per-client seeds depend only on
the experiment seed, never on the algorithm.

The only environment variable honored is FEDVAL_LOG, which sets the log
level (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from .data import Dataset, load_idx, synthetic_blobs
from .metrics import MetricRow, emit, summarize
from .sim import (
    ALGORITHMS,
    ExperimentConfig,
    RunResult,
    default_dataset_size,
    preset,
    run_experiment,
)
from .wire import client_main, load_bundle, make_bundles, save_bundle, serve

log = logging.getLogger(__name__)

PRESET_NAMES = ("a", "b", "c", "d")


@dataclasses.dataclass
class CliConfig:
    """Validated command line; one field per flag that survives parsing."""

    subcommand: str
    preset_name: Optional[str] = None
    config_path: Optional[str] = None
    algorithms: tuple[str, ...] = ()
    seeds: tuple[int, ...] = ()
    out: Optional[str] = None
    target_acc: Optional[float] = None
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    synthetic: bool = False
    force: bool = False
    bind: Optional[str] = None
    server: Optional[str] = None
    client_id: Optional[int] = None
    partition_file: Optional[str] = None
    run_dir: Optional[str] = None


def _add_experiment_flags(sub: argparse.ArgumentParser, *, sweep: bool) -> None:
    sub.add_argument("--preset", choices=PRESET_NAMES, help="stock experiment a-d")
    sub.add_argument("--config", metavar="JSON", help="explicit experiment config file")
    sub.add_argument(
        "--algorithm",
        action="append",
        choices=ALGORITHMS,
        default=None,
        help="algorithm to run" + ("; repeat to sweep" if sweep else ""),
    )
    sub.add_argument("--target-acc", type=float, default=None, metavar="F")
    sub.add_argument("--synthetic", action="store_true", help="seeded blob data")
    sub.add_argument("--mnist-images", metavar="IDX", help="IDX image file (.gz ok)")
    sub.add_argument("--mnist-labels", metavar="IDX", help="IDX label file (.gz ok)")
    sub.add_argument("--out", metavar="DIR", help="output directory")
    sub.add_argument("--force", action="store_true", help="write into a non-empty --out")


def _validate_experiment_flags(parser, args, *, need_out: bool) -> None:
    if (args.preset is None) == (args.config is None):
        parser.error("choose exactly one of --preset or --config")
    have_mnist = args.mnist_images is not None or args.mnist_labels is not None
    if args.synthetic and have_mnist:
        parser.error("choose one data source: --synthetic or the MNIST paths")
    if have_mnist and (args.mnist_images is None or args.mnist_labels is None):
        parser.error("--mnist-images and --mnist-labels go together")
    if not args.synthetic and not have_mnist:
        parser.error("a data source is required: --synthetic or --mnist-images/--mnist-labels")
    if need_out and args.out is None:
        parser.error("--out is required")


def parse_args(argv) -> CliConfig:
    parser = argparse.ArgumentParser(
        prog="fedval",
        description="Asynchronous federated learning lab: simulator, TCP mode, reports.",
    )
    subs = parser.add_subparsers(dest="subcommand")

    sim = subs.add_parser("simulate", help="run experiments in the simulator")
    _add_experiment_flags(sim, sweep=True)
    sim.add_argument(
        "--seed", action="append", type=int, default=None, help="seed; repeat to sweep"
    )

    srv = subs.add_parser("serve", help="coordinate a run over TCP")
    srv.add_argument("--bind", required=True, metavar="HOST:PORT")
    _add_experiment_flags(srv, sweep=False)
    srv.add_argument("--seed", action="append", type=int, default=None)

    cli = subs.add_parser("client", help="join a TCP run")
    cli.add_argument("--server", required=True, metavar="HOST:PORT")
    cli.add_argument("--client-id", type=int, default=None)
    cli.add_argument("--partition-file", required=True, metavar="NPZ")

    rep = subs.add_parser("report", help="tabulate metrics from a sweep directory")
    rep.add_argument("run_dir", metavar="DIR")

    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.error("a subcommand is required")

    if args.subcommand in ("simulate", "serve"):
        _validate_experiment_flags(parser, args, need_out=True)
        seeds = tuple(args.seed) if args.seed else ()
        algorithms = tuple(args.algorithm) if args.algorithm else ()
        if args.subcommand == "serve":
            if len(seeds) > 1:
                parser.error("serve runs one seed at a time")
            if len(algorithms) > 1:
                parser.error("serve runs one algorithm at a time")
        return CliConfig(
            subcommand=args.subcommand,
            preset_name=args.preset,
            config_path=args.config,
            algorithms=algorithms,
            seeds=seeds,
            out=args.out,
            target_acc=args.target_acc,
            mnist_images=args.mnist_images,
            mnist_labels=args.mnist_labels,
            synthetic=args.synthetic,
            force=args.force,
            bind=getattr(args, "bind", None),
        )
    if args.subcommand == "client":
        return CliConfig(
            subcommand="client",
            server=args.server,
            client_id=args.client_id,
            partition_file=args.partition_file,
        )
    return CliConfig(subcommand="report", run_dir=args.run_dir)


def _load_experiment(c: CliConfig) -> ExperimentConfig:
    if c.preset_name is not None:
        cfg = preset(c.preset_name)
    else:
        cfg = ExperimentConfig.from_json(Path(c.config_path).read_text())
    if c.target_acc is not None:
        cfg = dataclasses.replace(cfg, target_acc=c.target_acc)
    return cfg


def _build_dataset(c: CliConfig, cfg: ExperimentConfig) -> Dataset:
    if c.synthetic:
        return synthetic_blobs(default_dataset_size(cfg), seed=cfg.seed)
    return load_idx(c.mnist_images, c.mnist_labels)


def _prepare_out(c: CliConfig) -> Path:
    out = Path(c.out)
    if out.exists() and any(out.iterdir()) and not c.force:
        raise RuntimeError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, result: RunResult) -> dict:
    cfg = result.config
    run_dir = out / f"{cfg.experiment}_{cfg.algorithm}_seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "trace.csv").write_text(result.to_csv_text())
    summary = result.summary()
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    return summary


def _row_from_summary(summary: dict) -> MetricRow:
    return MetricRow(
        experiment=summary["experiment"],
        algorithm=summary["algorithm"],
        communication_times=summary["comms_to_target"],
        ccr=summary["ccr"],
        final_acc=summary["final_acc"],
        seed=summary["seed"],
    )


def _emit_tables(out: Path, rows: list[MetricRow]) -> dict:
    rows = sorted(rows, key=lambda r: (r.experiment, r.algorithm, r.seed))
    emit(rows, out / "metrics.csv", "csv")
    emit(rows, out / "metrics.json", "json")
    return summarize(rows)


def _cmd_simulate(c: CliConfig) -> int:
    base = _load_experiment(c)
    out = _prepare_out(c)
    algorithms = c.algorithms or (base.algorithm,)
    seeds = c.seeds or (base.seed,)
    rows = []
    for seed in seeds:
        seeded = dataclasses.replace(base, seed=seed)
        dataset = _build_dataset(c, seeded)
        for algorithm in algorithms:
            cfg = dataclasses.replace(seeded, algorithm=algorithm)
            log.info("running %s/%s seed %d", cfg.experiment, algorithm, seed)
            result = run_experiment(cfg, dataset)
            summary = _write_run(out, result)
            rows.append(_row_from_summary(summary))
            if result.diverged:
                log.warning("%s", result.diagnostic)
    overall = _emit_tables(out, rows)
    print(json.dumps(overall, indent=2, sort_keys=True))
    return 0


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise RuntimeError(f"address {text!r} is not HOST:PORT")
    return host, int(port)


def _cmd_serve(c: CliConfig, _announce=None) -> int:
    base = _load_experiment(c)
    if c.algorithms:
        base = dataclasses.replace(base, algorithm=c.algorithms[0])
    if c.seeds:
        base = dataclasses.replace(base, seed=c.seeds[0])
    out = _prepare_out(c)
    dataset = _build_dataset(c, base)
    eval_set, bundles, plan_digest = make_bundles(base, dataset)

    bundle_dir = out / "bundles"
    bundle_dir.mkdir(parents=True, exist_ok=True)
    for cid, bundle in bundles.items():
        save_bundle(str(bundle_dir / f"client{cid}.npz"), bundle)
    log.info("wrote %d client bundles under %s", len(bundles), bundle_dir)

    def on_bound(addr):
        # port 0 in --bind picks a free port; tell the operator which one
        print(json.dumps({"bound": f"{addr[0]}:{addr[1]}"}), flush=True)
        if _announce is not None:
            _announce(addr)

    result = serve(
        _parse_addr(c.bind),
        base,
        eval_set,
        on_bound=on_bound,
        plan_digest=plan_digest,
    )
    summary = _write_run(out, result)
    overall = _emit_tables(out, [_row_from_summary(summary)])
    print(json.dumps(overall, indent=2, sort_keys=True))
    return 0


def _cmd_client(c: CliConfig) -> int:
    bundle = load_bundle(c.partition_file)
    if c.client_id is not None and c.client_id != bundle.client_id:
        print(
            f"error: --client-id {c.client_id} but the bundle belongs to "
            f"client {bundle.client_id}",
            file=sys.stderr,
        )
        return 2
    return client_main(_parse_addr(c.server), bundle)


def _cmd_report(c: CliConfig) -> int:
    root = Path(c.run_dir)
    summaries = sorted(root.rglob("summary.json"))
    if not summaries:
        raise RuntimeError(f"no run summaries under {root}")
    rows = []
    for path in summaries:
        rows.append(_row_from_summary(json.loads(path.read_text())))
    overall = _emit_tables(root, rows)
    print(json.dumps(overall, indent=2, sort_keys=True))
    return 0


def run(c: CliConfig) -> int:
    handler = {
        "simulate": _cmd_simulate,
        "serve": _cmd_serve,
        "client": _cmd_client,
        "report": _cmd_report,
    }[c.subcommand]
    return handler(c)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDVAL_LOG", "WARNING"))
    c = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return run(c)
    except Exception as exc:  # argparse exits on its own; this is runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
