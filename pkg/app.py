"""
fedsim - federated learning simulator for variance-reduced adaptive server optimisation.
Command-line entry point: simulate, sweep, bound, partition-report, memory, runs.
"""
import os
import sys

# Run-from-anywhere: ensure app directory is on path so `services` and `config` import
_APP_DIR = os.path.dirname(os.path.abspath(__file__))
if _APP_DIR not in sys.path:
    sys.path.insert(0, _APP_DIR)

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from config import (
    DEFAULT_SEED, DIVERGENCE_LIMIT, LOG_LEVEL, OUT_DIR, SWEEP_REFERENCE, SWEEP_THRESHOLDS, WORKERS,
)
from db import finish_run, init_db, insert_run, list_runs, record_round_metrics
from services.bound import BoundParams, theorem_bound
from services.datagen import label_histogram, partition_dataset
from services.errors import BoundError, FedSimError, MetricsIOError
from services.harness import (
    MEMORY_CLIENTS_THOUSANDS, MEMORY_PARAMS_MILLIONS, RoundMetrics, SimulationRun,
    build_data, communication_report, memory_table, save_checkpoint, simulate, tail_average,
)
from services.metrics_io import build_summary, emit_metrics, write_summary
from services.quant import QuantMode
from services.simconfig import SimConfig, load_config
from services.snapshot import save_snapshot

logger = logging.getLogger("fedsim")


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ---------- Single run ----------
def run_and_record(cfg: SimConfig, out_dir: Path, workers: int, fmt: str = "csv",
                   db_path: Optional[str] = None) -> SimulationRun:
    """Simulate one config, write metrics/summary/checkpoint under out_dir, record it in the registry."""
    strategy = cfg.strategy
    run_id = insert_run(cfg.name, strategy.kind, strategy.mode, cfg.seed, out_dir, db_path=db_path)
    try:
        run = simulate(cfg, workers=workers, divergence_limit=DIVERGENCE_LIMIT)
        out_dir.mkdir(parents=True, exist_ok=True)
        emit_metrics(run.metrics, out_dir / f"metrics.{fmt}", fmt)
        summary = build_summary(cfg, run.metrics, run.wall_time, extra={
            "dropped": run.partition.dropped,
            "dirichlet_redraws": run.partition.redraws,
        })
        write_summary(summary, out_dir / "summary.json")
        save_checkpoint(run, out_dir / "checkpoint.joblib")
        if cfg.snapshot and run.table is not None:
            save_snapshot(run.table, out_dir / "state_table.bin", len(run.metrics), strategy.kind, strategy.weighting)
        record_round_metrics(run_id, run.metrics, db_path=db_path)
    # MetricsIOError is also an OSError, so FedSimError goes first
    except FedSimError as exc:
        finish_run(run_id, "failed", error=str(exc), db_path=db_path)
        raise
    except OSError as exc:
        err = MetricsIOError(f"cannot write run outputs ({exc.strerror or exc})", out_dir)
        finish_run(run_id, "failed", error=str(err), db_path=db_path)
        raise err from exc
    finish_run(run_id, "finished", tail_accuracy=summary["tail_average"],
               final_train_loss=summary["final_train_loss"], wall_time=run.wall_time, db_path=db_path)
    logger.info("Run %s -> %s (tail accuracy %.4f)", cfg.name, out_dir, summary["tail_average"])
    return run


# ---------- Commands ----------
def cmd_simulate(args) -> int:
    cfg = load_config(args.config, default_seed=DEFAULT_SEED).with_overrides(seed=args.seed)
    out_dir = Path(args.out) if args.out else Path(OUT_DIR) / cfg.name
    init_db(args.db)
    run = run_and_record(cfg, out_dir, args.workers or WORKERS, args.format, args.db)
    last = run.metrics[-1]
    print(f"{cfg.name}: {cfg.T} rounds, final train_loss={last.train_loss:.6g}, "
          f"tail accuracy={tail_average(run.metrics, cfg.eval.tail_fraction):.4f}, out={out_dir}")
    return 0


def _pick_reference(runs: Dict[str, List[RoundMetrics]]) -> str:
    for name, metrics in runs.items():
        if metrics and metrics[0].strategy == SWEEP_REFERENCE:
            return name
    return next(iter(runs))


def cmd_sweep(args) -> int:
    config_dir = Path(args.configs)
    paths = sorted(config_dir.glob("*.json"))
    if not paths:
        raise FedSimError(f"no *.json configs in {config_dir}")
    out_root = Path(args.out) if args.out else Path(OUT_DIR)
    init_db(args.db)
    results: Dict[str, List[RoundMetrics]] = {}
    members = []
    for path in paths:
        try:
            cfg = load_config(path, default_seed=DEFAULT_SEED)
            run = run_and_record(cfg, out_root / cfg.name, args.workers or WORKERS, "csv", args.db)
        except FedSimError:
            logger.exception("Sweep member %s failed", path.name)
            members.append({"config": path.name, "status": "failed"})
            continue
        results[cfg.name] = run.metrics
        members.append({
            "config": path.name,
            "name": cfg.name,
            "strategy": cfg.strategy.kind,
            "mode": cfg.strategy.mode,
            "status": "finished",
            "tail_average": tail_average(run.metrics, cfg.eval.tail_fraction),
            "wall_time_sec": run.wall_time,
        })
    sweep = {"runs": members}
    if results:
        reference = _pick_reference(results)
        sweep["reference"] = reference
        sweep["thresholds"] = SWEEP_THRESHOLDS
        sweep["communication"] = communication_report(results, SWEEP_THRESHOLDS, reference)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MetricsIOError(f"cannot create sweep output root ({exc.strerror or exc})", out_root) from exc
    write_summary(sweep, out_root / "sweep_summary.json")
    failed = sum(1 for m in members if m["status"] == "failed")
    print(f"sweep: {len(members) - failed} finished, {failed} failed -> {out_root / 'sweep_summary.json'}")
    return 0 if results else 2


def cmd_bound(args) -> int:
    try:
        with open(args.params, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise BoundError(f"cannot read bound parameters {args.params}: {exc}") from exc
    result = theorem_bound(BoundParams.from_mapping(raw))
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def cmd_partition_report(args) -> int:
    cfg = load_config(args.config, default_seed=DEFAULT_SEED)
    train, _ = build_data(cfg)
    d = cfg.data
    part = partition_dataset(train, d.partitioner, cfg.N, cfg.seed, beta=d.beta, min_size=d.min_size,
                             chunks=d.chunks)
    print(f"partitioner={d.partitioner} N={cfg.N} rows={train.size} dropped={part.dropped} redraws={part.redraws}")
    print(f"{'client':<8} {'size':<6} histogram")
    for client in range(part.num_clients):
        hist = label_histogram(train, part, client)
        print(f"{client:<8} {int(hist.sum()):<6} {' '.join(str(int(h)) for h in hist)}")
    return 0


def cmd_memory(args) -> int:
    rows = memory_table(args.params_millions, args.clients_thousands)
    modes = [m.value for m in QuantMode]
    print(f"{'params(M)':<10} {'clients':<9} " + " ".join(f"{m + ' GiB':<12}" for m in modes))
    print("-" * 72)
    for row in rows:
        cells = " ".join(f"{row[m + '_gib']:<12.3f}" for m in modes)
        print(f"{row['params_millions']:<10} {row['clients']:<9} {cells}")
    return 0


def cmd_runs(args) -> int:
    init_db(args.db)
    rows = list_runs(args.limit, db_path=args.db)
    if not rows:
        print("no runs recorded")
        return 0
    print(f"{'id':<5} {'name':<24} {'strategy':<16} {'mode':<6} {'status':<9} {'tail_acc':<9} created_at")
    for r in rows:
        tail = "" if r["tail_accuracy"] is None else f"{r['tail_accuracy']:.4f}"
        print(f"{r['id']:<5} {r['name']:<24} {r['strategy']:<16} {r['quant_mode']:<6} {r['status']:<9} "
              f"{tail:<9} {r['created_at']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    parser.add_argument("--db", default=None, help="Run registry path (default: FEDSIM_DB_PATH).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run one experiment config.")
    p.add_argument("--config", required=True, help="Path to a JSON experiment config.")
    p.add_argument("--out", default=None, help="Output directory (default: FEDSIM_OUT_DIR/<name>).")
    p.add_argument("--seed", type=int, default=None, help="Override the config's master seed.")
    p.add_argument("--workers", type=int, default=None, help="Client fan-out workers (default: FEDSIM_WORKERS).")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="Metrics file format.")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="Run every *.json config in a directory.")
    p.add_argument("--configs", required=True, help="Directory of JSON experiment configs.")
    p.add_argument("--out", default=None, help="Output root (default: FEDSIM_OUT_DIR).")
    p.add_argument("--workers", type=int, default=None, help="Client fan-out workers per run.")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bound", help="Evaluate the convergence bound for a JSON parameter file.")
    p.add_argument("--params", required=True, help="JSON file with eta_c, eta_s, K, M, L, G, epsilon, ...")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("partition-report", help="Per-client label histograms for a config's partition.")
    p.add_argument("--config", required=True, help="Path to a JSON experiment config.")
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("memory", help="Server state-table memory estimates per quantization mode.")
    p.add_argument("--params-millions", type=float, nargs="+", default=list(MEMORY_PARAMS_MILLIONS))
    p.add_argument("--clients-thousands", type=float, nargs="+", default=list(MEMORY_CLIENTS_THOUSANDS))
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("runs", help="List recorded runs.")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        logger.error("--workers must be >= 1")
        return 2
    try:
        return args.func(args)
    except FedSimError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
