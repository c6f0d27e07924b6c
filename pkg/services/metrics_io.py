"""
Metrics and run-summary files: per-round CSV (or JSON records) and a JSON summary per run.
Floats are written with repr so a reload gives back the exact values.
"""
import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from services.errors import MetricsIOError
from services.harness import RoundMetrics, tail_average
from services.simconfig import SimConfig, config_to_dict

logger = logging.getLogger(__name__)

CSV_HEADER = [
    "round", "strategy", "train_loss", "eval_loss", "eval_accuracy",
    "grad_norm_sq", "r_norm", "table_bytes", "participants",
]
FORMATS = ("csv", "json")


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _row(m: RoundMetrics) -> List[str]:
    return [
        str(m.round),
        m.strategy,
        _cell(m.train_loss),
        _cell(m.eval_loss),
        _cell(m.eval_accuracy),
        _cell(m.grad_norm_sq),
        _cell(m.r_norm),
        str(int(m.table_bytes)),
        ";".join(str(p) for p in m.participants),
    ]


def emit_metrics(metrics: Sequence[RoundMetrics], path, fmt: str = "csv") -> Path:
    if fmt not in FORMATS:
        raise ValueError(f"unknown metrics format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_HEADER)
                for m in metrics:
                    writer.writerow(_row(m))
            else:
                json.dump([asdict(m) for m in metrics], fh, indent=2)
    except OSError as exc:
        raise MetricsIOError(f"cannot write metrics ({exc.strerror})", path) from exc
    logger.info("Wrote %d rounds of metrics to %s", len(metrics), path)
    return path


def _opt_float(cell: str) -> Optional[float]:
    return None if cell == "" else float(cell)


def read_metrics_csv(path) -> List[RoundMetrics]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise MetricsIOError(f"cannot read metrics ({exc.strerror})", path) from exc
    if header != CSV_HEADER:
        raise MetricsIOError(f"unexpected metrics header {header}", path)
    out = []
    try:
        for row in rows:
            eval_loss = _opt_float(row[3])
            out.append(RoundMetrics(
                round=int(row[0]),
                strategy=row[1],
                train_loss=float(row[2]),
                eval_loss=eval_loss,
                eval_accuracy=_opt_float(row[4]),
                grad_norm_sq=_opt_float(row[5]),
                r_norm=float(row[6]),
                table_bytes=int(row[7]),
                participants=[int(p) for p in row[8].split(";") if p],
                evaluated=eval_loss is not None,
            ))
    except (ValueError, IndexError) as exc:
        raise MetricsIOError(f"malformed metrics row ({exc})", path) from exc
    return out


def build_summary(cfg: SimConfig, metrics: Sequence[RoundMetrics], wall_time: float,
                  extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    last = metrics[-1] if metrics else None
    summary: Dict[str, Any] = {
        "name": cfg.name,
        "config": config_to_dict(cfg),
        "rounds": len(metrics),
        "tail_fraction": cfg.eval.tail_fraction,
        "tail_average": tail_average(metrics, cfg.eval.tail_fraction) if metrics else None,
        "final_train_loss": last.train_loss if last else None,
        "final_eval_accuracy": last.eval_accuracy if last else None,
        "wall_time_sec": wall_time,
    }
    if extra:
        summary.update(extra)
    return summary


def write_summary(summary: Dict[str, Any], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise MetricsIOError(f"cannot write summary ({exc.strerror})", path) from exc
    return path


def load_summary(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MetricsIOError(f"cannot read summary ({exc})", path) from exc
