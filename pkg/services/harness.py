"""
Experiment orchestration: client sampling, the round loop, evaluation and run statistics.

Every random draw comes from a stream keyed by (seed, purpose, round, client), so a run is
bit-identical whatever the worker count. Client updates fan out through joblib; aggregation
and metrics stay sequential.
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import joblib
import numpy as np
from joblib import Parallel, delayed

from services.aggregator import RoundOutcome, StateTable, server_round, table_bytes
from services.client import LocalUpdate, local_train
from services.datagen import (
    LabeledDataset,
    Partition,
    client_batches,
    load_csv_dataset,
    make_blobs,
    partition_dataset,
)
from services.errors import DatasetError, SamplingError, SimulationDivergedError
from services.models import Batch, ModelSpec, init_params, loss_and_grad, model_layout, predict_accuracy
from services.numvec import ParamVector, TensorLayout, flat_layout
from services.quant import QuantMode, layout_bytes
from services.rng import TAG_CLIENT, TAG_INIT, TAG_SAMPLE, stream
from services.server_opt import OptimizerState, init_state
from services.simconfig import SimConfig

logger = logging.getLogger(__name__)

GIB = float(1 << 30)
MEMORY_PARAMS_MILLIONS = (1.2, 2.3, 2.5, 11.7)
MEMORY_CLIENTS_THOUSANDS = (1, 10, 100)


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    train_loss: float
    eval_loss: Optional[float]
    eval_accuracy: Optional[float]
    grad_norm_sq: Optional[float]
    r_norm: float
    table_bytes: int
    participants: List[int]
    evaluated: bool = True


@dataclass
class SimulationRun:
    config: SimConfig
    metrics: List[RoundMetrics]
    w: ParamVector
    table: Optional[StateTable]
    opt_state: Optional[OptimizerState]
    partition: Partition
    wall_time: float = 0.0


# ---------- Sampling and evaluation ----------

def sample_clients(N: int, M: int, round_index: int, master_seed: int) -> List[int]:
    """M distinct ids by partial Fisher-Yates on the round's sampling stream, sorted."""
    if N < 1:
        raise SamplingError("N must be >= 1")
    if not 1 <= M <= N:
        raise SamplingError(f"cannot sample M={M} of N={N} clients")
    rng = stream(master_seed, TAG_SAMPLE, round_index)
    ids = np.arange(N)
    for i in range(M):
        j = int(rng.integers(i, N))
        ids[i], ids[j] = ids[j], ids[i]
    return sorted(int(c) for c in ids[:M])


def evaluate(spec: ModelSpec, w: ParamVector, pool: Batch) -> Tuple[float, float, float]:
    """Full-pool loss, accuracy and squared gradient norm."""
    loss, grad = loss_and_grad(spec, w, pool)
    return loss, predict_accuracy(spec, w, pool), float(np.dot(grad, grad))


def tail_average(metrics: Sequence[RoundMetrics], fraction: float) -> float:
    """Mean eval accuracy over the last ceil(fraction * n) evaluated rounds."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    evaluated = [m.eval_accuracy for m in metrics if m.evaluated]
    if not evaluated:
        raise ValueError("no evaluated rounds to average")
    count = max(1, math.ceil(fraction * len(evaluated) - 1e-9))
    return float(np.mean(evaluated[-count:]))


def rounds_to_accuracy(metrics: Sequence[RoundMetrics], threshold: float) -> Optional[int]:
    for m in metrics:
        if m.evaluated and m.eval_accuracy >= threshold:
            return m.round
    return None


def rounds_to_loss(metrics: Sequence[RoundMetrics], target: float) -> Optional[int]:
    for m in metrics:
        if m.train_loss <= target:
            return m.round
    return None


def communication_report(runs: Mapping[str, Sequence[RoundMetrics]], thresholds: Sequence[float],
                         reference: str) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """Rounds to each accuracy threshold per strategy, and the ratio against the reference strategy."""
    if reference not in runs:
        raise ValueError(f"reference strategy {reference!r} not among runs")
    base = {t: rounds_to_accuracy(runs[reference], t) for t in thresholds}
    report: Dict[str, Dict[str, Dict[str, Optional[float]]]] = {}
    for name, metrics in runs.items():
        rows = {}
        for t in thresholds:
            reached = rounds_to_accuracy(metrics, t)
            normalized = reached / base[t] if reached is not None and base[t] else None
            rows[f"{t:g}"] = {"rounds": reached, "normalized": normalized}
        report[name] = rows
    return report


def estimate_table_memory(param_count: int, num_clients: int, mode: QuantMode,
                          layout: Optional[TensorLayout] = None) -> Dict[str, float]:
    """Server state-table size for num_clients slots of the given model size, from byte accounting alone."""
    if param_count < 1 or num_clients < 1:
        raise ValueError("param_count and num_clients must be >= 1")
    layout = layout or flat_layout(param_count)
    if layout.size != param_count:
        raise ValueError(f"layout holds {layout.size} values, expected {param_count}")
    per_client = layout_bytes(layout, QuantMode(mode))
    total = per_client * num_clients
    return {"bytes": total, "per_client_bytes": per_client, "gib": total / GIB}


def memory_table(params_millions: Sequence[float] = MEMORY_PARAMS_MILLIONS,
                 clients_thousands: Sequence[int] = MEMORY_CLIENTS_THOUSANDS) -> List[Dict[str, object]]:
    rows = []
    for millions in params_millions:
        params = int(round(millions * 1_000_000))
        for thousands in clients_thousands:
            clients = int(thousands * 1000)
            row: Dict[str, object] = {"params_millions": millions, "clients": clients}
            for mode in QuantMode:
                row[f"{mode.value}_gib"] = estimate_table_memory(params, clients, mode)["gib"]
            rows.append(row)
    return rows


# ---------- Data ----------

def build_data(cfg: SimConfig) -> Tuple[LabeledDataset, Batch]:
    """Training pool and evaluation pool for a config."""
    data = cfg.data
    if data.source == "blobs":
        train = make_blobs(data.num_classes, data.dim, data.per_class, data.spread, cfg.seed, draw=1)
    else:
        train = load_csv_dataset(data.csv_path, data.num_classes)
        if train.dim != cfg.model.input_dim:
            raise DatasetError(f"{data.csv_path}: {train.dim} features, model expects {cfg.model.input_dim}")
    if cfg.eval.pool == "train":
        return train, train.as_batch()
    if data.source == "blobs":
        holdout = make_blobs(data.num_classes, data.dim, cfg.eval.per_class, data.spread, cfg.seed, draw=2)
    elif data.eval_csv_path:
        holdout = load_csv_dataset(data.eval_csv_path, train.num_classes)
    else:
        holdout = train
    return train, holdout.as_batch()


def client_weights(part: Partition, scheme: str) -> np.ndarray:
    sizes = np.asarray(part.sizes(), dtype=np.float64)
    if scheme == "proportional":
        return sizes / sizes.sum()
    return np.full(part.num_clients, 1.0 / part.num_clients)


# ---------- Round loop ----------

def _train_client(cfg: SimConfig, data: Batch, w: ParamVector, round_index: int, client: int) -> LocalUpdate:
    rng = stream(cfg.seed, TAG_CLIENT, round_index, client)
    return local_train(cfg.model, data, w, cfg.client, rng)


def simulate(cfg: SimConfig, workers: int = 1, divergence_limit: float = math.inf,
             on_round: Optional[Callable[[int, ParamVector], None]] = None) -> SimulationRun:
    """Run cfg.T rounds. on_round, if given, sees (round, w) after each server step and must not mutate w."""
    started = time.perf_counter()
    train, eval_pool = build_data(cfg)
    data = cfg.data
    part = partition_dataset(train, data.partitioner, cfg.N, cfg.seed, beta=data.beta,
                             min_size=data.min_size, chunks=data.chunks)
    batches = client_batches(train, part)
    strategy = cfg.strategy.build()
    weights = client_weights(part, cfg.strategy.client_weights)
    layout = model_layout(cfg.model)

    w = init_params(cfg.model, stream(cfg.seed, TAG_INIT))
    table = StateTable(cfg.N, layout, strategy.mode, weights) if strategy.uses_table else None
    opt_state = init_state(layout.size, strategy.optimizer, cfg.strategy.z0) if strategy.optimizer else None
    logger.info("Run %s: %s, N=%d M=%d T=%d d=%d, %d dropped", cfg.name, strategy.kind, cfg.N, cfg.M, cfg.T,
                layout.size, part.dropped)

    metrics: List[RoundMetrics] = []
    with Parallel(n_jobs=max(1, workers), prefer="threads") as pool:
        for t in range(cfg.T):
            participants = sample_clients(cfg.N, cfg.M, t, cfg.seed)
            updates = pool(delayed(_train_client)(cfg, batches[i], w, t, i) for i in participants)
            received = {i: u.g for i, u in zip(participants, updates)}
            examples = sum(u.num_examples for u in updates)
            train_loss = sum(u.final_loss * u.num_examples for u in updates) / examples

            outcome: RoundOutcome = server_round(strategy, w, received, table, opt_state,
                                                 cfg.client.eta_c, client_weights=weights)
            w, table, opt_state = outcome.w, outcome.table, outcome.opt_state
            if not np.all(np.isfinite(w)):
                raise SimulationDivergedError("global model became non-finite", round=t + 1)

            is_eval = (t + 1) % cfg.eval.every == 0 or t == cfg.T - 1
            eval_loss = eval_acc = grad_sq = None
            if is_eval:
                eval_loss, eval_acc, grad_sq = evaluate(cfg.model, w, eval_pool)
                if not math.isfinite(eval_loss) or eval_loss > divergence_limit:
                    raise SimulationDivergedError(f"eval loss {eval_loss}", round=t + 1)
            metrics.append(RoundMetrics(
                round=t + 1,
                strategy=strategy.kind,
                train_loss=float(train_loss),
                eval_loss=eval_loss,
                eval_accuracy=eval_acc,
                grad_norm_sq=grad_sq,
                r_norm=outcome.r_norm,
                table_bytes=table_bytes(table),
                participants=list(participants),
                evaluated=is_eval,
            ))
            logger.debug("round %d: train_loss=%.6g eval_loss=%s r_norm=%.6g", t + 1, train_loss, eval_loss,
                         outcome.r_norm)
            if on_round is not None:
                on_round(t + 1, w)

    wall = time.perf_counter() - started
    logger.info("Run %s finished %d rounds in %.2fs", cfg.name, cfg.T, wall)
    return SimulationRun(config=cfg, metrics=metrics, w=w, table=table, opt_state=opt_state,
                         partition=part, wall_time=wall)


def run_simulation(cfg: SimConfig, workers: int = 1, divergence_limit: float = math.inf) -> List[RoundMetrics]:
    return simulate(cfg, workers, divergence_limit).metrics


# ---------- Checkpoints ----------

def save_checkpoint(run: SimulationRun, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({"w": run.w, "opt_state": run.opt_state, "round": len(run.metrics), "name": run.config.name}, path)
    logger.info("Saved checkpoint %s", path)
    return path


def load_checkpoint(path) -> Dict[str, object]:
    return joblib.load(Path(path))
