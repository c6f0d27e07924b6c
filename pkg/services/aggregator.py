"""
Server-side aggregation: the per-client state table, the variance-reduced update r,
the pseudo-gradient G and one server round for every strategy.

The StateTable is owned by the server and updated in place; callers that need a
stable view (metrics, snapshots) take table.copy().
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from services.errors import StrategyError, UnknownClientError
from services.numvec import ParamVector, TensorLayout, check_dimension, flat_layout, norm2
from services.quant import QuantMode, QuantizedUpdate, dequant, quant, quantized_bytes
from services.server_opt import OptimizerHyper, OptimizerState, optimizer_step

logger = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedopt_novr", "mifa", "fedvarp", "fedadavr", "fedadavr_quant", "fedadavr_noopt")
ADAPTIVE = ("fedopt_novr", "fedadavr", "fedadavr_quant")
TABLE_STRATEGIES = ("mifa", "fedvarp", "fedadavr", "fedadavr_quant", "fedadavr_noopt")
WEIGHTINGS = ("unbiased", "client-weighted")
# earlier configs spell client-weighted averaging this way
WEIGHTING_ALIASES = {"paper-literal": "client-weighted"}
SLOT_OVERHEAD_BYTES = 1

Slot = Union[None, np.ndarray, QuantizedUpdate]


@dataclass(frozen=True)
class Strategy:
    kind: str
    optimizer: Optional[OptimizerHyper] = None
    weighting: str = "unbiased"
    mode: QuantMode = QuantMode.FP32
    # eta_g for fedavg/mifa, eta_s for fedvarp and fedadavr_noopt
    server_lr: float = 1.0
    fedvarp_scale_by_eta_c: bool = True

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise StrategyError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        object.__setattr__(self, "mode", QuantMode(self.mode))
        if self.kind in ADAPTIVE and self.optimizer is None:
            raise StrategyError(f"{self.kind} needs a server optimizer")
        if self.kind not in ADAPTIVE and self.optimizer is not None:
            raise StrategyError(f"{self.kind} takes no server optimizer")
        if self.kind == "fedadavr_quant" and self.mode is QuantMode.FP32:
            raise StrategyError("fedadavr_quant needs a quantized table mode (fp16, int8 or int4)")
        if self.kind != "fedadavr_quant" and self.mode is not QuantMode.FP32:
            raise StrategyError(f"{self.kind} keeps full-precision state; mode must be fp32")
        object.__setattr__(self, "weighting", resolve_weighting(self.weighting))
        if not self.server_lr > 0:
            raise StrategyError("server_lr must be positive")

    @property
    def uses_table(self) -> bool:
        return self.kind in TABLE_STRATEGIES


def resolve_weighting(name: str) -> str:
    name = WEIGHTING_ALIASES.get(name, name)
    if name not in WEIGHTINGS:
        known = WEIGHTINGS + tuple(WEIGHTING_ALIASES)
        raise StrategyError(f"unknown weighting {name!r}; expected one of {known}")
    return name


class StateTable:
    """Latest update y_j per client (zero until first seen) plus the running sum of p_j * y_j."""

    def __init__(self, num_clients: int, layout: TensorLayout, mode: QuantMode = QuantMode.FP32,
                 weights: Optional[np.ndarray] = None):
        if num_clients < 1:
            raise StrategyError("state table needs at least one client")
        if weights is None:
            weights = np.full(num_clients, 1.0 / num_clients)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != num_clients:
            raise StrategyError(f"{weights.shape[0]} weights for {num_clients} clients")
        if np.any(weights <= 0) or abs(float(weights.sum()) - 1.0) > 1e-12:
            raise StrategyError("client weights must be positive and sum to 1")
        self.layout = layout
        self.mode = QuantMode(mode)
        self.weights = weights
        self.slots: List[Slot] = [None] * num_clients
        self.cached_sum = np.zeros(layout.size, dtype=np.float64)

    @classmethod
    def dense(cls, num_clients: int, d: int, weights=None) -> "StateTable":
        return cls(num_clients, flat_layout(d), QuantMode.FP32, weights)

    @property
    def num_clients(self) -> int:
        return len(self.slots)

    @property
    def dim(self) -> int:
        return self.layout.size

    def _check_client(self, client: int) -> None:
        if not 0 <= client < self.num_clients:
            raise UnknownClientError(f"client {client} outside [0, {self.num_clients})")

    def deref(self, client: int) -> ParamVector:
        self._check_client(client)
        slot = self.slots[client]
        if slot is None:
            return np.zeros(self.dim, dtype=np.float64)
        if isinstance(slot, QuantizedUpdate):
            return dequant(slot)
        return slot

    def store(self, client: int, g: ParamVector) -> None:
        """Replace slot `client` with g (quantized in quantized modes) and adjust cached_sum."""
        check_dimension(g, self.dim, f"update from client {client}")
        old = self.deref(client)
        if self.mode is QuantMode.FP32:
            slot: Slot = np.array(g, dtype=np.float64, copy=True)
            new = slot
        else:
            slot = quant(g, self.layout, self.mode)
            new = dequant(slot)
        self.slots[client] = slot
        self.cached_sum += self.weights[client] * (new - old)

    def recompute_sum(self) -> ParamVector:
        total = np.zeros(self.dim, dtype=np.float64)
        for j in range(self.num_clients):
            if self.slots[j] is not None:
                total += self.weights[j] * self.deref(j)
        return total

    def copy(self) -> "StateTable":
        other = StateTable(self.num_clients, self.layout, self.mode, self.weights.copy())
        # quantized slots are frozen dataclasses and safe to share
        other.slots = [s.copy() if isinstance(s, np.ndarray) else s for s in self.slots]
        other.cached_sum = self.cached_sum.copy()
        return other


@dataclass
class RoundOutcome:
    w: ParamVector
    table: Optional[StateTable]
    opt_state: Optional[OptimizerState]
    r_norm: float


def _client_weights(received: Mapping[int, ParamVector], weights: np.ndarray, weighting: str) -> Dict[int, float]:
    if weighting == "unbiased":
        return {i: 1.0 / len(received) for i in received}
    return {i: float(weights[i]) for i in received}


def _weighted_sum(vectors: Mapping[int, ParamVector], coeffs: Mapping[int, float], d: int) -> ParamVector:
    acc = np.zeros(d, dtype=np.float64)
    for i in sorted(vectors):
        acc = acc + coeffs[i] * vectors[i]
    return acc


def _check_received(received: Mapping[int, ParamVector], num_clients: int, d: int) -> None:
    if not received:
        raise StrategyError("no client updates received this round")
    for i, g in received.items():
        if not 0 <= i < num_clients:
            raise UnknownClientError(f"client {i} outside [0, {num_clients})")
        check_dimension(g, d, f"update from client {i}")


def compute_r(received: Mapping[int, ParamVector], table: StateTable, weighting: str = "unbiased") -> ParamVector:
    """r = sum_{i in S} c_i (g_i - y_i) + sum_j p_j y_j, with c_i = 1/M (unbiased) or p_i."""
    _check_received(received, table.num_clients, table.dim)
    coeffs = _client_weights(received, table.weights, resolve_weighting(weighting))
    corrections = {i: received[i] - table.deref(i) for i in received}
    return _weighted_sum(corrections, coeffs, table.dim) + table.cached_sum


def pseudo_gradient(r: ParamVector, eta_c: float) -> ParamVector:
    if not eta_c > 0:
        raise StrategyError("eta_c must be positive")
    return r * eta_c


def update_table(table: StateTable, received: Mapping[int, ParamVector]) -> StateTable:
    for i in sorted(received):
        table.store(i, received[i])
    return table


def server_round(strategy: Strategy, w: ParamVector, received: Mapping[int, ParamVector],
                 table: Optional[StateTable], opt_state: Optional[OptimizerState], eta_c: float,
                 client_weights: Optional[np.ndarray] = None) -> RoundOutcome:
    """
    One server update. The table (if any) is updated in place and returned in the outcome.
    Table-free strategies take p from client_weights (needed only for client-weighted averaging).
    """
    d = w.shape[0]
    kind = strategy.kind
    if strategy.uses_table:
        if table is None:
            raise StrategyError(f"{kind} needs a state table")
        if table.mode is not strategy.mode:
            raise StrategyError(f"table mode {table.mode.value} does not match strategy mode {strategy.mode.value}")
        num_clients = table.num_clients
        weights = table.weights
    elif client_weights is not None:
        weights = np.asarray(client_weights, dtype=np.float64)
        num_clients = weights.shape[0]
    else:
        weights = None
        num_clients = max(received, default=-1) + 1
    if strategy.optimizer is not None and opt_state is None:
        raise StrategyError(f"{kind} needs optimizer state")
    _check_received(received, num_clients, d)

    if kind in ("fedavg", "fedopt_novr"):
        if strategy.weighting == "client-weighted" and weights is None:
            raise StrategyError("client-weighted averaging needs client weights")
        coeffs = _client_weights(received, weights, strategy.weighting)
        mean_g = _weighted_sum(received, coeffs, d)
        G = pseudo_gradient(mean_g, eta_c)
        if kind == "fedavg":
            return RoundOutcome(w - strategy.server_lr * G, table, opt_state, norm2(mean_g))
        w_next, opt_next = optimizer_step(w, G, strategy.optimizer, opt_state)
        return RoundOutcome(w_next, table, opt_next, norm2(mean_g))

    if kind == "mifa":
        update_table(table, received)
        r = table.cached_sum.copy()
        w_next = w - strategy.server_lr * pseudo_gradient(r, eta_c)
        return RoundOutcome(w_next, table, opt_state, norm2(r))

    r = compute_r(received, table, strategy.weighting)
    if kind == "fedvarp":
        step = pseudo_gradient(r, eta_c) if strategy.fedvarp_scale_by_eta_c else r
        w_next = w - strategy.server_lr * step
        opt_next = opt_state
    elif kind == "fedadavr_noopt":
        w_next = w - strategy.server_lr * pseudo_gradient(r, eta_c)
        opt_next = opt_state
    else:
        w_next, opt_next = optimizer_step(w, pseudo_gradient(r, eta_c), strategy.optimizer, opt_state)
    # table refresh comes after the model step so r used last round's y
    update_table(table, received)
    return RoundOutcome(w_next, table, opt_next, norm2(r))


def table_payload_bytes(table: StateTable) -> int:
    total = 0
    for slot in table.slots:
        if isinstance(slot, QuantizedUpdate):
            total += quantized_bytes(slot)
        elif slot is not None:
            total += 8 * table.dim
    return total


def table_bytes(table: Optional[StateTable]) -> int:
    """Payload plus one tag byte per slot; 0 for strategies without a table."""
    if table is None:
        return 0
    return table_payload_bytes(table) + SLOT_OVERHEAD_BYTES * table.num_clients


def fp32_reference_bytes(table: StateTable) -> int:
    return 4 * table.dim * table.num_clients


def memory_ratio(table: StateTable) -> float:
    return table_payload_bytes(table) / fp32_reference_bytes(table)
