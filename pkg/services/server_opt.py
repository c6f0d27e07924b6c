"""
Server-side adaptive optimizers consuming the pseudo-gradient G.
Each step is a pure function (w, G, hyper, state) -> (w_next, state_next); inputs are never mutated.
"""
from dataclasses import dataclass, replace
from typing import Callable, Dict, Tuple

import numpy as np

from services.errors import DimensionError, StrategyError
from services.numvec import ParamVector, check_same_length, norm2

OPTIMIZERS = ("adagrad", "adam", "adabelief", "yogi", "lamb")


@dataclass(frozen=True)
class OptimizerHyper:
    kind: str = "adam"
    eta_s: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise StrategyError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if not self.eta_s > 0:
            raise StrategyError("eta_s must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise StrategyError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise StrategyError("epsilon must be positive")
        if self.weight_decay < 0:
            raise StrategyError("weight decay must be >= 0")


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    m: ParamVector
    v_or_z: ParamVector
    step: int = 0


def init_state(d: int, hyper: OptimizerHyper, z0: float = 0.0) -> OptimizerState:
    """Zero moments. z0 seeds the second-moment accumulator (0 for plain execution)."""
    if z0 < 0:
        raise StrategyError("z0 must be >= 0")
    return OptimizerState(
        kind=hyper.kind,
        m=np.zeros(d, dtype=np.float64),
        v_or_z=np.full(d, float(z0), dtype=np.float64),
        step=0,
    )


def apply_weight_decay(G: ParamVector, w: ParamVector, lam: float) -> ParamVector:
    check_same_length(G, w)
    if lam == 0:
        return G
    return G + lam * w


def _check(w: ParamVector, G: ParamVector, hyper: OptimizerHyper, state: OptimizerState) -> None:
    check_same_length(w, G)
    if state.m.shape != w.shape:
        raise DimensionError(f"optimizer state has length {state.m.shape[0]}, model {w.shape[0]}")
    if state.kind != hyper.kind:
        raise StrategyError(f"state built for {state.kind!r} used with {hyper.kind!r}")


def _first_moment(G: ParamVector, hyper: OptimizerHyper, state: OptimizerState) -> ParamVector:
    return hyper.beta1 * state.m + (1.0 - hyper.beta1) * G


def _bias_corrected(m: ParamVector, v: ParamVector, hyper: OptimizerHyper, step: int):
    return m / (1.0 - hyper.beta1 ** step), v / (1.0 - hyper.beta2 ** step)


def adagrad_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    _check(w, G, hyper, state)
    z = state.v_or_z + G * G
    w_next = w - hyper.eta_s * G / (np.sqrt(z) + hyper.epsilon)
    return w_next, replace(state, v_or_z=z, step=state.step + 1)


def adam_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    _check(w, G, hyper, state)
    step = state.step + 1
    g2 = G * G
    m = _first_moment(G, hyper, state)
    v = hyper.beta2 * state.v_or_z + (1.0 - hyper.beta2) * g2
    m_hat, v_hat = _bias_corrected(m, v, hyper, step)
    w_next = w - hyper.eta_s * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return w_next, replace(state, m=m, v_or_z=v, step=step)


def adabelief_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    _check(w, G, hyper, state)
    step = state.step + 1
    m = _first_moment(G, hyper, state)
    dev = G - m
    z = hyper.beta2 * state.v_or_z + (1.0 - hyper.beta2) * dev * dev
    m_hat, z_hat = _bias_corrected(m, z, hyper, step)
    w_next = w - hyper.eta_s * m_hat / (np.sqrt(z_hat) + hyper.epsilon)
    return w_next, replace(state, m=m, v_or_z=z, step=step)


def yogi_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    _check(w, G, hyper, state)
    step = state.step + 1
    g2 = G * G
    m = _first_moment(G, hyper, state)
    # np.sign(0) == 0
    v = state.v_or_z - (1.0 - hyper.beta2) * g2 * np.sign(state.v_or_z - g2)
    m_hat, v_hat = _bias_corrected(m, v, hyper, step)
    w_next = w - hyper.eta_s * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return w_next, replace(state, m=m, v_or_z=v, step=step)


def lamb_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    _check(w, G, hyper, state)
    step = state.step + 1
    g2 = G * G
    m = _first_moment(G, hyper, state)
    v = hyper.beta2 * state.v_or_z + (1.0 - hyper.beta2) * g2
    m_hat, v_hat = _bias_corrected(m, v, hyper, step)
    r_hat = m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    weight_norm = norm2(w)
    update_norm = norm2(r_hat)
    trust = weight_norm / update_norm if weight_norm > 0 and update_norm > 0 else 1.0
    w_next = w - hyper.eta_s * trust * r_hat
    return w_next, replace(state, m=m, v_or_z=v, step=step)


_STEPS: Dict[str, Callable] = {
    "adagrad": adagrad_step,
    "adam": adam_step,
    "adabelief": adabelief_step,
    "yogi": yogi_step,
    "lamb": lamb_step,
}


def optimizer_step(w, G, hyper: OptimizerHyper, state: OptimizerState) -> Tuple[ParamVector, OptimizerState]:
    """Weight decay, then the step selected by hyper.kind."""
    G = apply_weight_decay(G, w, hyper.weight_decay)
    return _STEPS[hyper.kind](w, G, hyper, state)
