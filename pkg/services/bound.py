"""
Convergence-bound calculator for FedAdaVR with a server Adagrad step.

    min_t E||grad f(w^t)||^2 <= 4 (f(w^0) - f*) / T + 4 (A1 sigma_g^2 + A2 sigma^2 + A3)

The eta_c condition uses a constant A that is never defined alongside the bound; callers pass it
explicitly and the two terms that depend on it are reported unchecked when it is missing.
"""
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

from services.errors import BoundError


@dataclass(frozen=True)
class BoundParams:
    eta_c: float
    eta_s: float
    K: int
    M: int
    L: float
    G: float
    epsilon: float
    sigma: float
    sigma_g: float
    T: int
    f0_minus_fstar: float
    A: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise BoundError("epsilon must be positive")
        if not self.L > 0:
            raise BoundError("L must be positive")
        if not self.T > 0:
            raise BoundError("T must be positive")
        if self.K < 1 or self.M < 1:
            raise BoundError("K and M must be >= 1")
        for name in ("eta_c", "eta_s"):
            if not getattr(self, name) > 0:
                raise BoundError(f"{name} must be positive")
        for name in ("G", "sigma", "sigma_g", "f0_minus_fstar"):
            if getattr(self, name) < 0:
                raise BoundError(f"{name} must be >= 0")
        if self.A is not None and not self.A > 0:
            raise BoundError("A must be positive when given")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "BoundParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise BoundError(f"unknown bound parameter(s): {', '.join(unknown)}")
        missing = sorted(f.name for f in fields(cls) if f.name not in raw and f.name != "A")
        if missing:
            raise BoundError(f"missing bound parameter(s): {', '.join(missing)}")
        return cls(**raw)


@dataclass(frozen=True)
class BoundResult:
    A1: float
    A2: float
    A3: float
    bound: float
    eta_s_limit: float
    eta_c_limit: float
    lr_conditions_ok: bool
    unchecked: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _eta_c_terms(p: BoundParams) -> Dict[str, Optional[float]]:
    """The four eta_c ceilings; None when A is unknown, inf when K = 1 zeroes a denominator."""
    K, L, G, eps, T = p.K, p.L, p.G, p.epsilon, p.T
    drift = K * (K - 1)
    terms: Dict[str, Optional[float]] = {}
    if p.A is None:
        terms["drift_cubic"] = None
        terms["drift_sqrt"] = None
    else:
        denom = 64.0 * p.A * L ** 2 * K ** 2 * (K - 1) * G * math.sqrt(T)
        terms["drift_cubic"] = (eps / denom) ** (1.0 / 3.0) if denom > 0 else math.inf
        terms["drift_sqrt"] = 1.0 / (8.0 * math.sqrt(p.A) * L * math.sqrt(drift)) if drift > 0 else math.inf
    terms["gradient_bound"] = eps ** 2 / (6.0 * K * G ** 2) if G > 0 else math.inf
    terms["horizon"] = eps / (4.0 * (eps + 2.0) * K * G * math.sqrt(T)) if G > 0 else math.inf
    return terms


def theorem_bound(p: BoundParams) -> BoundResult:
    K, M, L, eps = p.K, p.M, p.L, p.epsilon
    A1 = 4.0 * p.eta_c ** 2 * L ** 2 * K * (K - 1)
    A2 = p.eta_c ** 2 * L ** 2 * (K - 1) + p.eta_s / (2.0 * M * K * eps) + p.eta_s / (M * eps)
    A3 = (p.eta_s / (2.0 * eps ** 2)) * p.eta_c ** 2 * K ** 2 * M ** 2 * p.G ** 2
    bound = 4.0 * p.f0_minus_fstar / p.T + 4.0 * (A1 * p.sigma_g ** 2 + A2 * p.sigma ** 2 + A3)

    eta_s_limit = min(1.0 / (3.0 * L), math.sqrt(1.0 / (12.0 * eps * L ** 2)))
    terms = _eta_c_terms(p)
    known = [v for v in terms.values() if v is not None]
    eta_c_limit = min(known)
    unchecked = sorted(name for name, v in terms.items() if v is None)
    ok = p.eta_s <= eta_s_limit and p.eta_c <= eta_c_limit
    return BoundResult(A1=A1, A2=A2, A3=A3, bound=bound, eta_s_limit=eta_s_limit,
                       eta_c_limit=eta_c_limit, lr_conditions_ok=ok, unchecked=unchecked)


def corollary_rates(K: int, M: int, L: float, G: float, T: int) -> Dict[str, float]:
    """Step sizes at the orders that give the O(1/T) rate: eta_c ~ 1/(K L sqrt T), eta_s ~ K M / T, eps = G / L."""
    if K < 1 or M < 1 or T < 1 or not L > 0 or not G > 0:
        raise BoundError("K, M, T must be >= 1 and L, G positive")
    return {"eta_c": 1.0 / (K * L * math.sqrt(T)), "eta_s": K * M / T, "epsilon": G / L}
