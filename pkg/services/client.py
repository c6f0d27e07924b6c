"""
Client-side local training: K steps of (momentum-)SGD from the round's global model.
Clients are stateless; each call starts from w with zero velocity and returns the scaled delta.
"""
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from services.errors import LocalTrainingError, ModelInputError
from services.models import Batch, ModelSpec, loss_and_grad, parameter_count
from services.numvec import ParamVector, check_dimension

EPOCHS_MODES = ("steps", "epochs")


@dataclass(frozen=True)
class ClientConfig:
    eta_c: float = 0.01
    K: int = 1
    batch_size: int = 20
    momentum: float = 0.9
    epochs_mode: str = "steps"
    epochs: int = 1

    def __post_init__(self):
        if not self.eta_c > 0:
            raise ModelInputError("eta_c must be positive")
        if self.K < 1:
            raise ModelInputError("K must be >= 1")
        if self.batch_size < 1:
            raise ModelInputError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ModelInputError("momentum must lie in [0, 1)")
        if self.epochs_mode not in EPOCHS_MODES:
            raise ModelInputError(f"epochs_mode must be one of {EPOCHS_MODES}")
        if self.epochs < 1:
            raise ModelInputError("epochs must be >= 1")


@dataclass(frozen=True)
class LocalUpdate:
    g: ParamVector
    final_loss: float
    num_examples: int
    steps: int


def local_steps(cfg: ClientConfig, n: int) -> int:
    """K for a client holding n examples: cfg.K, or epochs * ceil(n / batch_size) in epochs mode."""
    if cfg.epochs_mode == "epochs":
        return cfg.epochs * math.ceil(n / cfg.batch_size)
    return cfg.K


def minibatch_schedule(n: int, batch_size: int, K: int, rng: np.random.Generator) -> List[np.ndarray]:
    """K index batches: reshuffle at each epoch start, contiguous cuts, short last batch kept."""
    if n < 1:
        raise ModelInputError("cannot schedule batches over an empty client")
    if batch_size < 1 or K < 1:
        raise ModelInputError("batch_size and K must be >= 1")
    schedule: List[np.ndarray] = []
    while len(schedule) < K:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            schedule.append(perm[start:start + batch_size])
            if len(schedule) == K:
                break
    return schedule


def local_train(spec: ModelSpec, data: Batch, w: ParamVector, cfg: ClientConfig,
                rng: np.random.Generator) -> LocalUpdate:
    check_dimension(w, parameter_count(spec), "global model")
    if data.size < 1:
        raise ModelInputError("client data is empty")
    K = local_steps(cfg, data.size)
    schedule = minibatch_schedule(data.size, cfg.batch_size, K, rng)
    full_batch = cfg.batch_size >= data.size

    w_k = w.copy()
    velocity = np.zeros_like(w)
    loss = float("nan")
    for step, idx in enumerate(schedule):
        batch = data if full_batch else data.take(idx)
        loss, grad = loss_and_grad(spec, w_k, batch)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise LocalTrainingError(f"non-finite loss {loss} during local training", step=step)
        if cfg.momentum > 0.0:
            velocity = cfg.momentum * velocity + grad
            w_k = w_k - cfg.eta_c * velocity
        else:
            w_k = w_k - cfg.eta_c * grad
    g = (w - w_k) / cfg.eta_c
    return LocalUpdate(g=g, final_loss=loss, num_examples=data.size, steps=K)


def device_update(spec: ModelSpec, client_data: Batch, w: ParamVector, cfg: ClientConfig,
                  rng: np.random.Generator) -> ParamVector:
    """g_i = (w - w_K) / eta_c after K local steps."""
    return local_train(spec, client_data, w, cfg, rng).g
