"""Worker and server step functions for error-feedback SGD and its baselines.

Every step is a pure function: it takes the current state plus inputs and
returns its outputs together with a fresh state object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .compressors import as_compress_fn
from .core import DimensionError, sign

SCHEDULE_KINDS = ("constant", "decreasing", "increasing", "hybrid_warmup")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class WorkerState:
    e: np.ndarray
    m: np.ndarray
    id: int = 0

    @classmethod
    def zeros(cls, dim: int, id: int = 0) -> "WorkerState":
        return cls(e=np.zeros(dim), m=np.zeros(dim), id=id)


@dataclass(frozen=True)
class ServerState:
    e_tilde: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "ServerState":
        return cls(e_tilde=np.zeros(dim))


@dataclass(frozen=True)
class DecoupledWDState:
    m_tilde: np.ndarray
    lam: float = 0.0

    @classmethod
    def zeros(cls, dim: int, lam: float = 0.0) -> "DecoupledWDState":
        if lam < 0:
            raise ValueError("weight decay must be >= 0")
        return cls(m_tilde=np.zeros(dim), lam=float(lam))


@dataclass(frozen=True)
class ScheduleSpec:
    """Stepsize schedule.

    ``T``, ``M`` and ``delta`` enter the decreasing/increasing formulas; the
    harness fills them from the run. ``warmup`` is the length of the
    increasing phase of ``hybrid_warmup``.
    """

    kind: str = "constant"
    gamma: float = 0.05
    T: int = 1
    M: int = 1
    delta: float = 1.0
    warmup: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ScheduleError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.gamma > 0:
            raise ScheduleError("gamma must be > 0")
        if self.T < 1 or self.M < 1:
            raise ScheduleError("T and M must be >= 1")
        if not 0 < self.delta <= 1:
            raise ScheduleError("delta must lie in (0, 1]")
        if self.warmup < 0:
            raise ScheduleError("warmup must be >= 0")

    def with_run(self, T: int, M: int, delta: float) -> "ScheduleSpec":
        return replace(self, T=T, M=M, delta=delta)


def compression_term(delta: float) -> float:
    """(1 - delta)^{1/3} (1/delta^2 + 16/delta^4)^{1/3}, zero for lossless compressors."""
    return (1.0 - delta) ** (1 / 3) * (1.0 / delta**2 + 16.0 / delta**4) ** (1 / 3)


def _decreasing(gamma: float, t: int, T: int, M: int, delta: float) -> float:
    return gamma / (((t + 1) * T) ** 0.25 / math.sqrt(M) + compression_term(delta) * T ** (1 / 3))


def _increasing(gamma: float, t: int, T: int, M: int, delta: float) -> float:
    return gamma * math.sqrt(t + 1) / (T / math.sqrt(M) + compression_term(delta) * T ** (5 / 6))


def stepsize(sched: ScheduleSpec, t: int) -> float:
    """eta_t for ``t >= -1``; eta_{-1} = 0."""
    if t < -1:
        raise ScheduleError(f"stepsize undefined for t={t}")
    if t == -1:
        return 0.0
    k = sched.kind
    if k == "constant":
        return sched.gamma
    if k == "decreasing":
        return _decreasing(sched.gamma, t, sched.T, sched.M, sched.delta)
    if k == "increasing":
        return _increasing(sched.gamma, t, sched.T, sched.M, sched.delta)
    if t < sched.warmup:
        return _increasing(sched.gamma, t, sched.T, sched.M, sched.delta)
    return _decreasing(sched.gamma, t - sched.warmup, sched.T, sched.M, sched.delta)


def ratio(sched: ScheduleSpec, t: int) -> float:
    """eta_{t-1} / eta_t, the rescaling applied to carried-over errors."""
    if t < 0:
        raise ScheduleError("ratio needs t >= 0")
    return stepsize(sched, t - 1) / stepsize(sched, t)


def theory_constant_stepsize(gamma: float, T: int, M: int, delta: float, L: Optional[float] = None) -> float:
    """Constant stepsize with O(1/sqrt(MT)) guarantee, capped at 1/(2L) when L is given."""
    eta = gamma / (math.sqrt(T) / math.sqrt(M) + compression_term(delta) * T ** (1 / 3))
    return min(eta, 1.0 / (2.0 * L)) if L is not None else eta


def _same_dim(*vs: np.ndarray) -> None:
    shapes = {v.shape for v in vs}
    if len(shapes) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(shapes)}")


def worker_step(state: WorkerState, g: np.ndarray, r: float, compressor, rng=None):
    """One worker round: p = g + r e, push C(p), keep p - C(p)."""
    _same_dim(state.e, g)
    p = g + r * state.e
    delta = as_compress_fn(compressor, rng)(p)
    return delta, replace(state, e=p - delta)


def momentum_worker_step(state: WorkerState, g: np.ndarray, r: float, mu: float, compressor, rng=None):
    """Worker round with Nesterov momentum folded in before compression."""
    if not 0.0 <= mu < 1.0:
        raise ValueError("momentum must satisfy 0 <= mu < 1")
    _same_dim(state.e, state.m, g)
    m = mu * state.m + g
    p = mu * m + g + r * state.e
    delta = as_compress_fn(compressor, rng)(p)
    return delta, replace(state, e=p - delta, m=m)


def mean_fixed_order(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Sum in the given order, then divide once."""
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total = total + v
    return total / len(vectors)


def server_step(state: ServerState, deltas: Sequence[np.ndarray], r: float, compressor, rng=None,
                M: Optional[int] = None):
    """Aggregate worker messages (ascending worker id), add the server error, recompress."""
    if len(deltas) == 0 or (M is not None and len(deltas) != M):
        raise DimensionError(f"expected {M} worker messages, got {len(deltas)}")
    _same_dim(state.e_tilde, *deltas)
    p = mean_fixed_order(deltas) + r * state.e_tilde
    out = as_compress_fn(compressor, rng)(p)
    return out, ServerState(e_tilde=p - out)


def weight_decay_direction(x: np.ndarray, wd: DecoupledWDState, mu: float):
    """Direction added to the pulled update, and the new weight-decay momentum."""
    if mu == 0.0:
        return wd.lam * x, wd
    m = mu * wd.m_tilde + wd.lam * x
    return mu * m + wd.lam * x, replace(wd, m_tilde=m)


def apply_update_traced(x: np.ndarray, delta_tilde: np.ndarray, eta: float, wd: DecoupledWDState,
                        mu: float = 0.0):
    """:func:`apply_update` that also returns the weight-decay direction it added (None if lam = 0)."""
    if wd.lam == 0.0:
        return x - eta * delta_tilde, wd, None
    extra, wd = weight_decay_direction(x, wd, mu)
    return x - eta * (delta_tilde + extra), wd, extra


def apply_update(x: np.ndarray, delta_tilde: np.ndarray, eta: float, wd: DecoupledWDState, mu: float = 0.0):
    """x' = x - eta (delta_tilde + weight decay terms); weight decay is never compressed."""
    x_new, wd, _ = apply_update_traced(x, delta_tilde, eta, wd, mu)
    return x_new, wd


def ef_sgd_step(x: np.ndarray, e: np.ndarray, g: np.ndarray, eta: float, compressor, rng=None):
    """Single-machine error feedback: the stepsize scales g before compression."""
    _same_dim(x, e, g)
    p = eta * g + e
    delta = as_compress_fn(compressor, rng)(p)
    return x - delta, p - delta


def majority_vote_step(states: Sequence[WorkerState], grads: Sequence[np.ndarray], mu: float, eta: float,
                       use_momentum: bool = False):
    """signSGD / signum with majority vote.

    Returns the update direction sign(sum_i s_i) (caller applies x - eta * dir)
    and the new worker states. Signum keeps m' = mu m + (1 - mu) g.
    """
    if len(states) != len(grads) or not states:
        raise DimensionError("need one gradient per worker")
    votes = np.zeros_like(grads[0])
    new_states = []
    for st, g in zip(states, grads):
        _same_dim(st.m, g)
        if use_momentum:
            m = mu * st.m + (1.0 - mu) * g
            votes = votes + sign(m)
            new_states.append(replace(st, m=m))
        else:
            votes = votes + sign(g)
            new_states.append(st)
    return sign(votes), new_states


def full_precision_step(states: Sequence[WorkerState], grads: Sequence[np.ndarray], mu: float, eta: float):
    """Distributed SGD with Nesterov momentum; mu = 0 is plain synchronous SGD."""
    if len(states) != len(grads) or not states:
        raise DimensionError("need one gradient per worker")
    if not 0.0 <= mu < 1.0:
        raise ValueError("momentum must satisfy 0 <= mu < 1")
    dirs = []
    new_states = []
    for st, g in zip(states, grads):
        _same_dim(st.m, g)
        m = mu * st.m + g
        dirs.append(mu * m + g)
        new_states.append(replace(st, m=m))
    return mean_fixed_order(dirs), new_states
