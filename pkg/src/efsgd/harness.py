"""Deterministic M-worker / one-server simulation, bit accounting, and recurrence checks."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .compressors import CompressorSpec, compress, delta_lower_bound
from .config import RunConfig
from .core import BlockPartition
from .optim import (
    DecoupledWDState,
    ServerState,
    WorkerState,
    apply_update_traced,
    ef_sgd_step,
    full_precision_step,
    majority_vote_step,
    mean_fixed_order,
    momentum_worker_step,
    ratio,
    server_step,
    stepsize,
    worker_step,
)
from .problems import GradOracle, make_problem
from .wire import message_bits, wire_compress

DIVERGENCE_LIMIT = 1e12
RECURRENCE_TOL = 1e-9
TRACE_BUDGET = 10_000_000
METRIC_COLUMNS = ("t", "loss", "grad_norm_sq", "error_norm_sq", "stepsize", "bits_ideal", "bits_wire")


class DivergenceError(RuntimeError):
    def __init__(self, t: int, value: float):
        super().__init__(f"run diverged at iteration {t} (value {value:g} exceeds {DIVERGENCE_LIMIT:g})")
        self.t = t
        self.value = value
        self.metrics: list = []


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class IterationMetrics:
    t: int
    loss: float
    grad_norm_sq: float
    error_norm_sq: float
    stepsize: float
    bits_ideal: int
    bits_wire: int


@dataclass
class Trace:
    """Snapshots needed by the recurrence checks.

    ``x_tilde[t]`` is the error-corrected iterate, ``g_mean[t]`` / ``m_mean[t]``
    the worker averages of g_t and m_t, ``m_prev_mean[t]`` that of m_{t-1},
    and ``wd[t]`` the uncompressed weight-decay direction added at step t.
    Only iterations with ``t % stride == 0`` (and their successors) are kept.
    """

    stride: int = 1
    etas: list = field(default_factory=list)
    x_tilde: dict = field(default_factory=dict)
    g_mean: dict = field(default_factory=dict)
    m_mean: dict = field(default_factory=dict)
    m_prev_mean: dict = field(default_factory=dict)
    wd: dict = field(default_factory=dict)
    g_max: float = 0.0

    def keeps(self, t: int) -> bool:
        return t % self.stride == 0 or (t - 1) % self.stride == 0

    def steps(self) -> list[int]:
        return sorted(t for t in self.g_mean if t + 1 in self.x_tilde)


@dataclass
class VerificationReport:
    lemma1_residual: Optional[float] = None
    lemma4_residual: Optional[float] = None
    virtual_iterate_residual: Optional[float] = None
    error_bound: Optional[float] = None
    error_bound_margin: Optional[float] = None
    g_estimate: Optional[float] = None
    delta_lower_bound: Optional[float] = None
    tolerance: float = RECURRENCE_TOL
    flags: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class RunResult:
    metrics: list
    x_final: np.ndarray
    report: VerificationReport
    final: dict
    trace: Optional[Trace] = None


def comm_cost(method: str, M: int, d: int, B: int = 1) -> int:
    """Bits exchanged per iteration, push plus pull, over all M workers."""
    if method == "full_precision":
        return 64 * M * d
    if method == "majority_vote":
        return 2 * M * d
    if method == "dist_ef_block":
        return 2 * M * d + 64 * M * B
    raise ValueError(f"unknown method {method!r}")


def iteration_bits(config: RunConfig, spec: CompressorSpec) -> tuple[int, int]:
    """(ideal, wire) bits for one iteration of ``config``.

    Sign compressors are counted per the byte format in :mod:`efsgd.wire`;
    top-k sends k (float32 value, u32 index) pairs each way. Single-machine
    EF-SGD communicates nothing.
    """
    M, d = config.workers, spec.dim
    opt = config.optimizer
    if opt == "ef_sgd":
        return 0, 0
    if opt == "sgd":
        bits = comm_cost("full_precision", M, d)
        return bits, bits
    if opt in ("signsgd", "signum"):
        bits = comm_cost("majority_vote", M, d)
        return bits, bits
    kind = spec.kind
    if kind in ("scaled_sign", "blockwise_scaled_sign", "unbiased_scaled"):
        part = spec.blocks()
        return comm_cost("dist_ef_block", M, d, part.num_blocks), 2 * M * message_bits(part)
    if kind == "top_k":
        bits = 2 * M * spec.k * 64
        return bits, bits
    bits = comm_cost("full_precision", M, d)
    return bits, bits


def sample_output_index(stepsizes: Sequence[float], L: float) -> np.ndarray:
    """P(o = k) proportional to eta_k (3 - 2 L eta_k)."""
    eta = np.asarray(stepsizes, dtype=np.float64)
    if eta.size == 0:
        raise PreconditionError("need at least one stepsize")
    if np.any(eta >= 1.5 / L) or np.any(eta <= 0):
        raise PreconditionError(f"every stepsize must lie in (0, 3/(2L)) = (0, {1.5 / L:g})")
    w = eta * (3.0 - 2.0 * L * eta)
    return w / w.sum()


def expected_grad_norm(metrics: Sequence[IterationMetrics], L: float) -> Optional[float]:
    """E||grad F(x_o)||^2 under :func:`sample_output_index`, or None if the stepsizes are too large."""
    if not metrics:
        return None
    try:
        w = sample_output_index([m.stepsize for m in metrics], L)
    except PreconditionError:
        return None
    return float(np.dot(w, [m.grad_norm_sq for m in metrics]))


def error_bound(delta: float, mu: float, G: float) -> float:
    """8 (1 - delta) G^2 / (delta^2 (1 - mu)^2) * (1 + 16 / delta^2)."""
    return 8.0 * (1.0 - delta) * G * G / (delta**2 * (1.0 - mu) ** 2) * (1.0 + 16.0 / delta**2)


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _recurrence_residual(trace: Trace, direction) -> float:
    """max_t ||xt_{t+1} - (xt_t - eta_t dir_t)||_inf over the trajectory scale."""
    worst, scale = 0.0, 0.0
    for t in trace.steps():
        step = trace.etas[t] * direction(t)
        pred = trace.x_tilde[t] - step
        worst = max(worst, _inf(trace.x_tilde[t + 1] - pred))
        scale = max(scale, _inf(trace.x_tilde[t]), _inf(trace.x_tilde[t + 1]), _inf(step))
    return worst / scale if scale > 0 else worst


def _with_wd(trace: Trace, t: int, v: np.ndarray) -> np.ndarray:
    w = trace.wd.get(t)
    return v if w is None else v + w


def check_lemma1(trace: Trace) -> float:
    """Relative residual of xt_{t+1} = xt_t - eta_t mean(g_t)."""
    return _recurrence_residual(trace, lambda t: _with_wd(trace, t, trace.g_mean[t]))


def check_lemma4(trace: Trace, mu: float) -> float:
    """Relative residual of xt_{t+1} = xt_t - eta_t mean(mu m_t + g_t)."""
    return _recurrence_residual(trace, lambda t: _with_wd(trace, t, mu * trace.m_mean[t] + trace.g_mean[t]))


def check_virtual_iterate(trace: Trace, mu: float, eta: float) -> float:
    """Relative residual of z_{t+1} = z_t - eta/(1-mu) mean(g_t), z_t = xt_t - eta mu^2/(1-mu) mean(m_{t-1})."""
    c = eta * mu * mu / (1.0 - mu)
    worst, scale = 0.0, 0.0
    for t in trace.steps():
        z = trace.x_tilde[t] - c * trace.m_prev_mean[t]
        z_next = trace.x_tilde[t + 1] - c * trace.m_mean[t]
        step = eta / (1.0 - mu) * trace.g_mean[t]
        w = trace.wd.get(t)
        if w is not None:
            step = step + eta * w
        worst = max(worst, _inf(z_next - (z - step)))
        scale = max(scale, _inf(z), _inf(z_next), _inf(step), _inf(trace.x_tilde[t]))
    return worst / scale if scale > 0 else worst


def check_error_bound(metrics: Sequence[IterationMetrics], delta_lb: float, mu: float,
                      G_est: float) -> tuple[float, float]:
    """(bound, min_t (bound - observed)); per trajectory, not in expectation."""
    bound = error_bound(delta_lb, mu, G_est)
    if not metrics:
        return bound, bound
    observed = max(m.error_norm_sq for m in metrics)
    return bound, bound - observed


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2**32 + tag,)))


def run_experiment(config: RunConfig, *, oracle: Optional[GradOracle] = None, keep_trace: bool = False,
                   fault_inject: float = 0.0, momentum_path: Optional[bool] = None) -> RunResult:
    """Run ``config`` for its T iterations and return metrics, final iterate and checks.

    ``momentum_path`` forces (or forbids) the momentum worker step; by default
    it is used iff momentum > 0.

    ``fault_inject`` adds a constant to worker 0's stored error after every
    step without changing what it sent; the recurrence checks must catch it.
    """
    oracle = oracle or make_problem(config.problem)
    d, M, T, mu = oracle.dim, config.workers, config.iterations, config.momentum
    spec = config.build_compressor(d, oracle.partition)
    delta_lb = delta_lower_bound(spec)
    sched = config.schedule.with_run(T=max(T, 1), M=M, delta=delta_lb)
    opt = config.optimizer
    bits_ideal, bits_wire = iteration_bits(config, spec)
    use_momentum = mu > 0 if momentum_path is None else momentum_path

    verify = config.verify or keep_trace
    trace = Trace(stride=max(1, math.ceil(d * max(T, 1) / TRACE_BUDGET))) if verify else None

    if config.wire:
        part = spec.blocks()
        worker_fns, server_fn = None, None
    elif spec.kind == "unbiased_scaled":
        worker_fns = [lambda p, r=_stream(spec.seed, i): compress(spec, p, r) for i in range(M)]
        server_fn = lambda p, r=_stream(spec.seed, M): compress(spec, p, r)  # noqa: E731
    else:
        worker_fns = [spec] * M
        server_fn = spec

    x = oracle.x0.copy()
    workers = [WorkerState.zeros(d, i) for i in range(M)]
    server = ServerState.zeros(d)
    wd = DecoupledWDState.zeros(d, config.weight_decay)
    ef_err = np.zeros(d)
    metrics: list[IterationMetrics] = []
    eta_prev = 0.0

    for t in range(T):
        eta = stepsize(sched, t)
        grads = [oracle.stochastic_gradient(x, t, i, config.batch_size) for i in range(M)]
        if opt == "dist_ef":
            err = server.e_tilde + mean_fixed_order([w.e for w in workers])
            x_tilde = x - eta_prev * err
        elif opt == "ef_sgd":
            err = ef_err
            x_tilde = x - ef_err
        else:
            err = None
            x_tilde = x

        loss = oracle.loss(x)
        gnorm = oracle.exact_gradient(x)
        metrics.append(IterationMetrics(
            t=t, loss=loss, grad_norm_sq=float(gnorm @ gnorm),
            error_norm_sq=float(err @ err) if err is not None else 0.0,
            stepsize=eta, bits_ideal=bits_ideal, bits_wire=bits_wire,
        ))
        if trace is not None:
            trace.etas.append(eta)
            trace.g_max = max(trace.g_max, max(float(np.linalg.norm(g)) for g in grads))
            if trace.keeps(t):
                trace.x_tilde[t] = x_tilde
                trace.m_prev_mean[t] = mean_fixed_order([w.m for w in workers])

        extra = None
        if opt == "dist_ef":
            r = ratio(sched, t)
            if config.wire:
                worker_fns = [partial(wire_compress, partition=part, worker_id=i, t=t) for i in range(M)]
                server_fn = partial(wire_compress, partition=part, worker_id=M, t=t)
            deltas = []
            for i in range(M):
                if use_momentum:
                    delta_i, workers[i] = momentum_worker_step(workers[i], grads[i], r, mu, worker_fns[i])
                else:
                    delta_i, workers[i] = worker_step(workers[i], grads[i], r, worker_fns[i])
                deltas.append(delta_i)
            if fault_inject:
                workers[0] = WorkerState(e=workers[0].e + fault_inject, m=workers[0].m, id=0)
            delta_tilde, server = server_step(server, deltas, r, server_fn, M=M)
            x, wd, extra = apply_update_traced(x, delta_tilde, eta, wd, mu)
        elif opt == "sgd":
            direction, workers = full_precision_step(workers, grads, mu, eta)
            x, wd, extra = apply_update_traced(x, direction, eta, wd, mu)
        elif opt in ("signsgd", "signum"):
            direction, workers = majority_vote_step(workers, grads, mu, eta, use_momentum=opt == "signum")
            x, wd, extra = apply_update_traced(x, direction, eta, wd, mu if opt == "signum" else 0.0)
        else:
            x, ef_err = ef_sgd_step(x, ef_err, grads[0], eta, spec)
            if fault_inject:
                ef_err = ef_err + fault_inject

        if trace is not None and trace.keeps(t):
            trace.g_mean[t] = mean_fixed_order(grads)
            trace.m_mean[t] = mean_fixed_order([w.m for w in workers])
            if extra is not None:
                trace.wd[t] = extra

        for value in (abs(loss), _inf(x)):
            if not value <= DIVERGENCE_LIMIT:
                err = DivergenceError(t, value)
                err.metrics = metrics
                raise err
        eta_prev = eta

    if trace is not None and T > 0 and trace.keeps(T):
        if opt == "dist_ef":
            err = server.e_tilde + mean_fixed_order([w.e for w in workers])
            trace.x_tilde[T] = x - eta_prev * err
        elif opt == "ef_sgd":
            trace.x_tilde[T] = x - ef_err
        else:
            trace.x_tilde[T] = x.copy()
        trace.m_prev_mean[T] = mean_fixed_order([w.m for w in workers])

    report = VerificationReport()
    if verify and opt in ("dist_ef", "ef_sgd") and T > 0:
        report = _verify(config, sched, trace, metrics, delta_lb, spec)
    g_final = oracle.exact_gradient(x)
    final = {
        "loss": oracle.loss(x),
        "grad_norm_sq": float(g_final @ g_final),
        "expected_grad_norm_sq": expected_grad_norm(metrics, oracle.L),
        "L": oracle.L,
        "dim": d,
        "num_blocks": spec.blocks().num_blocks if spec.kind in ("scaled_sign", "blockwise_scaled_sign") else None,
        "delta_lower_bound": delta_lb,
        "total_bits_ideal": bits_ideal * T,
        "total_bits_wire": bits_wire * T,
    }
    return RunResult(metrics=metrics, x_final=x, report=report, final=final,
                     trace=trace if keep_trace else None)


def _verify(config: RunConfig, sched, trace: Trace, metrics, delta_lb: float,
            spec: CompressorSpec) -> VerificationReport:
    rep = VerificationReport(delta_lower_bound=delta_lb, g_estimate=trace.g_max)
    mu = config.momentum
    if config.optimizer == "ef_sgd":
        # x - e advances by eta * g, so the plain recurrence applies with unit carry-over
        rep.lemma1_residual = check_lemma1(trace)
        rep.flags["lemma1"] = rep.lemma1_residual <= RECURRENCE_TOL
        return rep
    if mu == 0:
        rep.lemma1_residual = check_lemma1(trace)
        rep.flags["lemma1"] = rep.lemma1_residual <= RECURRENCE_TOL
    rep.lemma4_residual = check_lemma4(trace, mu)
    rep.flags["lemma4"] = rep.lemma4_residual <= RECURRENCE_TOL
    if sched.kind == "constant":
        rep.virtual_iterate_residual = check_virtual_iterate(trace, mu, sched.gamma)
        rep.flags["virtual_iterate"] = rep.virtual_iterate_residual <= RECURRENCE_TOL
    rep.error_bound, rep.error_bound_margin = check_error_bound(metrics, delta_lb, mu, trace.g_max)
    rep.flags["error_bound"] = rep.error_bound_margin >= 0
    rep.notes.append("error bound: empirical per-trajectory check with G = max observed ||g_{t,i}||")
    if spec.kind == "unbiased_scaled":
        rep.notes.append("unbiased_scaled contracts only in expectation")
    if trace.stride > 1:
        rep.notes.append(f"recurrences checked on every {trace.stride}-th iteration")
    return rep


def metrics_csv(metrics: Sequence[IterationMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in metrics:
        w.writerow([m.t, repr(m.loss), repr(m.grad_norm_sq), repr(m.error_norm_sq), repr(m.stepsize),
                    m.bits_ideal, m.bits_wire])
    return buf.getvalue()


def read_metrics_csv(path) -> list[IterationMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRIC_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return [IterationMetrics(int(r["t"]), float(r["loss"]), float(r["grad_norm_sq"]), float(r["error_norm_sq"]),
                             float(r["stepsize"]), int(r["bits_ideal"]), int(r["bits_wire"])) for r in rows]


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def summary_dict(config: RunConfig, result: RunResult) -> dict:
    return _jsonable({
        "config": config.to_dict(),
        "final": result.final,
        "iterations_completed": len(result.metrics),
        "verification": result.report.to_dict(),
        "metadata": {"created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "version": __version__},
    })


def write_run(out_dir, config: RunConfig, result: RunResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out / "summary.json").write_text(json.dumps(summary_dict(config, result), indent=2, sort_keys=True) + "\n")
    return out
