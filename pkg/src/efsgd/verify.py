"""Self-contained invariant suite behind ``efsgd verify``."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .compressors import (
    CompressorSpec,
    blockwise_error_identity,
    compress,
    delta_lower_bound,
    empirical_delta,
    geometric_delta,
    geometric_example,
    phi,
)
from .config import from_dict
from .core import BlockPartition, equal_partition, make_partition
from .harness import RECURRENCE_TOL, comm_cost, run_experiment
from .problems import GradOracle, make_logistic, make_mlp, make_quadratic
from .wire import (
    HEADER_BITS,
    decode,
    encode,
    message_from_vector,
    payload_bits,
    reconstruct,
    wire_compress,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_vectors(rng: np.random.Generator, count: int, dim: int, dist: str) -> np.ndarray:
    """Rows drawn from ``gaussian``, ``heavy`` (Student t, 1.5 dof) or ``sparse`` (90% zeros)."""
    if dist == "gaussian":
        return rng.standard_normal((count, dim))
    if dist == "heavy":
        return rng.standard_t(1.5, size=(count, dim))
    if dist == "sparse":
        v = rng.standard_normal((count, dim))
        v[rng.random((count, dim)) < 0.9] = 0.0
        # keep every row nonzero
        v[np.arange(count), rng.integers(0, dim, count)] = rng.standard_normal(count) + 3.0
        return v
    raise ValueError(dist)


DISTRIBUTIONS = ("gaussian", "heavy", "sparse")


def random_partition(rng: np.random.Generator, dim: int) -> BlockPartition:
    cuts = np.sort(rng.choice(np.arange(1, dim), size=rng.integers(0, min(dim - 1, 8) + 1), replace=False))
    edges = np.concatenate([[0], cuts, [dim]])
    return make_partition(np.diff(edges).tolist())


def deterministic_specs(dim: int, rng: np.random.Generator) -> list[CompressorSpec]:
    return [
        CompressorSpec("identity", dim),
        CompressorSpec("scaled_sign", dim),
        CompressorSpec("blockwise_scaled_sign", dim, partition=random_partition(rng, dim)),
        CompressorSpec("top_k", dim, k=max(1, dim // 4)),
    ]


def contraction_violation(spec_or_fn, delta_lb: float, vectors: np.ndarray, tol: float = 1e-12) -> float:
    """Largest ||C(v) - v||^2 / ||v||^2 - (1 - delta_lb); must stay <= tol."""
    fn = spec_or_fn if callable(spec_or_fn) else (lambda v: compress(spec_or_fn, v))
    worst = -np.inf
    for v in vectors:
        l2 = float(v @ v)
        if l2 == 0.0:
            continue
        r = fn(v) - v
        worst = max(worst, float(r @ r) / l2 - (1.0 - delta_lb))
    return worst


def check_contraction(count: int = 2000, dim: int = 64, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_by = {}
    for dist in DISTRIBUTIONS:
        vecs = random_vectors(rng, count, dim, dist)
        for spec in deterministic_specs(dim, rng):
            key = spec.kind
            worst_by[key] = max(worst_by.get(key, -np.inf), contraction_violation(spec, delta_lower_bound(spec), vecs))
        part = random_partition(rng, dim)
        wspec = CompressorSpec("blockwise_scaled_sign", dim, partition=part)
        worst_by["wire_blockwise"] = max(
            worst_by.get("wire_blockwise", -np.inf),
            contraction_violation(lambda v: wire_compress(v, part), delta_lower_bound(wspec), vecs),
        )
    ok = all(w <= 1e-12 for w in worst_by.values())
    detail = ", ".join(f"{k}: {w:+.2e}" for k, w in worst_by.items())
    return CheckResult("compressor_contraction", ok, f"max excess over (1-delta) by kind: {detail}")


def unbiased_stats(v: np.ndarray, c: Optional[float], draws: int, seed: int):
    """Per-coordinate z-scores of the sample mean of U(v), and mean/stderr of ||cU(v) - v||^2/||v||^2."""
    spec = CompressorSpec("unbiased_scaled", len(v), c=c)
    rng = np.random.default_rng(seed)
    c = spec.scale_factor
    U = np.stack([compress(spec, v, rng) / c for _ in range(draws)])
    mean = U.mean(axis=0)
    se = U.std(axis=0, ddof=1) / np.sqrt(draws)
    z = np.abs(mean - v) / np.where(se > 0, se, np.inf)
    rel = np.sum((c * U - v) ** 2, axis=1) / float(v @ v)
    return z, float(rel.mean()), float(rel.std(ddof=1) / np.sqrt(draws)), c


def check_unbiased(draws: int = 20_000, seed: int = 1) -> CheckResult:
    v = np.random.default_rng(seed).standard_normal(8)
    z, rel_mean, rel_se, c = unbiased_stats(v, None, draws, seed)
    ok = bool(np.all(z <= 3.0)) and rel_mean <= (1.0 - c) + 3.0 * rel_se
    return CheckResult("unbiased_expectation", ok,
                       f"max |z| of mean U(v) = {z.max():.2f}; E rel err {rel_mean:.4f} vs 1-c = {1 - c:.4f}")


def check_prop1(count: int = 1000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    phi_gap = np.inf
    for _ in range(count):
        dim = int(rng.integers(2, 80))
        part = random_partition(rng, dim)
        v = random_vectors(rng, 1, dim, DISTRIBUTIONS[int(rng.integers(0, 3))])[0]
        spec = CompressorSpec("blockwise_scaled_sign", dim, partition=part)
        r = compress(spec, v) - v
        lhs = float(r @ r)
        rhs = blockwise_error_identity(v, part)
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), float(v @ v) * 1e-300, 1e-300))
        phi_gap = min(phi_gap, empirical_delta(spec, v) - phi(v, part) + 1e-12,
                      phi(v, part) - 1.0 / max(part.sizes) + 1e-12)
    ok = worst <= 1e-10 and phi_gap >= 0
    return CheckResult("prop1_identity", ok, f"max relative identity error {worst:.2e}; phi ordering slack {phi_gap:.2e}")


def check_geometric(alpha: float = 0.5, num_blocks: int = 100) -> CheckResult:
    v, part = geometric_example(alpha, num_blocks)
    p = phi(v, part)
    emp = empirical_delta(CompressorSpec("scaled_sign", len(v)), v)
    closed = geometric_delta(alpha, num_blocks)
    ok = p == 1.0 and abs(emp - closed) <= 1e-9
    return CheckResult("geometric_example", ok, f"phi = {p!r}; non-block delta {emp:.12f} vs closed form {closed:.12f}")


RECURRENCE_COMPRESSORS = (
    {"kind": "scaled_sign"},
    {"kind": "blockwise_scaled_sign", "blocks": 10},
)
RECURRENCE_SCHEDULES = (
    {"kind": "constant", "gamma": 0.005},
    {"kind": "decreasing", "gamma": 5.0},
    {"kind": "increasing", "gamma": 5.0},
)


def recurrence_config(compressor: dict, schedule: dict, mu: float, *, seed: int = 0, dim: int = 100,
                      workers: int = 4, iterations: int = 200, wire: bool = False):
    return from_dict({
        "optimizer": "dist_ef", "workers": workers, "iterations": iterations, "seed": seed,
        "momentum": mu, "batch_size": 1, "wire": wire,
        "problem": {"kind": "quadratic", "dim": dim, "kappa": 10.0, "sigma": 1.0},
        "compressor": compressor, "schedule": schedule,
    })


def recurrence_runs(fault_inject: float = 0.0, wire: bool = False):
    """The 12 verification runs: compressor x {mu = 0, 0.9} x schedule."""
    out = []
    for comp in RECURRENCE_COMPRESSORS:
        for mu in (0.0, 0.9):
            for sched in RECURRENCE_SCHEDULES:
                cfg = recurrence_config(comp, sched, mu, wire=wire)
                res = run_experiment(cfg, fault_inject=fault_inject)
                out.append((cfg, res))
    return out


def _label(cfg) -> str:
    return f"{cfg.compressor['kind']}/mu={cfg.momentum}/{cfg.schedule.kind}"


def check_recurrences(runs) -> list[CheckResult]:
    l1, l4, vz, eb = [], [], [], []
    for cfg, res in runs:
        rep = res.report
        if rep.lemma1_residual is not None:
            l1.append((rep.lemma1_residual, _label(cfg)))
        l4.append((rep.lemma4_residual, _label(cfg)))
        if rep.virtual_iterate_residual is not None:
            vz.append((rep.virtual_iterate_residual, _label(cfg)))
        eb.append((rep.error_bound_margin, _label(cfg)))
    results = []
    for name, vals in (("lemma1_recurrence", l1), ("lemma4_recurrence", l4), ("virtual_iterate", vz)):
        worst, where = max(vals)
        results.append(CheckResult(name, worst <= RECURRENCE_TOL,
                                   f"max relative residual {worst:.2e} ({where}) over {len(vals)} runs"))
    worst_margin, where = min(eb)
    results.append(CheckResult("error_bound", worst_margin >= 0,
                               f"min margin {worst_margin:.3e} ({where}); per-trajectory check, G from trajectory"))
    return results


def check_identity_equivalence(iterations: int = 500) -> CheckResult:
    base = {
        "workers": 3, "iterations": iterations, "seed": 3, "batch_size": 2,
        "problem": {"kind": "quadratic", "dim": 20, "kappa": 10.0, "sigma": 1.0},
        "compressor": {"kind": "identity"},
    }
    worst = 0.0
    for sched in RECURRENCE_SCHEDULES[:1] + ({"kind": "decreasing", "gamma": 0.5},):
        ef = run_experiment(from_dict({**base, "optimizer": "dist_ef", "schedule": sched}), keep_trace=True)
        sgd = run_experiment(from_dict({**base, "optimizer": "sgd", "schedule": sched}), keep_trace=True)
        for t in ef.trace.x_tilde:
            worst = max(worst, float(np.max(np.abs(ef.trace.x_tilde[t] - sgd.trace.x_tilde[t]))))
    return CheckResult("identity_equivalence", worst <= 1e-12, f"max per-coordinate gap {worst:.2e} over {iterations} steps")


def check_momentum_reduction() -> CheckResult:
    cfg = recurrence_config({"kind": "blockwise_scaled_sign", "blocks": 10}, {"kind": "decreasing", "gamma": 5.0}, 0.0)
    a = run_experiment(cfg, momentum_path=True, keep_trace=True)
    b = run_experiment(cfg, momentum_path=False, keep_trace=True)
    same = np.array_equal(a.x_final, b.x_final) and all(
        np.array_equal(a.trace.x_tilde[t], b.trace.x_tilde[t]) for t in a.trace.x_tilde)
    return CheckResult("momentum_zero_reduction", bool(same), "mu=0 momentum path bitwise equal to plain path" if same
                       else "mu=0 momentum path differs from plain path")


def check_comm_cost() -> CheckResult:
    M, d, B = 7, 10**6, 100
    rows = {
        "full_precision": comm_cost("full_precision", M, d),
        "majority_vote": comm_cost("majority_vote", M, d),
        "dist_ef_block": comm_cost("dist_ef_block", M, d, B),
    }
    ok = rows == {"full_precision": 448_000_000, "majority_vote": 14_000_000, "dist_ef_block": 14_044_800}
    # near-32x holds whenever the scale overhead 64MB/(2Md) is below 1e-3
    worst = min(
        comm_cost("full_precision", m, dd) / comm_cost("dist_ef_block", m, dd, b)
        for m in (1, 7, 16) for dd in (10**5, 10**6, 10**7) for b in (1, 30, 100, 300)
        if 64 * m * b / (2 * m * dd) < 1e-3
    )
    ok = ok and worst >= 31.9
    example = rows["full_precision"] / rows["dist_ef_block"]
    return CheckResult("comm_cost", ok, f"table rows for M=7,d=1e6,B=100: {rows}; reduction there {example:.3f}x; "
                                        f"min reduction when 64MB/(2Md) < 1e-3: {worst:.3f}x")


def check_wire(count: int = 2000, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dim = int(rng.integers(1, 100))
        part = random_partition(rng, dim) if dim > 1 else make_partition([1])
        msg = message_from_vector(rng.standard_normal(dim), part, int(rng.integers(0, 2**32)),
                                  int(rng.integers(0, 2**63)))
        buf = encode(msg, part)
        if decode(buf, part) != msg or encode(decode(buf, part), part) != buf:
            return CheckResult("wire_roundtrip", False, f"round trip failed for partition {part.sizes}")
        if 8 * len(buf) != HEADER_BITS + payload_bits(part):
            return CheckResult("wire_roundtrip", False, "payload size mismatch")
    part = equal_partition(800, 100)
    aligned = payload_bits(part) == 800 + 32 * 100
    return CheckResult("wire_roundtrip", aligned,
                       f"{count} random messages round-trip; byte-aligned payload = d + 32B: {aligned}")


def check_wire_mode(fault_inject: float = 0.0) -> CheckResult:
    worst = 0.0
    for mu in (0.0, 0.9):
        cfg = recurrence_config({"kind": "blockwise_scaled_sign", "blocks": 10}, {"kind": "increasing", "gamma": 5.0},
                                mu, wire=True)
        rep = run_experiment(cfg, fault_inject=fault_inject).report
        worst = max(worst, rep.lemma4_residual)
    return CheckResult("wire_mode_recurrence", worst <= RECURRENCE_TOL,
                       f"max relative residual with float32 scales on the wire {worst:.2e}")


def fd_gradient(loss: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    g = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        g[i] = (loss(x + step) - loss(x - step)) / (2 * h)
    return g


def gradient_error(oracle: GradOracle, x: np.ndarray, h: float = 1e-5) -> float:
    """max_i |analytic_i - fd_i| / max_i |fd_i|, normwise so near-zero coordinates do not blow up."""
    fd = fd_gradient(oracle.loss, x, h)
    return float(np.max(np.abs(oracle.exact_gradient(x) - fd)) / max(np.max(np.abs(fd)), 1e-300))


def gradient_suite(seed: int = 5) -> dict[str, GradOracle]:
    return {
        "quadratic": make_quadratic(20, 10.0, 1.0, seed)[1],
        "logistic": make_logistic(200, 10, seed)[1],
        "mlp": make_mlp((6, 8, 2), 100, seed)[1],
    }


def check_gradients(points: int = 5, seed: int = 5, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = {}
    for name, oracle in gradient_suite(seed).items():
        worst[name] = max(gradient_error(oracle, oracle.x0 + rng.standard_normal(oracle.dim))
                          for _ in range(points))
    ok = max(worst.values()) <= tol
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("gradient_fidelity", ok, f"max relative error vs central differences: {detail}")


def run_suite(fault_inject: float = 0.0) -> list[CheckResult]:
    steps: list[Callable[[], list[CheckResult] | CheckResult]] = [
        check_contraction,
        check_unbiased,
        check_prop1,
        check_geometric,
        lambda: check_recurrences(recurrence_runs(fault_inject)),
        check_identity_equivalence,
        check_momentum_reduction,
        check_comm_cost,
        check_wire,
        lambda: check_wire_mode(fault_inject),
        check_gradients,
    ]
    results: list[CheckResult] = []
    for step in steps:
        t0 = time.perf_counter()
        out = step()
        out = out if isinstance(out, list) else [out]
        dt = (time.perf_counter() - t0) / len(out)
        results.extend(replace(r, seconds=dt) for r in out)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
