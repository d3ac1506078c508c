"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py``; the lines are printed in the
terminal summary (see conftest.py).
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from efsgd.compressors import CompressorSpec, compress, delta_lower_bound
from efsgd.config import from_dict
from efsgd.core import equal_partition, make_partition
from efsgd.harness import comm_cost, metrics_csv, run_experiment
from efsgd.verify import (
    DISTRIBUTIONS,
    check_geometric,
    check_gradients,
    check_identity_equivalence,
    check_momentum_reduction,
    check_prop1,
    check_recurrences,
    contraction_violation,
    deterministic_specs,
    random_vectors,
    recurrence_config,
    recurrence_runs,
)
from efsgd.wire import HEADER_BITS, encode, message_from_vector, wire_compress


@pytest.fixture
def gate(acceptance_lines):
    """Run one criterion, log its line, return (passed, detail, seconds)."""

    def run(number: int, fn):
        t0 = time.perf_counter()
        passed, detail = fn()
        dt = time.perf_counter() - t0
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  ({dt:.1f}s)  {detail}"
        acceptance_lines.append((number, line))
        print(line)
        return passed, detail, dt

    return run


# 1. compressor contract

def criterion_1():
    rng = np.random.default_rng(2024)
    count, dim = 10_000, 32
    worst = {}
    pooled = []
    for dist in DISTRIBUTIONS:
        vecs = random_vectors(rng, count, dim, dist)
        for spec in deterministic_specs(dim, rng):
            worst[spec.kind] = max(worst.get(spec.kind, -np.inf),
                                   contraction_violation(spec, delta_lower_bound(spec), vecs))
        part = equal_partition(dim, 4)
        wspec = CompressorSpec("blockwise_scaled_sign", dim, partition=part)
        worst["wire"] = max(worst.get("wire", -np.inf),
                            contraction_violation(lambda v: wire_compress(v, part), delta_lower_bound(wspec), vecs))
        # the unbiased compressor contracts in expectation: one draw per vector, pooled
        uspec = CompressorSpec("unbiased_scaled", dim)
        for v in vecs:
            r = compress(uspec, v, rng) - v
            pooled.append(float(r @ r) / float(v @ v))
    pooled = np.asarray(pooled)
    c = delta_lower_bound(CompressorSpec("unbiased_scaled", dim))
    se = pooled.std(ddof=1) / np.sqrt(len(pooled))
    unbiased_ok = pooled.mean() <= (1 - c) + 3 * se
    ok = all(w <= 1e-12 for w in worst.values()) and unbiased_ok
    detail = ", ".join(f"{k} {w:+.1e}" for k, w in worst.items())
    return ok, (f"max ||C(v)-v||^2/||v||^2 - (1-delta): {detail}; "
                f"unbiased mean {pooled.mean():.4f} vs 1-c {1 - c:.4f} (+3se {3 * se:.4f})")


def test_criterion_1_compressor_contract(gate):
    passed, detail, dt = gate(1, criterion_1)
    assert passed, detail
    assert dt < 10.0, f"took {dt:.1f}s"


# 2. blockwise identity and geometric example

def criterion_2():
    p1, g = check_prop1(count=1000), check_geometric(0.5, 100)
    return p1.passed and g.passed, f"{p1.detail}; {g.detail}"


def test_criterion_2_blockwise_identity(gate):
    passed, detail, _ = gate(2, criterion_2)
    assert passed, detail


# 3. recurrences (and 5, which reuses the same runs)

@pytest.fixture(scope="module")
def verification_runs():
    t0 = time.perf_counter()
    runs = recurrence_runs()
    return runs, time.perf_counter() - t0


def test_criterion_3_recurrences(verification_runs, gate):
    runs, run_seconds = verification_runs
    assert len(runs) == 12

    def fn():
        checks = [c for c in check_recurrences(runs) if c.name != "error_bound"]
        return all(c.passed for c in checks), (f"12 runs in {run_seconds:.1f}s; "
                                               + "; ".join(c.detail for c in checks))

    passed, detail, dt = gate(3, fn)
    assert passed, detail
    assert run_seconds + dt < 30.0, f"took {run_seconds + dt:.1f}s"


# 4. identity equivalence and mu = 0 reduction

def criterion_4():
    a, b = check_identity_equivalence(500), check_momentum_reduction()
    return a.passed and b.passed, f"{a.detail}; {b.detail}"


def test_criterion_4_identity_equivalence(gate):
    passed, detail, _ = gate(4, criterion_4)
    assert passed, detail


# 5. error-norm bound

def test_criterion_5_error_bound(verification_runs, gate):
    runs, _ = verification_runs

    def fn():
        extra = [
            recurrence_config({"kind": "top_k", "k": 50}, {"kind": "constant", "gamma": 0.005}, mu, seed=s)
            for mu in (0.0, 0.9) for s in range(3)
        ] + [
            recurrence_config({"kind": "blockwise_scaled_sign", "blocks": 10}, {"kind": "increasing", "gamma": 5.0},
                              mu, wire=True) for mu in (0.0, 0.9)
        ]
        all_runs = list(runs) + [(cfg, run_experiment(cfg)) for cfg in extra]
        margins = [(res.report.error_bound_margin, res.report.error_bound) for _, res in all_runs]
        worst = min(m / b for m, b in margins)
        return all(m >= 0 for m, _ in margins), (
            f"{len(margins)} runs; min margin {min(m for m, _ in margins):.3e}; "
            f"min margin/bound {worst:.4f} (per-trajectory, G = max observed ||g||)")

    passed, detail, _ = gate(5, fn)
    assert passed, detail


# 6. communication accounting

def criterion_6():
    M, d, B = 7, 10**6, 100
    rows = (comm_cost("full_precision", M, d), comm_cost("majority_vote", M, d), comm_cost("dist_ef_block", M, d, B))
    rows_ok = rows == (64 * M * d, 2 * M * d, 2 * M * d + 64 * M * B) == (448_000_000, 14_000_000, 14_044_800)
    rng = np.random.default_rng(6)
    wire_ok = True
    for sizes in ([8] * 10, [64, 16, 8, 128], [1024] * 3, [8 * int(k) for k in rng.integers(1, 50, 20)]):
        part = make_partition(sizes)
        buf = encode(message_from_vector(rng.standard_normal(part.dim), part), part)
        wire_ok &= 8 * len(buf) - HEADER_BITS == part.dim + 32 * part.num_blocks
    reduction = rows[0] / rows[2]
    ok = rows_ok and wire_ok and reduction >= 31.9
    return ok, (f"table rows {rows} exact: {rows_ok}; byte-aligned payload = d + 32B (+{HEADER_BITS}-bit header): "
                f"{wire_ok}; reduction at M=7, d=1e6, B=100: {reduction:.4f}x (needs >= 31.9)")


def test_criterion_6_communication(gate):
    passed, detail, _ = gate(6, criterion_6)
    assert passed, detail


# 7. desk-scale convergence

QUAD = {"kind": "quadratic", "dim": 50, "kappa": 20, "sigma": 1.0}
LOGISTIC = {"kind": "logistic", "dim": 20, "n": 1000, "separation": 1.0}
BLOCKWISE = {"kind": "blockwise_scaled_sign", "blocks": 5}
TUNING_SEEDS = range(100, 105)


def _final(optimizer, compressor, problem, gamma, seed, *, workers=4, iterations=2000, batch_size=1):
    cfg = from_dict({
        "optimizer": optimizer, "workers": workers, "iterations": iterations, "seed": seed,
        "batch_size": batch_size, "verify": False, "problem": problem, "compressor": compressor,
        "schedule": {"kind": "constant", "gamma": gamma},
    })
    return run_experiment(cfg).final


def tune_sgd(problem, grid, key, **kw):
    """Stepsize minimizing full-precision SGD's mean final ``key`` over the tuning seeds."""
    scores = {g: np.mean([_final("sgd", {"kind": "identity"}, problem, g, s, **kw)[key] for s in TUNING_SEEDS])
              for g in grid}
    return min(scores, key=scores.get)


def criterion_7():
    eta_q = tune_sgd(QUAD, (0.001, 0.0015, 0.002, 0.003, 0.004, 0.005), "grad_norm_sq")
    seeds = range(20)
    sgd = np.mean([_final("sgd", {"kind": "identity"}, QUAD, eta_q, s)["expected_grad_norm_sq"] for s in seeds])
    ef = np.mean([_final("dist_ef", BLOCKWISE, QUAD, eta_q, s)["expected_grad_norm_sq"] for s in seeds])
    quad_gap = ef / sgd - 1

    kw = {"iterations": 1000, "batch_size": 8}
    eta_l = tune_sgd(LOGISTIC, (0.003, 0.01, 0.03, 0.1, 0.3, 1.0), "loss", **kw)
    lseeds = range(10)
    l_sgd = np.mean([_final("sgd", {"kind": "identity"}, LOGISTIC, eta_l, s, **kw)["loss"] for s in lseeds])
    l_ef = np.mean([_final("dist_ef", BLOCKWISE, LOGISTIC, eta_l, s, **kw)["loss"] for s in lseeds])
    log_gap = abs(l_ef - l_sgd) / abs(l_sgd)
    ok = quad_gap <= 0.10 and log_gap <= 0.01
    return ok, (f"quadratic eta={eta_q}: E||grad F(x_o)||^2 EF {ef:.4g} vs SGD {sgd:.4g} ({quad_gap:+.2%}); "
                f"logistic eta={eta_l}: loss EF {l_ef:.5f} vs SGD {l_sgd:.5f} ({log_gap:.3%})")


@pytest.mark.slow
def test_criterion_7_convergence(gate):
    passed, detail, dt = gate(7, criterion_7)
    assert passed, detail
    assert dt < 120.0, f"took {dt:.1f}s"


# 8. variance reduction in M

def criterion_8():
    means, halfwidths = [], []
    for M in (1, 2, 4, 8):
        v = np.array([_final("dist_ef", BLOCKWISE, QUAD, 0.002, s, workers=M)["grad_norm_sq"] for s in range(20)])
        means.append(v.mean())
        halfwidths.append(1.96 * v.std(ddof=1) / np.sqrt(len(v)))
    ok = all(m2 <= m1 or m2 - h2 <= m1 + h1
             for m1, h1, m2, h2 in zip(means, halfwidths, means[1:], halfwidths[1:]))
    detail = ", ".join(f"M={M}: {m:.3e}+-{h:.1e}" for M, m, h in zip((1, 2, 4, 8), means, halfwidths))
    return ok, f"mean final ||grad F||^2 (95% CI) {detail}"


@pytest.mark.slow
def test_criterion_8_variance_reduction(gate):
    passed, detail, _ = gate(8, criterion_8)
    assert passed, detail


# 9. gradient fidelity

def criterion_9():
    c = check_gradients(points=5, tol=1e-5)
    return c.passed, c.detail


def test_criterion_9_gradient_fidelity(gate):
    passed, detail, _ = gate(9, criterion_9)
    assert passed, detail


# 10. determinism

DETERMINISM_CONFIGS = [
    {"optimizer": "dist_ef", "compressor": BLOCKWISE, "momentum": 0.9},
    {"optimizer": "dist_ef", "compressor": BLOCKWISE, "wire": True, "weight_decay": 1e-3},
    {"optimizer": "dist_ef", "compressor": {"kind": "unbiased_scaled"}},
    {"optimizer": "dist_ef", "compressor": {"kind": "top_k", "k": 5}, "schedule": {"kind": "decreasing", "gamma": 5}},
    {"optimizer": "signum", "compressor": {"kind": "identity"}, "momentum": 0.9},
    {"optimizer": "ef_sgd", "workers": 1, "compressor": {"kind": "scaled_sign"}},
    {"optimizer": "dist_ef", "compressor": {"kind": "blockwise_scaled_sign", "blocks": "problem"}, "batch_size": 8,
     "problem": {"kind": "mlp", "dim": 6, "hidden": [8], "n": 128}},
    {"optimizer": "sgd", "compressor": {"kind": "identity"}, "batch_size": 8, "problem": LOGISTIC},
]


def criterion_10():
    same = 0
    for over in DETERMINISM_CONFIGS:
        raw = {"workers": 3, "iterations": 200, "seed": 7, "problem": QUAD,
               "schedule": {"kind": "constant", "gamma": 0.002}, **over}
        a = metrics_csv(run_experiment(from_dict(raw)).metrics).encode()
        b = metrics_csv(run_experiment(from_dict(raw)).metrics).encode()
        same += a == b
    return same == len(DETERMINISM_CONFIGS), f"{same}/{len(DETERMINISM_CONFIGS)} configs gave bitwise-identical CSVs"


def test_criterion_10_determinism(gate):
    passed, detail, _ = gate(10, criterion_10)
    assert passed, detail

