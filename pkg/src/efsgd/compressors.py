"""Contractive compressors and the diagnostics used to judge them.

A compressor C is delta-approximate when ||C(x) - x||^2 <= (1 - delta) ||x||^2.
All kinds here are deterministic except ``unbiased_scaled``, which needs a
``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import BlockPartition, DimensionError, make_partition, sign

KINDS = ("identity", "scaled_sign", "blockwise_scaled_sign", "top_k", "unbiased_scaled")


class CompressorError(ValueError):
    pass


class UndefinedDeltaError(ValueError):
    """Empirical delta of the zero vector is 0/0."""


@dataclass(frozen=True)
class CompressorSpec:
    """Tagged compressor description.

    ``dim`` pins the input length. ``k`` is used by ``top_k``, ``partition`` by
    ``blockwise_scaled_sign``; ``c`` and ``seed`` by ``unbiased_scaled``
    (``c=None`` means the largest factor the construction supports, ``1/dim``).
    """

    kind: str
    dim: int
    k: Optional[int] = None
    partition: Optional[BlockPartition] = None
    c: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise CompressorError(f"unknown compressor kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1:
            raise CompressorError("dim must be >= 1")
        if self.kind == "top_k":
            if self.k is None or not 1 <= self.k <= self.dim:
                raise CompressorError(f"top_k needs 1 <= k <= {self.dim}, got {self.k}")
        if self.kind == "blockwise_scaled_sign":
            if self.partition is None:
                raise CompressorError("blockwise_scaled_sign needs a partition")
            if self.partition.dim != self.dim:
                raise CompressorError(
                    f"partition covers {self.partition.dim} coordinates, compressor dim is {self.dim}"
                )
        if self.kind == "unbiased_scaled" and self.c is not None:
            # c * U is c-approximate only when d * c**2 <= c, see unbiased_round.
            if not 0.0 < self.c <= 1.0 / self.dim:
                raise CompressorError(
                    f"unbiased_scaled supports 0 < c <= 1/dim = {1.0 / self.dim:g}, got {self.c}"
                )

    @property
    def scale_factor(self) -> float:
        """Multiplier applied to U(v) for ``unbiased_scaled``."""
        return self.c if self.c is not None else 1.0 / self.dim

    def blocks(self) -> BlockPartition:
        """Partition the sign compressors operate on (a single block for scaled_sign)."""
        if self.kind == "blockwise_scaled_sign":
            return self.partition
        return make_partition([self.dim])


def _check(spec: CompressorSpec, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.dim,):
        raise DimensionError(f"{spec.kind} compressor expects shape ({spec.dim},), got {v.shape}")
    return v


def block_scales(v: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """Per-block ``||v_Gb||_1 / d_b``."""
    return np.add.reduceat(np.abs(v), partition.starts) / partition.sizes


def scaled_sign(v: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """Blockwise ``||v_Gb||_1 / d_b * sign(v_Gb)``; zero blocks map to zero."""
    scales = block_scales(v, partition)
    return np.repeat(scales, partition.sizes) * sign(v)


def top_k(v: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|v| keeps the lowest index among ties
    keep = np.argsort(-np.abs(v), kind="stable")[:k]
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out


def unbiased_round(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stochastic rounding of each coordinate onto {-s, +s}, s = ||v||_2.

    P(+s) = (1 + v_i/s)/2 so E[U(v)] = v, and ||U(v)||^2 = d s^2 = d ||v||^2
    surely. Hence E||c U(v) - v||^2 = (d c^2 - 2c + 1) ||v||^2, which is at
    most (1 - c) ||v||^2 exactly when c <= 1/d.
    """
    s = math.sqrt(float(np.dot(v, v)))
    if s == 0.0:
        return np.zeros_like(v)
    p_up = 0.5 * (1.0 + v / s)
    up = rng.random(v.shape[0]) < p_up
    return np.where(up, s, -s)


def compress(spec: CompressorSpec, v, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply the compressor described by ``spec`` to ``v``.

    ``rng`` is only consulted by ``unbiased_scaled``; when omitted a generator
    seeded from ``spec.seed`` is created, so repeated calls repeat the draw.
    """
    v = _check(spec, v)
    kind = spec.kind
    if kind == "identity":
        return v.copy()
    if kind in ("scaled_sign", "blockwise_scaled_sign"):
        return scaled_sign(v, spec.blocks())
    if kind == "top_k":
        return top_k(v, spec.k)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return spec.scale_factor * unbiased_round(v, rng)


def delta_lower_bound(spec: CompressorSpec) -> float:
    """Input-independent lower bound on delta for ``spec``."""
    kind = spec.kind
    if kind == "identity":
        return 1.0
    if kind == "scaled_sign":
        return 1.0 / spec.dim
    if kind == "blockwise_scaled_sign":
        return 1.0 / max(spec.partition.sizes)
    if kind == "top_k":
        return spec.k / spec.dim
    # holds in expectation only
    return spec.scale_factor


def phi(v, partition: BlockPartition) -> float:
    """min over blocks of ||v_b||_1^2 / (d_b ||v_b||_2^2), skipping all-zero blocks."""
    v = np.asarray(v, dtype=np.float64)
    partition.check(v)
    best = 1.0
    for sl, d_b in zip(partition.slices(), partition.sizes):
        blk = v[sl]
        l2sq = float(np.dot(blk, blk))
        if l2sq == 0.0:
            continue
        l1 = float(np.abs(blk).sum())
        best = min(best, l1 * l1 / (d_b * l2sq))
    return best


def blockwise_error_identity(v, partition: BlockPartition) -> float:
    """Closed form of ||C_B(v) - v||^2 as a sum of per-block terms."""
    v = np.asarray(v, dtype=np.float64)
    total = 0.0
    for sl, d_b in zip(partition.slices(), partition.sizes):
        blk = v[sl]
        l2sq = float(np.dot(blk, blk))
        if l2sq == 0.0:
            continue
        l1 = float(np.abs(blk).sum())
        total += (1.0 - l1 * l1 / (d_b * l2sq)) * l2sq
    return total


def empirical_delta(spec: CompressorSpec, v, rng: Optional[np.random.Generator] = None) -> float:
    v = _check(spec, v)
    l2sq = float(np.dot(v, v))
    if l2sq == 0.0:
        raise UndefinedDeltaError("empirical delta is undefined for the zero vector")
    r = compress(spec, v, rng) - v
    return 1.0 - float(np.dot(r, r)) / l2sq


def coefficient_of_variation(v, partition: BlockPartition) -> list[Optional[float]]:
    """Per-block population std of |v_i| divided by its mean; ``None`` for all-zero blocks."""
    v = np.asarray(v, dtype=np.float64)
    partition.check(v)
    out: list[Optional[float]] = []
    for sl in partition.slices():
        a = np.abs(v[sl])
        mean = float(a.mean())
        out.append(None if mean == 0.0 else float(a.std()) / mean)
    return out


def geometric_example(alpha: float, num_blocks: int, block_size: int = 1) -> tuple[np.ndarray, BlockPartition]:
    """Equal blocks of constant magnitude with c_b / c_{b+1} = alpha and alternating signs."""
    mags = alpha ** np.arange(num_blocks - 1, -1, -1, dtype=np.float64)
    v = np.repeat(mags, block_size)
    v[1::2] *= -1.0
    return v, make_partition([block_size] * num_blocks)


def geometric_delta(alpha: float, num_blocks: int) -> float:
    """Closed-form non-block delta of :func:`geometric_example`."""
    B = num_blocks
    return (1 + alpha) * (1 - alpha**B) / (B * (1 - alpha) * (1 + alpha**B))


CompressFn = Callable[[np.ndarray], np.ndarray]


def as_compress_fn(compressor, rng: Optional[np.random.Generator] = None) -> CompressFn:
    """Accept either a :class:`CompressorSpec` or a ready-made callable."""
    if isinstance(compressor, CompressorSpec):
        return lambda p: compress(compressor, p, rng)
    return compressor
