"""Dense vector helpers and contiguous block partitions."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

# Every vector in a run (iterate, gradients, errors, momenta) is a flat float64 array.
ParamVector = np.ndarray


class PartitionError(ValueError):
    """Raised for an empty partition or a non-positive block size."""


class DimensionError(ValueError):
    """Raised when vector lengths disagree with each other or with a spec."""


@dataclass(frozen=True)
class BlockPartition:
    """Ordered, contiguous blocks covering ``range(dim)``."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.sizes) == 0:
            raise PartitionError("partition needs at least one block")
        for s in self.sizes:
            if int(s) != s or s < 1:
                raise PartitionError(f"block sizes must be positive integers, got {s!r}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        """Start index of every block plus the total length as a final entry."""
        return (0, *np.cumsum(self.sizes).tolist())

    @cached_property
    def starts(self) -> np.ndarray:
        return np.asarray(self.offsets[:-1])

    @property
    def dim(self) -> int:
        return sum(self.sizes)

    @property
    def num_blocks(self) -> int:
        return len(self.sizes)

    def ranges(self) -> list[range]:
        off = self.offsets
        return [range(off[b], off[b + 1]) for b in range(self.num_blocks)]

    def slices(self) -> list[slice]:
        off = self.offsets
        return [slice(off[b], off[b + 1]) for b in range(self.num_blocks)]

    def block_ids(self) -> np.ndarray:
        """Block index of every coordinate, shape ``(dim,)``."""
        return np.repeat(np.arange(self.num_blocks), self.sizes)

    def check(self, v: np.ndarray) -> None:
        if v.shape != (self.dim,):
            raise DimensionError(f"vector of shape {v.shape} does not match partition of dim {self.dim}")


def make_partition(sizes: Sequence[int]) -> BlockPartition:
    return BlockPartition(tuple(sizes))


def equal_partition(dim: int, num_blocks: int) -> BlockPartition:
    """Split ``dim`` into ``num_blocks`` nearly equal blocks (larger blocks first)."""
    if num_blocks < 1 or num_blocks > dim:
        raise PartitionError(f"cannot split dim={dim} into {num_blocks} nonempty blocks")
    base, extra = divmod(dim, num_blocks)
    return make_partition([base + 1] * extra + [base] * (num_blocks - extra))


def norms(v: np.ndarray) -> tuple[float, float]:
    """Return ``(sum |v_i|, sum v_i**2)``."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.abs(v).sum()), float(np.dot(v, v))


def as_vector(v, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a flat vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected length {dim}, got {arr.shape[0]}")
    return arr


def sign(v: np.ndarray) -> np.ndarray:
    """Sign with sign(0) = +1, so every output is in {-1, +1}."""
    return np.where(v >= 0, 1.0, -1.0)
