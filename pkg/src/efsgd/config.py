"""Run configuration: JSON schema, validation, and dotted-path overrides.

A run config is a JSON object::

    {
      "optimizer": "dist_ef" | "sgd" | "signsgd" | "signum" | "ef_sgd",
      "workers": 4, "iterations": 500, "seed": 0, "batch_size": 8,
      "momentum": 0.0, "weight_decay": 0.0, "wire": false, "verify": true,
      "problem":    {"kind": "quadratic", "dim": 10, "kappa": 10, "sigma": 0.0},
      "compressor": {"kind": "blockwise_scaled_sign", "blocks": 5},
      "schedule":   {"kind": "constant", "gamma": 0.05}
    }

``compressor.blocks`` may be an integer (that many near-equal blocks), a
list of block sizes, or ``"problem"`` for the problem's natural partition.
``problem.seed`` defaults to the run seed.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .compressors import CompressorSpec, KINDS as COMPRESSOR_KINDS
from .core import BlockPartition, equal_partition, make_partition
from .optim import ScheduleSpec
from .problems import ProblemSpec

OPTIMIZERS = ("dist_ef", "sgd", "signsgd", "signum", "ef_sgd")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    compressor: dict
    schedule: ScheduleSpec
    optimizer: str = "dist_ef"
    workers: int = 1
    iterations: int = 100
    seed: int = 0
    batch_size: int = 1
    momentum: float = 0.0
    weight_decay: float = 0.0
    wire: bool = False
    verify: bool = True

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must satisfy 0 <= mu < 1, got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        kind = self.compressor.get("kind")
        if kind not in COMPRESSOR_KINDS:
            raise ConfigError(f"unknown compressor kind {kind!r}")
        if self.optimizer == "ef_sgd" and (self.workers != 1 or self.momentum or self.weight_decay):
            raise ConfigError("ef_sgd is single-machine: workers=1, momentum=0, weight_decay=0")
        if self.wire and kind not in ("scaled_sign", "blockwise_scaled_sign"):
            raise ConfigError("wire mode carries sign messages; use a scaled_sign compressor")

    def build_compressor(self, dim: int, natural: BlockPartition) -> CompressorSpec:
        c = self.compressor
        kind = c["kind"]
        try:
            if kind == "blockwise_scaled_sign":
                return CompressorSpec(kind, dim, partition=_partition(c.get("blocks", "problem"), dim, natural))
            if kind == "top_k":
                k = c.get("k")
                if k is None and "fraction" in c:
                    k = max(1, int(round(c["fraction"] * dim)))
                return CompressorSpec(kind, dim, k=k)
            if kind == "unbiased_scaled":
                return CompressorSpec(kind, dim, c=c.get("c"), seed=int(c.get("seed", self.seed)))
            return CompressorSpec(kind, dim)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        sched = {"kind": self.schedule.kind, "gamma": self.schedule.gamma}
        if self.schedule.kind == "hybrid_warmup":
            sched["warmup"] = self.schedule.warmup
        return {
            "optimizer": self.optimizer,
            "workers": self.workers,
            "iterations": self.iterations,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "wire": self.wire,
            "verify": self.verify,
            "problem": self.problem.to_dict(),
            "compressor": copy.deepcopy(self.compressor),
            "schedule": sched,
        }


def _partition(blocks: Any, dim: int, natural: BlockPartition) -> BlockPartition:
    if blocks == "problem":
        return natural
    if isinstance(blocks, int):
        return equal_partition(dim, blocks)
    if isinstance(blocks, list):
        part = make_partition(blocks)
        if part.dim != dim:
            raise ConfigError(f"block sizes sum to {part.dim}, problem dimension is {dim}")
        return part
    raise ConfigError(f"cannot interpret compressor.blocks={blocks!r}")


_TOP_KEYS = {"optimizer", "workers", "iterations", "seed", "batch_size", "momentum", "weight_decay",
             "wire", "verify", "problem", "compressor", "schedule"}


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = copy.deepcopy(raw)
    seed = int(raw.get("seed", 0))
    try:
        prob = dict(raw.get("problem", {}))
        prob.setdefault("seed", seed)
        if "hidden" in prob:
            prob["hidden"] = tuple(prob["hidden"])
        problem = ProblemSpec(**prob)
        sched = dict(raw.get("schedule", {}))
        schedule = ScheduleSpec(kind=sched.pop("kind", "constant"), gamma=float(sched.pop("gamma", 0.05)),
                                warmup=int(sched.pop("warmup", 0)))
        if sched:
            raise ConfigError(f"unknown schedule keys: {sorted(sched)}")
        return RunConfig(
            problem=problem,
            compressor=dict(raw.get("compressor", {"kind": "identity"})),
            schedule=schedule,
            optimizer=raw.get("optimizer", "dist_ef"),
            workers=int(raw.get("workers", 1)),
            iterations=int(raw.get("iterations", 100)),
            seed=seed,
            batch_size=int(raw.get("batch_size", 1)),
            momentum=float(raw.get("momentum", 0.0)),
            weight_decay=float(raw.get("weight_decay", 0.0)),
            wire=bool(raw.get("wire", False)),
            verify=bool(raw.get("verify", True)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_value(text: str) -> Any:
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested dict (copy returned)."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_dotted(out, key.strip(), parse_value(value))
    return out


def set_dotted(raw: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot descend into non-object key {p!r} in {key!r}")
        node = nxt
    node[parts[-1]] = value


def load_raw(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_config(path, overrides: Optional[list[str]] = None) -> RunConfig:
    return from_dict(apply_overrides(load_raw(path), overrides or []))
