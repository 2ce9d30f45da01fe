"""Model, parallelism and workload configuration for a single MoE layer.

An MoE layer is described by its shape (experts, embedding and hidden sizes),
the parallel strategy it is sharded with (tensor parallel x expert parallel),
and the workload it receives (token count, routing seed, target imbalance).
All types are immutable and JSON-serializable with stable field names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Tuple


class ConfigurationError(ValueError):
    """Raised for invalid or mutually inconsistent configuration values."""


_VALID_DTYPE_BYTES = (1, 2, 4, 8)


@dataclass(frozen=True)
class ModelConfig:
    """Static shape of an MoE model.

    Field names follow the usual MoE conventions: ``L`` transformer layers,
    ``E`` experts with ``topk`` of them selected per token, ``N`` token
    embedding size, ``K`` expert hidden size, and ``dtype_bytes`` bytes per
    activation element.
    """

    L: int
    E: int
    topk: int
    N: int
    K: int
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        if self.L < 1:
            raise ConfigurationError(f"L must be >= 1, got {self.L}")
        if self.E < 1:
            raise ConfigurationError(f"E must be >= 1, got {self.E}")
        if not 1 <= self.topk <= self.E:
            raise ConfigurationError(
                f"topk must be in [1, E={self.E}], got {self.topk}"
            )
        if self.N < 1:
            raise ConfigurationError(f"N must be >= 1, got {self.N}")
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if self.dtype_bytes not in _VALID_DTYPE_BYTES:
            raise ConfigurationError(
                f"dtype_bytes must be one of {_VALID_DTYPE_BYTES}, got {self.dtype_bytes}"
            )

    def to_json_dict(self) -> dict:
        return {
            "L": self.L,
            "E": self.E,
            "topk": self.topk,
            "N": self.N,
            "K": self.K,
            "dtype_bytes": self.dtype_bytes,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            L=int(data["L"]),
            E=int(data["E"]),
            topk=int(data["topk"]),
            N=int(data["N"]),
            K=int(data["K"]),
            dtype_bytes=int(data.get("dtype_bytes", 2)),
        )


@dataclass(frozen=True)
class ParallelSpec:
    """Hybrid tensor/expert parallel layout over ``W = tp * ep`` ranks.

    Ranks are numbered with tensor parallelism innermost: rank ``r`` belongs
    to expert-parallel group ``r // tp`` and holds tensor shard ``r % tp``.
    """

    tp: int = 1
    ep: int = 1

    def __post_init__(self) -> None:
        if self.tp < 1:
            raise ConfigurationError(f"tp must be >= 1, got {self.tp}")
        if self.ep < 1:
            raise ConfigurationError(f"ep must be >= 1, got {self.ep}")

    @property
    def world_size(self) -> int:
        return self.tp * self.ep

    def ep_group_of_rank(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.tp

    def tp_index_of_rank(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.tp

    def ranks_in_ep_group(self, group: int) -> Tuple[int, ...]:
        if not 0 <= group < self.ep:
            raise ConfigurationError(f"ep group {group} out of range [0, {self.ep})")
        return tuple(range(group * self.tp, (group + 1) * self.tp))

    def same_tp_group(self, rank_a: int, rank_b: int) -> bool:
        return self.ep_group_of_rank(rank_a) == self.ep_group_of_rank(rank_b)

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise ConfigurationError(
                f"rank {rank} out of range [0, {self.world_size})"
            )

    def to_json_dict(self) -> dict:
        return {"tp": self.tp, "ep": self.ep}

    @classmethod
    def from_json_dict(cls, data: dict) -> "ParallelSpec":
        return cls(tp=int(data.get("tp", 1)), ep=int(data.get("ep", 1)))


@dataclass(frozen=True)
class WorkloadSpec:
    """Input workload: total token count, routing seed, target imbalance.

    ``std`` is the desired population standard deviation of the per-expert
    token fractions ``count(e) / (M * topk)``; 0 requests a perfectly even
    distribution.
    """

    M: int
    seed: int = 0
    std: float = 0.0

    def __post_init__(self) -> None:
        if self.M < 0:
            raise ConfigurationError(f"M must be >= 0, got {self.M}")
        if self.std < 0:
            raise ConfigurationError(f"std must be >= 0, got {self.std}")

    def to_json_dict(self) -> dict:
        return {"M": self.M, "seed": self.seed, "std": self.std}

    @classmethod
    def from_json_dict(cls, data: dict) -> "WorkloadSpec":
        return cls(
            M=int(data["M"]),
            seed=int(data.get("seed", 0)),
            std=float(data.get("std", 0.0)),
        )


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "mixtral-8x7b": ModelConfig(L=32, E=8, topk=2, N=4096, K=14336),
    "qwen2-moe": ModelConfig(L=24, E=64, topk=4, N=2048, K=1408),
    "phi-3.5-moe": ModelConfig(L=32, E=16, topk=2, N=4096, K=6400),
}


def model_preset(name: str) -> ModelConfig:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown model preset {name!r}; available: {sorted(MODEL_PRESETS)}"
        ) from None


def validate_sharding(model: ModelConfig, parallel: ParallelSpec) -> None:
    """Check that the model can be sharded with the given parallel spec."""
    if model.E % parallel.ep != 0:
        raise ConfigurationError(
            f"E={model.E} is not divisible by ep={parallel.ep}"
        )
    if model.K % parallel.tp != 0:
        raise ConfigurationError(
            f"K={model.K} is not divisible by tp={parallel.tp}"
        )


def experts_on_rank(
    model: ModelConfig, parallel: ParallelSpec, rank: int
) -> Tuple[int, ...]:
    """Expert ids hosted by ``rank`` (all ranks of an EP group share them)."""
    validate_sharding(model, parallel)
    group = parallel.ep_group_of_rank(rank)
    per_group = model.E // parallel.ep
    return tuple(range(group * per_group, (group + 1) * per_group))


def expert_placement(
    model: ModelConfig, parallel: ParallelSpec
) -> Dict[int, Tuple[int, ...]]:
    """Map each expert id to the ranks of its owning EP group.

    Experts are partitioned into ``ep`` contiguous groups of ``E/ep``; every
    rank of a group holds a ``K/tp`` hidden-dimension shard of each of the
    group's experts.
    """
    validate_sharding(model, parallel)
    per_group = model.E // parallel.ep
    placement: Dict[int, Tuple[int, ...]] = {}
    for e in range(model.E):
        group = e // per_group
        placement[e] = parallel.ranks_in_ep_group(group)
    return placement


def buffer_bytes(model: ModelConfig, m_tokens: int) -> int:
    """Per-device communication buffer size in bytes for ``m_tokens`` tokens.

    The buffer holds one embedding-sized slot per token and is shared across
    layers and experts, so it is counted once per device.
    """
    if m_tokens < 0:
        raise ConfigurationError(f"token count must be >= 0, got {m_tokens}")
    return model.dtype_bytes * m_tokens * model.N


def canonical_json(data: dict) -> str:
    """Stable, byte-reproducible JSON encoding used for all primary outputs."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
