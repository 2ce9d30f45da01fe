"""Configuration, placement, and buffer-size tests."""

import json

import pytest
from hypothesis import given, strategies as st

from moepipe import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    MODEL_PRESETS,
    buffer_bytes,
    expert_placement,
    experts_on_rank,
    model_preset,
    validate_sharding,
)

MIB = 1024 * 1024


def test_presets_match_published_shapes():
    mixtral = model_preset("mixtral-8x7b")
    assert (mixtral.L, mixtral.E, mixtral.topk, mixtral.N, mixtral.K) == (
        32, 8, 2, 4096, 14336,
    )
    qwen = model_preset("qwen2-moe")
    assert (qwen.L, qwen.E, qwen.topk, qwen.N, qwen.K) == (24, 64, 4, 2048, 1408)
    phi = model_preset("phi-3.5-moe")
    assert (phi.L, phi.E, phi.topk, phi.N, phi.K) == (32, 16, 2, 4096, 6400)
    for preset in MODEL_PRESETS.values():
        assert preset.dtype_bytes == 2


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        model_preset("mixtral-9x9b")


@pytest.mark.parametrize(
    "field,value",
    [("L", 0), ("E", 0), ("topk", 0), ("topk", 9), ("N", 0), ("K", 0), ("dtype_bytes", 3)],
)
def test_model_invariants(field, value):
    base = dict(L=1, E=8, topk=2, N=16, K=32, dtype_bytes=2)
    base[field] = value
    with pytest.raises(ConfigurationError):
        ModelConfig(**base)


def test_world_size_is_tp_times_ep():
    par = ParallelSpec(tp=4, ep=2)
    assert par.world_size == 8
    assert ParallelSpec(tp=1, ep=1).world_size == 1


def test_placement_two_gpu_example():
    # Two experts per device, expert-parallel over two ranks.
    model = ModelConfig(L=1, E=4, topk=2, N=8, K=8)
    placement = expert_placement(model, ParallelSpec(tp=1, ep=2))
    assert placement == {0: (0,), 1: (0,), 2: (1,), 3: (1,)}


def test_placement_degenerate_single_group():
    model = ModelConfig(L=1, E=8, topk=2, N=8, K=8)
    placement = expert_placement(model, ParallelSpec(tp=1, ep=1))
    assert placement == {e: (0,) for e in range(8)}


def test_placement_hybrid_hand_enumeration():
    # Independent oracle: experts go to contiguous groups of E/ep, each
    # spanning tp consecutive ranks.
    model = ModelConfig(L=1, E=8, topk=2, N=8, K=8)
    par = ParallelSpec(tp=2, ep=4)
    expected = {}
    for e in range(8):
        group = e // 2
        expected[e] = (2 * group, 2 * group + 1)
    assert expert_placement(model, par) == expected


def test_placement_divisibility_errors():
    with pytest.raises(ConfigurationError):
        expert_placement(ModelConfig(L=1, E=6, topk=2, N=8, K=8), ParallelSpec(tp=1, ep=4))
    with pytest.raises(ConfigurationError):
        validate_sharding(ModelConfig(L=1, E=4, topk=2, N=8, K=6), ParallelSpec(tp=4, ep=1))


@given(
    ep=st.integers(1, 8),
    tp=st.integers(1, 4),
    per_group=st.integers(1, 4),
)
def test_placement_totality(ep, tp, per_group):
    model = ModelConfig(L=1, E=ep * per_group, topk=1, N=8, K=tp * 4)
    par = ParallelSpec(tp=tp, ep=ep)
    placement = expert_placement(model, par)
    assert set(placement) == set(range(model.E))
    covered_ranks = set()
    for ranks in placement.values():
        assert len(ranks) == tp
        covered_ranks.update(ranks)
    assert covered_ranks == set(range(par.world_size))
    for rank in range(par.world_size):
        owned = [e for e, ranks in placement.items() if rank in ranks]
        assert owned == list(experts_on_rank(model, par, rank))


@pytest.mark.parametrize(
    "preset,m_tokens,expected_mib",
    [
        ("mixtral-8x7b", 4096, 32),
        ("mixtral-8x7b", 8192, 64),
        ("qwen2-moe", 4096, 16),
        ("qwen2-moe", 8192, 32),
        ("phi-3.5-moe", 4096, 32),
        ("phi-3.5-moe", 8192, 64),
    ],
)
def test_buffer_bytes_published_table(preset, m_tokens, expected_mib):
    model = model_preset(preset)
    assert buffer_bytes(model, m_tokens) == expected_mib * MIB


def test_buffer_bytes_empty_and_formula():
    model = model_preset("mixtral-8x7b")
    assert buffer_bytes(model, 0) == 0
    assert buffer_bytes(model, 7) == 2 * 7 * 4096
    with pytest.raises(ConfigurationError):
        buffer_bytes(model, -1)


def test_json_field_names_are_stable():
    model = ModelConfig(L=2, E=4, topk=2, N=8, K=16, dtype_bytes=4)
    assert model.to_json_dict() == {
        "L": 2, "E": 4, "topk": 2, "N": 8, "K": 16, "dtype_bytes": 4,
    }
    assert ModelConfig.from_json_dict(json.loads(json.dumps(model.to_json_dict()))) == model
    par = ParallelSpec(tp=2, ep=4)
    assert par.to_json_dict() == {"tp": 2, "ep": 4}
    assert ParallelSpec.from_json_dict(par.to_json_dict()) == par
    wl = WorkloadSpec(M=128, seed=3, std=0.25)
    assert wl.to_json_dict() == {"M": 128, "seed": 3, "std": 0.25}
    assert WorkloadSpec.from_json_dict(wl.to_json_dict()) == wl


def test_workload_invariants():
    with pytest.raises(ConfigurationError):
        WorkloadSpec(M=-1)
    with pytest.raises(ConfigurationError):
        WorkloadSpec(M=1, std=-0.1)
