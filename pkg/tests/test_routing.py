"""Routing generator tests: conservation, imbalance control, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moepipe import (
    ConfigurationError,
    InfeasibleStdError,
    ModelConfig,
    ParallelSpec,
    RoutingTable,
    WorkloadSpec,
    build_routing,
    fraction_std,
    max_achievable_std,
    model_preset,
)


def small_model(E=8, topk=2):
    return ModelConfig(L=1, E=E, topk=topk, N=8, K=16)


def recount(table: RoutingTable):
    """Independent recount of per-expert tokens from the emitted table."""
    counts = [0] * table.model.E
    for experts in table.experts_per_token:
        for e in experts:
            counts[e] += 1
    return counts


def test_uniform_routing_is_exactly_even():
    model = model_preset("mixtral-8x7b")
    table = build_routing(model, ParallelSpec(tp=1, ep=8), WorkloadSpec(M=8192, std=0.0))
    assert recount(table) == [2048] * 8
    assert table.achieved_std == 0.0


def test_single_expert_routes_everything_to_it():
    model = small_model(E=1, topk=1)
    table = build_routing(model, ParallelSpec(), WorkloadSpec(M=57, seed=3))
    assert recount(table) == [57]
    assert table.achieved_std == 0.0


def test_skewed_routing_hits_target_and_recounts():
    model = small_model(E=8, topk=2)
    table = build_routing(
        model, ParallelSpec(tp=1, ep=1), WorkloadSpec(M=8192, seed=42, std=0.05)
    )
    counts = recount(table)
    assert sum(counts) == 8192 * 2
    achieved = fraction_std(counts)
    assert 0.049 <= achieved <= 0.051
    assert math.isclose(achieved, table.achieved_std, rel_tol=0, abs_tol=1e-12)


@pytest.mark.parametrize("target", [0.005, 0.01, 0.02, 0.03, 0.04, 0.05])
def test_targets_within_tolerance(target):
    model = small_model(E=8, topk=2)
    table = build_routing(model, ParallelSpec(), WorkloadSpec(M=4096, seed=7, std=target))
    assert abs(fraction_std(recount(table)) - target) <= 1e-3


def test_small_instance_tolerance_floor():
    # The post is promised down at E=4 and only a thousand routed slots.
    model = ModelConfig(L=1, E=4, topk=1, N=8, K=16)
    table = build_routing(model, ParallelSpec(), WorkloadSpec(M=1000, seed=11, std=0.02))
    assert abs(fraction_std(recount(table)) - 0.02) <= 1e-3


def test_std_monotone_in_target():
    model = small_model(E=8, topk=2)
    achieved = []
    for target in [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.2]:
        table = build_routing(model, ParallelSpec(), WorkloadSpec(M=4096, seed=9, std=target))
        achieved.append(table.achieved_std)
    assert achieved == sorted(achieved)


def test_max_achievable_std_formula():
    # All tokens on the same topk experts: topk fractions of 1/topk, rest 0.
    assert math.isclose(max_achievable_std(8, 2), math.sqrt(3) / 8)
    assert max_achievable_std(4, 4) == 0.0
    assert max_achievable_std(1, 1) == 0.0
    counts = [4096] * 2 + [0] * 6
    assert math.isclose(fraction_std(counts), max_achievable_std(8, 2))


def test_infeasible_std_reports_achievable():
    model = small_model(E=8, topk=2)
    with pytest.raises(InfeasibleStdError) as err:
        build_routing(model, ParallelSpec(), WorkloadSpec(M=128, std=0.9))
    assert math.isclose(err.value.achievable, math.sqrt(3) / 8)
    assert f"{err.value.achievable:.6g}" in str(err.value)


def test_max_std_itself_is_feasible():
    model = small_model(E=8, topk=2)
    limit = max_achievable_std(8, 2)
    table = build_routing(model, ParallelSpec(), WorkloadSpec(M=512, seed=1, std=limit))
    counts = recount(table)
    assert sorted(counts, reverse=True)[:2] == [512, 512]
    assert math.isclose(table.achieved_std, limit)


def test_determinism_byte_identical():
    model = small_model()
    spec = (model, ParallelSpec(tp=2, ep=4), WorkloadSpec(M=300, seed=5, std=0.03))
    first = build_routing(*spec).to_json_str()
    second = build_routing(*spec).to_json_str()
    assert first == second
    other = build_routing(model, spec[1], WorkloadSpec(M=300, seed=6, std=0.03))
    assert other.to_json_str() != first


def test_json_round_trip():
    model = small_model()
    table = build_routing(model, ParallelSpec(tp=1, ep=2), WorkloadSpec(M=64, seed=2, std=0.02))
    clone = RoutingTable.from_json_dict(table.to_json_dict())
    assert clone == table


def test_source_rank_blocks():
    model = small_model()
    table = build_routing(model, ParallelSpec(tp=1, ep=4), WorkloadSpec(M=10, seed=0))
    # 10 tokens over 4 ranks: 2 + 2 + 2 + remainder 4 on the last rank.
    sources = [table.source_rank_of(t) for t in range(10)]
    assert sources == [0, 0, 1, 1, 2, 2, 3, 3, 3, 3]
    assert table.token_range_of_rank(3) == (6, 10)


def test_transfer_counts_match_rows():
    model = small_model(E=4, topk=2)
    par = ParallelSpec(tp=2, ep=2)
    table = build_routing(model, par, WorkloadSpec(M=40, seed=4, std=0.0))
    # Independent recount: every (token, expert) row reaches each of the
    # owning group's tp ranks; experts 0,1 live on ranks (0,1), 2,3 on (2,3).
    expected = [[0] * 4 for _ in range(4)]
    for t, experts in enumerate(table.experts_per_token):
        src = min(t // 10, 3)
        for e in experts:
            for dst in ((0, 1) if e < 2 else (2, 3)):
                expected[src][dst] += 1
    assert [list(row) for row in table.transfer_counts] == expected


@settings(max_examples=60, deadline=None)
@given(
    e_count=st.integers(1, 12),
    data=st.data(),
    m_tokens=st.integers(0, 120),
    seed=st.integers(0, 2**32 - 1),
)
def test_conservation_and_distinctness(e_count, data, m_tokens, seed):
    topk = data.draw(st.integers(1, e_count))
    frac = data.draw(st.floats(0.0, 1.0))
    target = frac * max_achievable_std(e_count, topk)
    model = ModelConfig(L=1, E=e_count, topk=topk, N=4, K=4)
    table = build_routing(model, ParallelSpec(), WorkloadSpec(M=m_tokens, seed=seed, std=target))
    counts = recount(table)
    assert sum(counts) == m_tokens * topk
    assert max(counts, default=0) <= m_tokens
    for experts in table.experts_per_token:
        assert len(set(experts)) == topk
        assert list(experts) == sorted(experts)
