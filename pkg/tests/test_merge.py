"""Merge-engine tests: delta construction, rank pruning, plan handling,
checkpoint assembly, and the storage-cost accounting."""

from __future__ import annotations

import numpy as np
import pytest

from rankmerge import (
    ArchitectureMismatch,
    EmptyInput,
    MergePlan,
    OriginMode,
    PlanError,
    TensorMap,
    build_task_vectors,
    cart_indexing,
    cart_merge,
    merge,
    prune_rank,
    prune_ranks,
    storage_cost,
    weight_average,
)
from rankmerge.kernels import LowRankFactor

from conftest import random_tensor_map
from oracles import reference_tail_energy

SHAPES = {"layers.0.weight": (10, 7), "layers.1.weight": (6, 6), "layers.0.bias": (10,)}


def _fleet(g: np.random.Generator, tasks: int = 3, dtype=np.float64):
    origin = random_tensor_map(g, SHAPES, dtype=dtype)
    finetuned = [random_tensor_map(g, SHAPES, dtype=dtype) for _ in range(tasks)]
    return origin, finetuned


# ---------------------------------------------------------------------------
# build_task_vectors


def test_deltas_are_float64_checkpoint_minus_origin(rng):
    origin, finetuned = _fleet(rng, dtype=np.float32)
    tvs = build_task_vectors(origin, finetuned)
    assert tvs.matrix_names() == ["layers.0.weight", "layers.1.weight"]
    for t, fmap in enumerate(finetuned):
        for name in tvs.matrix_names():
            delta = tvs.deltas[t][name]
            assert delta.dtype == np.float64
            expected = fmap[name].astype(np.float64) - origin[name].astype(np.float64)
            np.testing.assert_array_equal(delta, expected)


def test_vectors_are_averaged_not_diffed(rng):
    origin, finetuned = _fleet(rng)
    tvs = build_task_vectors(origin, finetuned)
    assert set(tvs.nonmatrix_mean) == {"layers.0.bias"}
    np.testing.assert_allclose(
        tvs.nonmatrix_mean["layers.0.bias"],
        np.mean([fmap["layers.0.bias"] for fmap in finetuned], axis=0),
        rtol=1e-15,
    )


def test_origin_dtype_may_differ_from_checkpoints(rng):
    origin, finetuned = _fleet(rng, dtype=np.float32)
    wide_origin = TensorMap({k: v.astype(np.float64) for k, v in origin.items()})
    tvs = build_task_vectors(wide_origin, finetuned)
    assert tvs.output_dtypes["layers.0.weight"] == np.float32


def test_build_rejects_misaligned_origin(rng):
    origin, finetuned = _fleet(rng)
    renamed = TensorMap({f"other.{k}": v for k, v in origin.items()})
    with pytest.raises(ArchitectureMismatch):
        build_task_vectors(renamed, finetuned)
    squashed = TensorMap(
        {k: (v[:-1] if v.ndim == 2 else v) for k, v in origin.items()}
    )
    with pytest.raises(ArchitectureMismatch):
        build_task_vectors(squashed, finetuned)
    with pytest.raises(EmptyInput):
        build_task_vectors(origin, [])


# ---------------------------------------------------------------------------
# rank pruning


@pytest.mark.parametrize(
    "ratio, m, n, expected",
    [
        (0.0, 10, 7, 0),
        (1.0, 10, 7, 7),
        (0.08, 1024, 1024, 82),
        (0.5, 7, 5, 3),
        # 0.1 * 120 = 12.000000000000002 in binary; the 9-decimal round
        # keeps the ceiling at 12 instead of 13.
        (0.1, 120, 200, 12),
        (1e-9, 4, 4, 1),
    ],
)
def test_prune_rank_table(ratio, m, n, expected):
    assert prune_rank(ratio, m, n) == expected


def test_prune_rank_rejects_out_of_range():
    with pytest.raises(ValueError):
        prune_rank(-0.1, 4, 4)
    with pytest.raises(ValueError):
        prune_rank(1.5, 4, 4)


def test_prune_full_ratio_is_lossless(rng):
    origin, finetuned = _fleet(rng)
    tvs = build_task_vectors(origin, finetuned)
    pruned = prune_ranks(tvs, 1.0)
    for t in range(tvs.task_count):
        for name in tvs.matrix_names():
            assert isinstance(pruned.deltas[t][name], LowRankFactor)
            np.testing.assert_allclose(
                pruned.dense_delta(t, name), tvs.dense_delta(t, name), atol=1e-12
            )


def test_prune_zero_ratio_kills_every_delta(rng):
    origin, finetuned = _fleet(rng)
    pruned = prune_ranks(build_task_vectors(origin, finetuned), 0.0)
    for t in range(pruned.task_count):
        for name in pruned.matrix_names():
            assert np.all(pruned.dense_delta(t, name) == 0.0)


def test_prune_residual_is_the_spectral_tail(rng):
    origin, finetuned = _fleet(rng, tasks=1)
    tvs = build_task_vectors(origin, finetuned)
    pruned = prune_ranks(tvs, 0.4)
    name = "layers.0.weight"
    k = prune_rank(0.4, *SHAPES[name])
    residual = tvs.dense_delta(0, name) - pruned.dense_delta(0, name)
    assert np.sum(residual**2) == pytest.approx(
        reference_tail_energy(tvs.dense_delta(0, name), k), rel=1e-10
    )


# ---------------------------------------------------------------------------
# merge plans


def test_plan_requires_exactly_one_coefficient_source():
    with pytest.raises(PlanError):
        MergePlan(OriginMode.mean(), 0.5)
    with pytest.raises(PlanError):
        MergePlan(OriginMode.mean(), 0.5, lam=1.0, table={0: {"w": 1.0}})
    with pytest.raises(PlanError):
        MergePlan(OriginMode.mean(), 1.5, lam=1.0)


def test_plan_coefficient_lookup():
    plan = MergePlan(OriginMode.mean(), 0.1, lam=0.7)
    assert plan.coefficient(3, "anything") == 0.7
    table_plan = MergePlan(OriginMode.mean(), 0.1, table={0: {"w": 0.25}})
    assert table_plan.coefficient(0, "w") == 0.25
    with pytest.raises(PlanError):
        table_plan.coefficient(1, "w")


@pytest.mark.parametrize(
    "plan",
    [
        MergePlan(OriginMode.mean(), 0.08, lam=0.3),
        MergePlan(
            OriginMode.rankmin(steps=50, step_size=0.05),
            1.0,
            table={0: {"a": 1.0, "b": 0.5}, 1: {"a": -0.25, "b": 0.0}},
        ),
    ],
)
def test_plan_json_round_trip(plan):
    clone = MergePlan.from_json(plan.to_json())
    assert clone == plan


# ---------------------------------------------------------------------------
# assembly


def test_merge_matches_manual_sum(rng):
    origin, finetuned = _fleet(rng)
    tvs = build_task_vectors(origin, finetuned)
    out = merge(tvs, MergePlan(OriginMode.mean(), 1.0, lam=0.4))
    for name in tvs.matrix_names():
        expected = origin[name].astype(np.float64)
        for t in range(tvs.task_count):
            expected = expected + 0.4 * tvs.dense_delta(t, name)
        np.testing.assert_allclose(out[name], expected, rtol=1e-14)
    np.testing.assert_allclose(
        out["layers.0.bias"], tvs.nonmatrix_mean["layers.0.bias"], rtol=1e-15
    )


def test_merge_zero_lambda_returns_origin(rng):
    origin, finetuned = _fleet(rng)
    tvs = build_task_vectors(origin, finetuned)
    out = merge(tvs, MergePlan(OriginMode.mean(), 0.5, lam=0.0))
    for name in tvs.matrix_names():
        np.testing.assert_array_equal(out[name], origin[name])


def test_merge_casts_to_checkpoint_dtype(rng):
    origin, finetuned = _fleet(rng, dtype=np.float32)
    tvs = build_task_vectors(origin, finetuned)
    out = merge(tvs, MergePlan(OriginMode.mean(), 1.0, lam=1.0))
    assert all(out[name].dtype == np.float32 for name in out.names())


def test_merge_validates_table_before_assembling(rng):
    origin, finetuned = _fleet(rng)
    tvs = build_task_vectors(origin, finetuned)
    table = {t: {"layers.0.weight": 1.0} for t in range(3)}  # misses layers.1
    with pytest.raises(PlanError):
        merge(tvs, MergePlan(OriginMode.mean(), 1.0, table=table))


# ---------------------------------------------------------------------------
# high-level entry points


def test_weight_average_is_the_elementwise_mean(rng):
    _, finetuned = _fleet(rng, dtype=np.float32)
    avg = weight_average(finetuned)
    for name in finetuned[0].names():
        assert avg[name].dtype == np.float32
        np.testing.assert_allclose(
            avg[name],
            np.mean([fmap[name] for fmap in finetuned], axis=0, dtype=np.float64).astype(
                np.float32
            ),
            rtol=1e-6,
        )
    with pytest.raises(EmptyInput):
        weight_average([])


def test_cart_merge_full_rank_collapses_to_average(rng):
    pretrained, finetuned = _fleet(rng)
    avg = weight_average(finetuned)
    for lam in (0.0, 0.3, 1.0, 3.0):
        merged = cart_merge(pretrained, finetuned, rank_ratio=1.0, lam=lam)
        for name in merged.names():
            np.testing.assert_allclose(merged[name], avg[name], atol=1e-12)


def test_cart_merge_never_reads_pretrained_values(rng):
    pretrained, finetuned = _fleet(rng)
    shifted = TensorMap({k: v + 100.0 for k, v in pretrained.items()})
    a = cart_merge(pretrained, finetuned, 0.4, 0.7)
    b = cart_merge(shifted, finetuned, 0.4, 0.7)
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])


def test_cart_merge_requires_alignment(rng):
    pretrained, finetuned = _fleet(rng)
    stranger = TensorMap({f"x.{k}": v for k, v in pretrained.items()})
    with pytest.raises(ArchitectureMismatch):
        cart_merge(stranger, finetuned, 1.0, 1.0)
    with pytest.raises(EmptyInput):
        cart_merge(pretrained, [], 1.0, 1.0)


def test_indexing_full_rank_recovers_each_task(rng):
    pretrained, finetuned = _fleet(rng)
    for t, fmap in enumerate(finetuned):
        rebuilt = cart_indexing(pretrained, finetuned, 1.0, t)
        for name in ("layers.0.weight", "layers.1.weight"):
            np.testing.assert_allclose(rebuilt[name], fmap[name], atol=1e-10)
        np.testing.assert_allclose(
            rebuilt["layers.0.bias"],
            np.mean([m["layers.0.bias"] for m in finetuned], axis=0),
            rtol=1e-12,
        )


def test_indexing_zero_rank_is_the_average(rng):
    pretrained, finetuned = _fleet(rng)
    avg = weight_average(finetuned)
    rebuilt = cart_indexing(pretrained, finetuned, 0.0, 1)
    for name in rebuilt.names():
        np.testing.assert_allclose(rebuilt[name], avg[name], atol=1e-12)


def test_indexing_rejects_bad_task_index(rng):
    pretrained, finetuned = _fleet(rng)
    with pytest.raises(IndexError):
        cart_indexing(pretrained, finetuned, 1.0, 3)
    with pytest.raises(IndexError):
        cart_indexing(pretrained, finetuned, 1.0, -1)


# ---------------------------------------------------------------------------
# storage accounting


def test_storage_cost_worked_example():
    # One 1024x1024 layer at 8% retained rank, 32-bit floats, one task:
    # masks cost one bit per entry; factors cost (m + n) * k + k floats
    # with k = ceil(0.08 * 1024) = 82.
    mask_bits, lowrank_bits = storage_cost(1, [(1024, 1024)], 0.08, 32)
    assert mask_bits == 1024 * 1024
    assert lowrank_bits == 32 * (2048 * 82 + 82)


def test_storage_cost_scales_linearly_in_tasks():
    one = storage_cost(1, [(64, 32), (32, 32)], 0.25, 16)
    five = storage_cost(5, [(64, 32), (32, 32)], 0.25, 16)
    assert five == (5 * one[0], 5 * one[1])


def test_storage_cost_zero_ratio_stores_no_factors():
    _, lowrank_bits = storage_cost(3, [(64, 32)], 0.0, 32)
    assert lowrank_bits == 0


def test_storage_cost_validation():
    with pytest.raises(ValueError):
        storage_cost(0, [(4, 4)], 0.5, 32)
    with pytest.raises(ValueError):
        storage_cost(1, [(4, 4)], 0.5, 0)
    with pytest.raises(ValueError):
        storage_cost(1, [(0, 4)], 0.5, 32)
