"""Origin-selection tests: the closed-form mean, the pairwise-overlap
objective it minimizes, and the nuclear-norm descent solver."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from rankmerge import (
    DivergenceError,
    EmptyInput,
    InsufficientTasks,
    OriginMode,
    ShapeError,
    TensorMap,
)
from rankmerge.kernels import nuclear_norm
from rankmerge.origin import (
    SolverTrace,
    mean_origin,
    rankmin_origin,
    select_origin,
    simmin_objective,
)
from rankmerge.rng import stream

from oracles import fd_gradient, reference_simmin


def _layers(g: np.random.Generator, count: int = 4, shape=(9, 7)) -> list[np.ndarray]:
    return [g.standard_normal(shape) for _ in range(count)]


# ---------------------------------------------------------------------------
# mean origin


def test_mean_origin_matches_stacked_mean(rng):
    layers = _layers(rng)
    np.testing.assert_allclose(mean_origin(layers), np.mean(layers, axis=0), rtol=1e-15)


def test_mean_origin_centers_the_task_vectors(rng):
    layers = _layers(rng, count=5)
    origin = mean_origin(layers)
    residual = sum(layer - origin for layer in layers)
    assert np.max(np.abs(residual)) < 1e-12


def test_mean_origin_promotes_to_float64(rng):
    layers = [l.astype(np.float32) for l in _layers(rng, count=3)]
    assert mean_origin(layers).dtype == np.float64


def test_mean_origin_rejects_empty_and_misaligned(rng):
    with pytest.raises(EmptyInput):
        mean_origin([])
    with pytest.raises(ShapeError):
        mean_origin([rng.standard_normal((3, 4)), rng.standard_normal((4, 3))])


# ---------------------------------------------------------------------------
# pairwise-overlap objective


def test_simmin_objective_matches_reference(rng):
    layers = _layers(rng, count=5)
    origin = rng.standard_normal(layers[0].shape)
    got = simmin_objective(origin, layers)
    assert got == pytest.approx(reference_simmin(origin, layers), rel=1e-12)


def test_simmin_needs_two_tasks(rng):
    with pytest.raises(InsufficientTasks):
        simmin_objective(np.zeros((2, 2)), [rng.standard_normal((2, 2))])


def test_mean_is_stationary_for_simmin(rng):
    layers = _layers(rng, count=4, shape=(6, 5))
    origin = mean_origin(layers)
    grad = fd_gradient(lambda x: simmin_objective(x, layers), origin)
    scale = max(abs(simmin_objective(origin, layers)), 1.0)
    assert np.max(np.abs(grad)) < 1e-6 * scale


@pytest.mark.parametrize("seed", range(5))
def test_mean_is_the_simmin_minimum(seed):
    g = stream(seed, "simmin-minimum")
    layers = _layers(g, count=3, shape=(5, 4))
    origin = mean_origin(layers)
    base = simmin_objective(origin, layers)
    for _ in range(20):
        shifted = origin + 0.3 * g.standard_normal(origin.shape)
        assert simmin_objective(shifted, layers) >= base - 1e-12


# ---------------------------------------------------------------------------
# nuclear-norm descent


def _shared_plus_lowrank(g: np.random.Generator, tasks: int = 4, shape=(12, 9)):
    """Checkpoints sharing a dense component plus per-task rank-1 bumps.

    The mean keeps a slice of every bump inside every task vector, so the
    warm start is deliberately suboptimal and descent has room to work.
    """
    shared = 2.0 * g.standard_normal(shape)
    return [
        shared + 3.0 * np.outer(g.standard_normal(shape[0]), g.standard_normal(shape[1])) / np.sqrt(shape[0] * shape[1])
        for _ in range(tasks)
    ]


def test_rankmin_descends_from_the_mean(rng):
    layers = _shared_plus_lowrank(rng)
    theta, trace = rankmin_origin(layers, steps=120)
    initial = trace.records[0][1]
    final = sum(nuclear_norm(l - theta) for l in layers)
    assert final < initial
    assert final == pytest.approx(min(nuc for _, nuc, _ in trace.records), rel=1e-12)


def test_rankmin_trace_shape(rng):
    layers = _shared_plus_lowrank(rng, tasks=3)
    _, trace = rankmin_origin(layers, steps=25)
    steps = [s for s, _, _ in trace.records]
    assert steps == list(range(26))
    assert trace.records[0][1] == pytest.approx(
        sum(nuclear_norm(l - mean_origin(layers)) for l in layers), rel=1e-12
    )


def test_rankmin_identical_layers_return_immediately(rng):
    layer = rng.standard_normal((5, 5))
    theta, trace = rankmin_origin([layer, layer.copy()], steps=50)
    np.testing.assert_array_equal(theta, layer)
    assert len(trace.records) == 1


def test_rankmin_divergence_guard(rng):
    layers = _layers(rng, count=3, shape=(6, 5))
    with pytest.raises(DivergenceError) as exc:
        rankmin_origin(layers, steps=400, step_size=1e6)
    assert exc.value.objective > 10.0 * exc.value.initial


def test_rankmin_input_validation(rng):
    with pytest.raises(InsufficientTasks):
        rankmin_origin([rng.standard_normal((3, 3))])
    with pytest.raises(ValueError):
        rankmin_origin(_layers(rng, count=2), steps=0)
    with pytest.raises(ValueError):
        rankmin_origin(_layers(rng, count=2), step_size=-1.0)


def test_solver_trace_csv_round_trips(tmp_path):
    trace = SolverTrace(records=[(0, 3.25, 1.125), (1, 2.5, 0.75)])
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "nuclear_sum", "fip_abs_sum"]
    assert [(int(s), float(n), float(f)) for s, n, f in rows[1:]] == trace.records


# ---------------------------------------------------------------------------
# per-checkpoint assembly


def _checkpoints(g: np.random.Generator, count: int = 3) -> list[TensorMap]:
    maps = []
    for _ in range(count):
        maps.append(
            TensorMap(
                {
                    "blocks.0.weight": g.standard_normal((8, 6)),
                    "blocks.0.bias": g.standard_normal(8),
                }
            )
        )
    return maps


def test_select_origin_pretrained_is_passthrough(rng):
    pre, *rest = _checkpoints(rng, count=4)
    assert select_origin(OriginMode.pretrained(), pre, rest) is pre


def test_select_origin_mean_averages_and_keeps_dtype(rng):
    pre, *rest = _checkpoints(rng, count=4)
    pre = TensorMap({k: v.astype(np.float32) for k, v in pre.items()})
    rest = [TensorMap({k: v.astype(np.float32) for k, v in m.items()}) for m in rest]
    out = select_origin(OriginMode.mean(), pre, rest)
    for name in pre.names():
        assert out[name].dtype == np.float32
        expected = np.mean([m[name] for m in rest], axis=0, dtype=np.float64)
        np.testing.assert_allclose(out[name], expected.astype(np.float32), rtol=1e-6)


def test_select_origin_rankmin_solves_matrices_and_averages_vectors(rng):
    weights = _shared_plus_lowrank(rng, tasks=3, shape=(8, 6))
    rest = [
        TensorMap({"blocks.0.weight": w, "blocks.0.bias": rng.standard_normal(8)})
        for w in weights
    ]
    pre = TensorMap({k: np.zeros_like(v) for k, v in rest[0].items()})
    traces: dict[str, SolverTrace] = {}
    out = select_origin(OriginMode.rankmin(steps=80), pre, rest, trace_out=traces)
    assert set(traces) == {"blocks.0.weight"}
    np.testing.assert_allclose(
        out["blocks.0.bias"], np.mean([m["blocks.0.bias"] for m in rest], axis=0), rtol=1e-12
    )
    mean_obj = sum(nuclear_norm(w - mean_origin(weights)) for w in weights)
    solved_obj = sum(nuclear_norm(w - out["blocks.0.weight"]) for w in weights)
    assert solved_obj < mean_obj


def test_select_origin_single_task_degenerates_to_it(rng):
    pre, only = _checkpoints(rng, count=2)
    out = select_origin(OriginMode.rankmin(), pre, [only])
    for name in only.names():
        np.testing.assert_array_equal(out[name], only[name])


def test_select_origin_rejects_empty(rng):
    pre, *_ = _checkpoints(rng, count=1)
    with pytest.raises(EmptyInput):
        select_origin(OriginMode.mean(), pre, [])


def test_origin_mode_validation():
    with pytest.raises(ValueError):
        OriginMode("centered")
    with pytest.raises(ValueError):
        OriginMode.rankmin(steps=0)
    with pytest.raises(ValueError):
        OriginMode.rankmin(step_size=0.0)
