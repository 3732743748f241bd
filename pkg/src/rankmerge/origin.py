r"""Task-vector origin selection.

Three strategies for the origin that task vectors are measured from:

* pretrained passthrough — the classic task-arithmetic origin,
* mean — elementwise average of the fine-tuned checkpoints, which is the
  closed-form minimizer of the pairwise-similarity objective
  :math:`\sum_t \sum_{t'<t} \langle \theta_t-\theta, \theta_{t'}-\theta \rangle_F`,
* rank minimization — subgradient descent on
  :math:`\sum_t \|\theta_t - \theta\|_*`, pushing every task vector toward
  low rank.

The iterative solver records a per-step trace of both objective families so
their interplay can be inspected after the fact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, EmptyInput, InsufficientTasks, ShapeError
from .kernels import frobenius_inner, nuclear_norm, nuclear_subgradient
from .tensor_store import ParamClass, TensorMap, classify, validate_aligned

__all__ = [
    "OriginMode",
    "SolverTrace",
    "mean_origin",
    "simmin_objective",
    "rankmin_origin",
    "select_origin",
]

_MODES = ("pretrained", "mean", "rankmin")


@dataclass(frozen=True)
class OriginMode:
    """Origin strategy plus solver parameters for the iterative mode.

    ``step_size=None`` asks the solver to scale its step from the singular
    values of the initial task vectors.
    """

    kind: str
    steps: int = 200
    step_size: float | None = None

    def __post_init__(self):
        if self.kind not in _MODES:
            raise ValueError(f"kind must be one of {_MODES}, got {self.kind!r}")
        if self.kind == "rankmin":
            if self.steps < 1:
                raise ValueError("rankmin needs steps >= 1")
            if self.step_size is not None and self.step_size <= 0:
                raise ValueError("rankmin needs step_size > 0")

    @classmethod
    def pretrained(cls) -> "OriginMode":
        return cls("pretrained")

    @classmethod
    def mean(cls) -> "OriginMode":
        return cls("mean")

    @classmethod
    def rankmin(cls, steps: int = 200, step_size: float | None = None) -> "OriginMode":
        return cls("rankmin", steps=steps, step_size=step_size)


@dataclass
class SolverTrace:
    """Per-step solver log: (step, sum of nuclear norms, sum of |FIP|).

    Step 0 is the warm-start state; indices are strictly increasing.
    """

    records: list[tuple[int, float, float]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "nuclear_sum", "fip_abs_sum"])
            for step, nuc, fip in self.records:
                writer.writerow([step, repr(float(nuc)), repr(float(fip))])


def mean_origin(layers: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the layers; the task vectors around it sum to zero."""
    if not layers:
        raise EmptyInput("mean_origin needs at least one layer")
    first = np.asarray(layers[0], dtype=np.float64)
    out = first.copy()
    for layer in layers[1:]:
        arr = np.asarray(layer, dtype=np.float64)
        if arr.shape != first.shape:
            raise ShapeError(f"layer shape {arr.shape} != {first.shape}")
        out += arr
    return out / len(layers)


def simmin_objective(origin: np.ndarray, layers: list[np.ndarray]) -> float:
    r"""Pairwise-similarity objective
    :math:`\sum_t \sum_{t'<t} \langle \theta_t-\theta, \theta_{t'}-\theta \rangle_F`."""
    if len(layers) < 2:
        raise InsufficientTasks("simmin_objective is defined over task pairs")
    deltas = [np.asarray(l, dtype=np.float64) - np.asarray(origin, dtype=np.float64) for l in layers]
    total = 0.0
    for t in range(len(deltas)):
        for t2 in range(t):
            total += frobenius_inner(deltas[t], deltas[t2])
    return total


def _abs_fip_sum(deltas: list[np.ndarray]) -> float:
    total = 0.0
    for t in range(len(deltas)):
        for t2 in range(t):
            total += abs(frobenius_inner(deltas[t], deltas[t2]))
    return total


def rankmin_origin(
    layers: list[np.ndarray],
    steps: int = 200,
    step_size: float | None = None,
) -> tuple[np.ndarray, SolverTrace]:
    r"""Minimize :math:`\sum_t \|\theta_t - \theta\|_*` by subgradient descent.

    Starts from the mean (the pairwise-similarity optimum, a strong warm
    start) and iterates
    :math:`\theta \leftarrow \theta + \eta_s \cdot \tfrac{1}{T}\sum_t
    \partial\|\theta_t-\theta\|_*` with the diminishing step
    :math:`\eta_s = \text{step\_size}/\sqrt{s}`. The best iterate is kept, so
    the returned objective never exceeds the initial one. Raises
    :class:`DivergenceError` if the running objective exceeds ten times the
    initial value.
    """
    if len(layers) < 2:
        raise InsufficientTasks("rankmin_origin needs at least two layers")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    thetas = [np.asarray(l, dtype=np.float64) for l in layers]
    theta = mean_origin(thetas)

    def objective(point: np.ndarray) -> float:
        return sum(nuclear_norm(t - point) for t in thetas)

    initial = objective(theta)
    trace = SolverTrace()
    trace.records.append((0, initial, _abs_fip_sum([t - theta for t in thetas])))
    if initial == 0.0:
        return theta, trace

    if step_size is None:
        spectra = np.concatenate(
            [np.linalg.svd(t - theta, compute_uv=False) for t in thetas]
        )
        step_size = 0.1 * float(np.mean(spectra))
    if step_size <= 0:
        raise ValueError("step_size must be > 0")

    best_theta, best_obj = theta.copy(), initial
    for s in range(1, steps + 1):
        grad = np.zeros_like(theta)
        for t in thetas:
            grad += nuclear_subgradient(t - theta)
        theta = theta + (step_size / np.sqrt(s)) * (grad / len(thetas))
        deltas = [t - theta for t in thetas]
        obj = sum(nuclear_norm(d) for d in deltas)
        if obj > 10.0 * initial:
            raise DivergenceError(s, obj, initial)
        trace.records.append((s, obj, _abs_fip_sum(deltas)))
        if obj < best_obj:
            best_theta, best_obj = theta.copy(), obj
    return best_theta, trace


def select_origin(
    mode: OriginMode,
    pretrained: TensorMap,
    finetuned: list[TensorMap],
    trace_out: dict[str, SolverTrace] | None = None,
) -> TensorMap:
    """Assemble a per-layer origin checkpoint under ``mode``.

    Matrix layers use the chosen solver; non-matrix parameters always take
    the elementwise mean (or the pretrained values in pretrained mode). With
    a single fine-tuned checkpoint both solvers degenerate to that
    checkpoint. Pass ``trace_out`` to collect the rank-minimization trace of
    each Matrix layer by name.
    """
    if not finetuned:
        raise EmptyInput("select_origin needs at least one fine-tuned checkpoint")
    validate_aligned([pretrained, *finetuned])
    if mode.kind == "pretrained":
        return pretrained

    entries: dict[str, np.ndarray] = {}
    for name, ref in pretrained.items():
        stacked = [fmap[name] for fmap in finetuned]
        if (
            mode.kind == "rankmin"
            and len(stacked) >= 2
            and classify(name, ref) is ParamClass.MATRIX
        ):
            solved, trace = rankmin_origin(stacked, mode.steps, mode.step_size)
            if trace_out is not None:
                trace_out[name] = trace
        else:
            solved = mean_origin(stacked)
        entries[name] = solved.astype(ref.dtype)
    return TensorMap(entries)
