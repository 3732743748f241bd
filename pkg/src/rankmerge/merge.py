r"""Merge engine: task vectors, rank pruning, and checkpoint assembly.

The pipeline is ``build_task_vectors`` (deltas against a chosen origin),
``prune_ranks`` (per-layer truncated SVD), then ``merge`` (origin plus a
coefficient-weighted sum of deltas). ``cart_merge`` composes the three with
a mean origin and a global coefficient:

.. math::
    \bar{A}_k(\lambda)
    = \theta_{\text{avg}}^l
    + \lambda \sum_t \mathrm{SVD}_k(\theta_t^l - \theta_{\text{avg}}^l).

Matrix parameters take the SVD path; everything else is merged by plain
averaging of the fine-tuned values. All internal arithmetic is float64; the
output checkpoint restores the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ArchitectureMismatch, EmptyInput, PlanError
from .kernels import LowRankFactor, reconstruct, svd, truncate
from .origin import OriginMode, mean_origin
from .tensor_store import ParamClass, TensorMap, classify, validate_aligned

__all__ = [
    "TaskVectorSet",
    "MergePlan",
    "build_task_vectors",
    "prune_ranks",
    "prune_rank",
    "merge",
    "cart_merge",
    "cart_indexing",
    "storage_cost",
    "weight_average",
]

Classifier = Callable[[str, np.ndarray], ParamClass]


def _dense(delta: np.ndarray | LowRankFactor) -> np.ndarray:
    if isinstance(delta, LowRankFactor):
        return reconstruct(delta)
    return delta


@dataclass
class TaskVectorSet:
    """A chosen origin plus per-task, per-layer deviations.

    ``deltas[t][name]`` holds task ``t``'s deviation on Matrix layer
    ``name``, either dense or as a truncated-SVD factor. Non-matrix
    parameters carry no deltas; their merge policy is recorded in
    ``nonmatrix_policy`` and the precomputed mean of the fine-tuned values
    is kept for assembly. ``output_dtypes`` remembers the checkpoint dtype
    that merged outputs are cast back to.
    """

    origin: TensorMap
    deltas: list[dict[str, np.ndarray | LowRankFactor]]
    nonmatrix_mean: dict[str, np.ndarray]
    output_dtypes: dict[str, np.dtype]
    nonmatrix_policy: str = "mean"

    @property
    def task_count(self) -> int:
        return len(self.deltas)

    def matrix_names(self) -> list[str]:
        return sorted(self.deltas[0]) if self.deltas else []

    def dense_delta(self, task: int, name: str) -> np.ndarray:
        return _dense(self.deltas[task][name])


@dataclass(frozen=True)
class MergePlan:
    """Origin mode, rank-retention ratio, and merge coefficients.

    Exactly one of ``lam`` (global coefficient) or ``table`` (per-task,
    per-layer coefficients keyed ``table[task][layer_name]``) must be set.
    ``rank_ratio`` documents the pruning the deltas were built with; pruning
    itself is applied by :func:`prune_ranks`, not re-applied at merge time.
    """

    origin_mode: OriginMode
    rank_ratio: float
    lam: float | None = None
    table: Mapping[int, Mapping[str, float]] | None = None

    def __post_init__(self):
        if not 0.0 <= self.rank_ratio <= 1.0:
            raise PlanError(f"rank_ratio must lie in [0, 1], got {self.rank_ratio}")
        if (self.lam is None) == (self.table is None):
            raise PlanError("set exactly one of lam (global) or table (per-task/layer)")

    def coefficient(self, task: int, layer: str) -> float:
        if self.lam is not None:
            return float(self.lam)
        assert self.table is not None
        try:
            return float(self.table[task][layer])
        except KeyError as exc:
            raise PlanError(f"no coefficient for task {task}, layer {layer!r}") from exc

    def to_json(self) -> dict:
        mode: dict[str, object] = {"kind": self.origin_mode.kind}
        if self.origin_mode.kind == "rankmin":
            mode["steps"] = self.origin_mode.steps
            mode["step_size"] = self.origin_mode.step_size
        coeffs: dict[str, object]
        if self.lam is not None:
            coeffs = {"global": self.lam}
        else:
            assert self.table is not None
            coeffs = {
                "per_task_layer": {
                    str(t): dict(sorted(layers.items())) for t, layers in sorted(self.table.items())
                }
            }
        return {"origin_mode": mode, "rank_ratio": self.rank_ratio, "coefficients": coeffs}

    @classmethod
    def from_json(cls, payload: Mapping) -> "MergePlan":
        mode_spec = payload["origin_mode"]
        mode = OriginMode(
            mode_spec["kind"],
            steps=int(mode_spec.get("steps", 200)),
            step_size=mode_spec.get("step_size"),
        )
        coeffs = payload["coefficients"]
        if "global" in coeffs:
            return cls(mode, float(payload["rank_ratio"]), lam=float(coeffs["global"]))
        table = {
            int(t): {str(l): float(v) for l, v in layers.items()}
            for t, layers in coeffs["per_task_layer"].items()
        }
        return cls(mode, float(payload["rank_ratio"]), table=table)


def build_task_vectors(
    origin: TensorMap,
    finetuned: list[TensorMap],
    classifier: Classifier = classify,
) -> TaskVectorSet:
    """Compute per-task deviations from ``origin`` for every Matrix layer.

    Non-matrix parameters are recorded for averaging only. The origin may
    carry a different dtype than the checkpoints (it is often a float64
    intermediate); names and shapes must match exactly.
    """
    if not finetuned:
        raise EmptyInput("build_task_vectors needs at least one checkpoint")
    if len(finetuned) >= 2:
        validate_aligned(finetuned)
    ref = finetuned[0]
    for name in sorted(set(origin.names()) | set(ref.names())):
        if name not in origin or name not in ref:
            raise ArchitectureMismatch(name, "origin and checkpoints name different tensors")
        if origin[name].shape != ref[name].shape:
            raise ArchitectureMismatch(
                name, f"origin shape {origin[name].shape} vs checkpoint {ref[name].shape}"
            )

    deltas: list[dict[str, np.ndarray | LowRankFactor]] = [{} for _ in finetuned]
    nonmatrix_mean: dict[str, np.ndarray] = {}
    output_dtypes: dict[str, np.dtype] = {}
    for name, arr in ref.items():
        output_dtypes[name] = arr.dtype
        if classifier(name, arr) is ParamClass.MATRIX:
            base = origin[name].astype(np.float64)
            for t, fmap in enumerate(finetuned):
                deltas[t][name] = fmap[name].astype(np.float64) - base
        else:
            nonmatrix_mean[name] = mean_origin([fmap[name] for fmap in finetuned])
    return TaskVectorSet(
        origin=origin,
        deltas=deltas,
        nonmatrix_mean=nonmatrix_mean,
        output_dtypes=output_dtypes,
    )


def prune_rank(rank_ratio: float, m: int, n: int) -> int:
    """Retained rank ``k = ceil(rank_ratio * min(m, n))``.

    Rank is measured against the ambient full rank min(m, n), which is
    reproducible, rather than a tolerance-dependent numerical rank. The
    product is rounded to 9 decimals before the ceiling so that binary
    float artifacts (e.g. 0.1 * 120 = 12.000000000000002) cannot inflate k.
    """
    if not 0.0 <= rank_ratio <= 1.0:
        raise ValueError(f"rank_ratio must lie in [0, 1], got {rank_ratio}")
    full = min(m, n)
    return min(full, math.ceil(round(rank_ratio * full, 9)))


def prune_ranks(tvs: TaskVectorSet, rank_ratio: float) -> TaskVectorSet:
    """Replace every Matrix delta with its best rank-k approximation.

    Ratio 1 keeps the full SVD (lossless up to floating error); ratio 0
    zeroes every delta.
    """
    pruned: list[dict[str, np.ndarray | LowRankFactor]] = []
    for per_task in tvs.deltas:
        row: dict[str, np.ndarray | LowRankFactor] = {}
        for name, delta in per_task.items():
            dense = _dense(delta)
            k = prune_rank(rank_ratio, *dense.shape)
            row[name] = truncate(svd(dense), k)
        pruned.append(row)
    return TaskVectorSet(
        origin=tvs.origin,
        deltas=pruned,
        nonmatrix_mean=tvs.nonmatrix_mean,
        output_dtypes=tvs.output_dtypes,
        nonmatrix_policy=tvs.nonmatrix_policy,
    )


def merge(tvs: TaskVectorSet, plan: MergePlan) -> TensorMap:
    r"""Assemble :math:`\theta_*^l = \text{origin}^l + \sum_t \lambda_t^l \delta_t^l`.

    Matrix layers combine the stored deltas (dense or factored) with the
    plan's coefficients; non-matrix parameters are the elementwise mean of
    the fine-tuned values. Raises :class:`PlanError` when a per-task/layer
    table misses a required coefficient.
    """
    if plan.table is not None:
        for t in range(tvs.task_count):
            for name in tvs.matrix_names():
                plan.coefficient(t, name)  # raises PlanError if missing
    entries: dict[str, np.ndarray] = {}
    for name in tvs.matrix_names():
        acc = tvs.origin[name].astype(np.float64).copy()
        for t in range(tvs.task_count):
            lam = plan.coefficient(t, name)
            if lam != 0.0:
                acc += lam * tvs.dense_delta(t, name)
        entries[name] = acc.astype(tvs.output_dtypes[name])
    for name, mean in tvs.nonmatrix_mean.items():
        entries[name] = mean.astype(tvs.output_dtypes[name])
    return TensorMap(entries)


def _mean_origin_map(finetuned: list[TensorMap]) -> TensorMap:
    entries = {
        name: mean_origin([fmap[name] for fmap in finetuned])
        for name in finetuned[0].names()
    }
    return TensorMap(entries)


def weight_average(finetuned: list[TensorMap]) -> TensorMap:
    """Elementwise mean of the checkpoints, cast back to their dtype."""
    if not finetuned:
        raise EmptyInput("weight_average needs at least one checkpoint")
    if len(finetuned) >= 2:
        validate_aligned(finetuned)
    ref = finetuned[0]
    entries = {
        name: mean_origin([fmap[name] for fmap in finetuned]).astype(ref[name].dtype)
        for name in ref.names()
    }
    return TensorMap(entries)


def cart_merge(
    pretrained: TensorMap,
    finetuned: list[TensorMap],
    rank_ratio: float,
    lam: float,
    classifier: Classifier = classify,
) -> TensorMap:
    """Centered arithmetic with rank-reduced task vectors, in one call.

    Composes mean origin, delta construction, rank pruning, and a global-
    coefficient merge. ``pretrained`` participates only in alignment
    validation; the centered pipeline never reads its values.
    """
    if not finetuned:
        raise EmptyInput("cart_merge needs at least one checkpoint")
    validate_aligned([pretrained, *finetuned])
    tvs = build_task_vectors(_mean_origin_map(finetuned), finetuned, classifier)
    tvs = prune_ranks(tvs, rank_ratio)
    plan = MergePlan(OriginMode.mean(), rank_ratio, lam=lam)
    return merge(tvs, plan)


def cart_indexing(
    pretrained: TensorMap,
    finetuned: list[TensorMap],
    rank_ratio: float,
    task_index: int,
    classifier: Classifier = classify,
) -> TensorMap:
    """Per-task reconstruction: mean origin plus one task's pruned delta.

    At ratio 1 this returns task ``task_index``'s Matrix parameters exactly
    (up to floating error); at ratio 0 it collapses to the weight average.
    Non-matrix parameters follow the averaging policy either way.
    """
    if not finetuned:
        raise EmptyInput("cart_indexing needs at least one checkpoint")
    if not 0 <= task_index < len(finetuned):
        raise IndexError(
            f"task_index {task_index} outside [0, {len(finetuned)})"
        )
    validate_aligned([pretrained, *finetuned])
    tvs = build_task_vectors(_mean_origin_map(finetuned), finetuned, classifier)
    tvs = prune_ranks(tvs, rank_ratio)
    table = {
        t: {name: 1.0 if t == task_index else 0.0 for name in tvs.matrix_names()}
        for t in range(tvs.task_count)
    }
    plan = MergePlan(OriginMode.mean(), rank_ratio, table=table)
    return merge(tvs, plan)


def storage_cost(
    T: int,
    layer_dims: list[tuple[int, int]],
    rank_ratio: float,
    float_bits: int,
) -> tuple[int, int]:
    """Bits needed to index T per-task models: binary masks vs low-rank factors.

    ``mask_bits`` charges one bit per matrix entry per task. ``lowrank_bits``
    charges ``float_bits`` per stored factor entry: (m + n) * k for the
    singular-vector blocks plus k for the singular values themselves — the
    sigma vector is billed explicitly rather than folded into a 2Mk
    approximation.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if float_bits < 1:
        raise ValueError("float_bits must be >= 1")
    mask_bits = 0
    lowrank_bits = 0
    for m, n in layer_dims:
        if m < 1 or n < 1:
            raise ValueError(f"layer dims must be positive, got ({m}, {n})")
        k = prune_rank(rank_ratio, m, n)
        mask_bits += m * n
        lowrank_bits += (m + n) * k + k
    return T * mask_bits, float_bits * T * lowrank_bits
