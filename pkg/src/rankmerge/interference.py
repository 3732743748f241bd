r"""Diagnostics for task-vector overlap and rank sweeps.

Two scalar diagnostics drive the analysis:

* row-space interference
  :math:`I(k) = \sum_i \sum_{j \ne i}
  \|\tilde{\Sigma}_i \tilde{V}_i^\top \tilde{V}_j \tilde{\Sigma}_j\|_F`,
  where :math:`\tilde{V}_t` holds the top-k right singular vectors of task
  t's delta and :math:`\tilde{\Sigma}_t` its top-k singular values divided
  by the l2 norm of the **full** singular-value vector (equivalently the
  Frobenius norm of the delta). The sum runs over ordered pairs, so two
  tasks contribute twice; normalization makes I invariant to rescaling any
  single delta.

* reconstruction error
  :math:`R(k) = \sum_t \|\delta_t - \mathrm{SVD}_k(\delta_t)\|_F^2`,
  which equals the tail singular-value energy
  :math:`\sum_t \sum_{i>k} \sigma_{t,i}^2`.

``rank_sweep`` drives a (ratio, lambda) grid through the merge pipeline and
an accuracy evaluator; ``sample_size`` is the Popoviciu/CLT planning
formula for how many evaluation samples an accuracy estimate needs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EvaluationError,
    InsufficientTasks,
    RangeError,
    RankError,
    ShapeError,
    ZeroTaskVector,
)
from .kernels import reconstruct, svd, truncate
from .merge import MergePlan, TaskVectorSet, build_task_vectors, merge, prune_ranks
from .origin import OriginMode, select_origin
from .tensor_store import TensorMap

__all__ = [
    "InterferenceReport",
    "SweepRow",
    "row_space_interference",
    "reconstruction_error",
    "interference_report",
    "rank_sweep",
    "write_sweep_csv",
    "sample_size",
]


def row_space_interference(deltas: Sequence[np.ndarray], k: int) -> float:
    """Weighted overlap of the tasks' top-k right-singular subspaces.

    Requires at least two tasks, ``1 <= k <= min(m, n)``, and nonzero
    deltas (the normalization is undefined at zero). Returns 0 whenever all
    pairwise top-k right subspaces are mutually orthogonal.
    """
    if len(deltas) < 2:
        raise InsufficientTasks("interference is defined over task pairs")
    mats = [np.asarray(d, dtype=np.float64) for d in deltas]
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"delta shapes differ: {m.shape} vs {shape}")
    if not 1 <= k <= min(shape):
        raise RankError(f"k={k} outside [1, {min(shape)}]")

    scaled: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    for idx, mat in enumerate(mats):
        f = svd(mat)
        norm = float(np.linalg.norm(f.singulars))
        if norm == 0.0:
            raise ZeroTaskVector(f"delta {idx} is identically zero")
        scaled.append(f.singulars[:k] / norm)
        rows.append(f.right[:k, :])

    total = 0.0
    for i in range(len(mats)):
        for j in range(len(mats)):
            if i == j:
                continue
            overlap = rows[i] @ rows[j].T
            weighted = scaled[i][:, None] * overlap * scaled[j][None, :]
            total += float(np.linalg.norm(weighted))
    return total


def reconstruction_error(
    thetas: Sequence[np.ndarray], origin: np.ndarray, k: int
) -> float:
    r"""Total squared residual of rank-k approximations of the deltas.

    Computed from the definition,
    :math:`\sum_t \|(\theta_t - \text{origin}) -
    \mathrm{SVD}_k(\theta_t - \text{origin})\|_F^2`; equals the tail
    singular-value energy by Eckart-Young.
    """
    origin = np.asarray(origin, dtype=np.float64)
    if not 0 <= k <= min(origin.shape):
        raise RankError(f"k={k} outside [0, {min(origin.shape)}]")
    total = 0.0
    for theta in thetas:
        delta = np.asarray(theta, dtype=np.float64) - origin
        residual = delta - reconstruct(truncate(svd(delta), k))
        total += float(np.linalg.norm(residual)) ** 2
    return total


@dataclass
class InterferenceReport:
    """Per-layer I(k) and R(k) curves plus per-(task, layer) spectra.

    ``interference[layer]`` and ``reconstruction[layer]`` are (k, value)
    lists; ``spectra[layer][task]`` is that delta's singular values. The
    ``conventions`` block records the two definitional choices that differ
    across writeups: ordered-pair summation and full-spectrum
    normalization.
    """

    interference: dict[str, list[tuple[int, float]]]
    reconstruction: dict[str, list[tuple[int, float]]]
    spectra: dict[str, list[list[float]]]
    conventions: dict[str, str]

    def to_json(self) -> dict:
        return {
            "conventions": self.conventions,
            "layers": {
                name: {
                    "interference": [[k, v] for k, v in self.interference[name]],
                    "reconstruction": [[k, v] for k, v in self.reconstruction[name]],
                    "spectra": self.spectra[name],
                }
                for name in sorted(self.interference)
            },
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """Columns: layer, quantity (I or R), k, value."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "quantity", "k", "value"])
            for name in sorted(self.interference):
                for k, v in self.interference[name]:
                    writer.writerow([name, "I", k, repr(v)])
                for k, v in self.reconstruction[name]:
                    writer.writerow([name, "R", k, repr(v)])


def interference_report(
    tvs: TaskVectorSet, ks: Sequence[int] | None = None
) -> InterferenceReport:
    """Compute I(k), R(k), and spectra for every Matrix layer of ``tvs``.

    ``ks`` defaults to every k from 1 to the layer's full rank for I and
    from 0 for R. R is assembled from the spectra via the tail-energy
    identity; the definitional residual form is exercised separately by
    :func:`reconstruction_error`.
    """
    interference: dict[str, list[tuple[int, float]]] = {}
    recon: dict[str, list[tuple[int, float]]] = {}
    spectra: dict[str, list[list[float]]] = {}
    for name in tvs.matrix_names():
        deltas = [tvs.dense_delta(t, name) for t in range(tvs.task_count)]
        full = min(deltas[0].shape)
        i_ks = [k for k in (ks if ks is not None else range(1, full + 1)) if 1 <= k <= full]
        r_ks = [k for k in (ks if ks is not None else range(0, full + 1)) if 0 <= k <= full]
        layer_spectra = [np.linalg.svd(d, compute_uv=False) for d in deltas]
        spectra[name] = [[float(x) for x in s] for s in layer_spectra]
        interference[name] = [(k, row_space_interference(deltas, k)) for k in i_ks]
        recon[name] = [
            (k, float(sum(np.sum(s[k:] ** 2) for s in layer_spectra))) for k in r_ks
        ]
    return InterferenceReport(
        interference=interference,
        reconstruction=recon,
        spectra=spectra,
        conventions={
            "pair_summation": "ordered pairs i != j (each unordered pair counted twice)",
            "sigma_normalization": "top-k singular values divided by the l2 norm of the full spectrum",
        },
    )


@dataclass(frozen=True)
class SweepRow:
    """One (ratio, lambda) cell: per-task accuracies and their mean."""

    ratio: float
    lam: float
    accuracies: tuple[float, ...]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


Evaluator = Callable[[TensorMap], Sequence[float]]


def rank_sweep(
    pretrained: TensorMap,
    finetuned: list[TensorMap],
    evaluator: Evaluator,
    lambdas: Sequence[float],
    ratios: Sequence[float],
    origin_mode: OriginMode,
) -> list[SweepRow]:
    """Merge and evaluate every (ratio, lambda) grid cell, in grid order.

    The evaluator maps a merged checkpoint to per-task accuracies in
    [0, 1]; anything else (or an evaluator exception) raises
    :class:`EvaluationError`. With a mean origin the ratio-0 and ratio-1
    rows reproduce plain weight averaging, independent of lambda.
    """
    origin = select_origin(origin_mode, pretrained, finetuned)
    tvs = build_task_vectors(origin, finetuned)
    rows: list[SweepRow] = []
    for ratio in ratios:
        pruned = prune_ranks(tvs, ratio)
        for lam in lambdas:
            merged = merge(pruned, MergePlan(origin_mode, ratio, lam=lam))
            try:
                accs = [float(a) for a in evaluator(merged)]
            except Exception as exc:
                raise EvaluationError(f"evaluator failed at ratio={ratio}, lambda={lam}: {exc}") from exc
            if not accs or any(not 0.0 <= a <= 1.0 for a in accs):
                raise EvaluationError(
                    f"evaluator returned accuracies outside [0, 1] at ratio={ratio}, lambda={lam}: {accs}"
                )
            rows.append(SweepRow(ratio=float(ratio), lam=float(lam), accuracies=tuple(accs)))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Columns: ratio, lambda, task, accuracy — per-task rows plus a mean row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "lambda", "task", "accuracy"])
        for row in rows:
            for t, acc in enumerate(row.accuracies):
                writer.writerow([repr(row.ratio), repr(row.lam), t, repr(float(acc))])
            writer.writerow([repr(row.ratio), repr(row.lam), "mean", repr(row.mean_accuracy)])


def sample_size(a: float, b: float, epsilon: float, z: float) -> int:
    r"""Evaluation-set size for a mean estimate within ``epsilon``.

    For a random variable supported on [a, b], Popoviciu's inequality
    bounds its standard deviation by :math:`\sigma \le (b-a)/2`; a CLT
    interval of half-width ``epsilon`` at ``z`` standard errors then needs
    :math:`m = \lceil (z \sigma / \epsilon)^2 \rceil` samples.
    """
    if b <= a:
        raise RangeError(f"need b > a, got a={a}, b={b}")
    if epsilon <= 0 or z <= 0:
        raise RangeError("epsilon and z must be positive")
    sigma = (b - a) / 2.0
    return int(math.ceil((z * sigma / epsilon) ** 2))
