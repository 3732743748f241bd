"""Training-free model merging with rank-reduced, re-centered task vectors.

The package merges fine-tuned checkpoints by (1) choosing an origin —
pretrained weights, the checkpoint mean, or a nuclear-norm-minimizing
point, (2) truncating each checkpoint's deviation from that origin to a
small fraction of its full rank, and (3) recombining with per-task
coefficients. Alongside the merge pipeline it ships the measurement side:
row-space interference and reconstruction-error diagnostics, a certified
upper bound on cross-task loss evaluated on synthetic instances, and
entropy-based test-time adaptation of the merging coefficients.
"""

from .adaptation import (
    Batch,
    CoefficientTable,
    SteMask,
    ToyClassifier,
    adapt_coefficients,
    adarank_adapt,
    coefficient_gradient,
    entropy_loss,
    ste_masked_singulars,
)
from .bounds import (
    BoundCertificate,
    SyntheticTaskSuite,
    certificate_json_line,
    certify_bound,
    generate_suite,
    task_interference_L,
    write_certificates,
)
from .errors import *  # noqa: F401,F403 — the exception taxonomy is the public surface
from .errors import RankmergeError
from .interference import (
    InterferenceReport,
    SweepRow,
    interference_report,
    rank_sweep,
    reconstruction_error,
    row_space_interference,
    sample_size,
    write_sweep_csv,
)
from .kernels import (
    LowRankFactor,
    frobenius_inner,
    frobenius_norm,
    nuclear_norm,
    nuclear_subgradient,
    numerical_rank,
    reconstruct,
    svd,
    truncate,
)
from .merge import (
    MergePlan,
    TaskVectorSet,
    build_task_vectors,
    cart_indexing,
    cart_merge,
    merge,
    prune_rank,
    prune_ranks,
    storage_cost,
    weight_average,
)
from .origin import (
    OriginMode,
    SolverTrace,
    mean_origin,
    rankmin_origin,
    select_origin,
    simmin_objective,
)
from .rng import stream
from .tensor_store import (
    ParamClass,
    TensorMap,
    classify,
    load_checkpoint,
    save_checkpoint,
    validate_aligned,
)
from .toysuites import classification_sweep_suite, signal_noise_suite

__version__ = "0.1.0"
