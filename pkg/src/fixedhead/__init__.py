"""fixedhead: fixed vs. learned CNN classifier heads on a tiny float64 engine.

Public surface re-exported here; see the module docstrings for details.
Architecture JSON files for the audited reference networks ship under
``fixedhead/specs/``.
"""

from .audit import (
    ArchitectureSpec,
    AuditReport,
    count_layer_params,
    count_total,
    headless_transform,
    load_spec,
    savings,
    with_classes,
)
from .autodiff import (
    Parameter,
    Tape,
    Tensor,
    backward,
    conv2d,
    finite_diff_check,
    global_avg_pool,
    matmul,
    randn,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from .data import AugmentConfig, Batch, Dataset, augment, batch_iter, read_idx, synth_blobs
from .errors import FixedheadError
from .heads import (
    Head,
    HeadKind,
    HeadReport,
    build_head,
    detect_duplicate_rows,
    hadamard_matrix,
    head_forward,
    householder_qr,
    trainable_params,
)
from .rng import Rng
from .training import MetricsRow, TrainConfig, compare_heads, evaluate, step_lr, train

__version__ = "0.1.0"

SPEC_DIR = __path__[0] + "/specs"


def spec_path(name: str) -> str:
    """Path to a shipped architecture JSON, e.g. spec_path('resnet18')."""
    return f"{SPEC_DIR}/{name}.json"
