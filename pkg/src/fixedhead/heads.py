"""Output-classifier variants: learned, fixed orthogonal, fixed Hadamard, fixed identity.

A head maps pooled features x (N, n_c) to class scores y (N, K):

    Learned          y = x W^T + b        W, b trained
    FixedOrthogonal  y = x W^T + b        W frozen (semi-)orthogonal, b trained
    FixedHadamard    y = alpha (x W^T)+b  W frozen +-1/sqrt(n_c) pattern,
                                          scalar alpha and b trained
    FixedIdentity    y = x                no parameters at all; requires n_c == K

The fixed-orthogonal matrix comes from a Householder QR of a random square
matrix of order max(n_c, K), truncated to K x n_c: rows are orthonormal when
K <= n_c, columns when K >= n_c. The Hadamard matrix of order
2^ceil(log2(max(n_c, K))) is built by the Sylvester doubling recursion and
truncated the same way; when K exceeds the order's half, truncation makes
later rows exact copies of earlier ones, which the head report exposes as
duplicate-row pairs (0-indexed programmatically, 1-indexed in printed form).
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Parameter, Tensor, bias_add, linear, scale
from .errors import DimensionError, InvalidOrderError, ShapeError
from .rng import Rng


class HeadKind(str, Enum):
    LEARNED = "Learned"
    FIXED_ORTHOGONAL = "FixedOrthogonal"
    FIXED_HADAMARD = "FixedHadamard"
    FIXED_IDENTITY = "FixedIdentity"


@dataclass
class Head:
    kind: HeadKind
    n_c: int
    K: int
    W: Parameter
    b: Parameter | None
    alpha: Parameter | None


@dataclass
class HeadReport:
    """Construction-time accounting for one head."""

    trainable_param_count: int
    stored_param_count: int
    duplicate_row_count: int
    duplicate_pairs: list = field(default_factory=list)


def hadamard_matrix(order: int) -> np.ndarray:
    """Sylvester-construction Hadamard matrix of the given power-of-two order.

    Returns an int64 matrix with entries +-1 satisfying H @ H.T == order * I
    exactly; first row and column are all ones.
    """
    if order < 1 or order & (order - 1):
        raise InvalidOrderError(f"order must be a power of two, got {order}")
    h = np.array([[1]], dtype=np.int64)
    block = np.array([[1, 1], [1, -1]], dtype=np.int64)
    while h.shape[0] < order:
        h = np.kron(block, h)
    return h


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR factorization of a square matrix by Householder reflections.

    Signs are fixed so diag(R) >= 0, making Q a deterministic function of the
    input (in particular, householder_qr(I) == (I, I)).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("matrix entries must be finite")
    n = a.shape[0]
    r = a.copy()
    q = np.eye(n)
    for k in range(n - 1):
        x = r[k:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0]) if x[0] != 0.0 else norm_x
        vtv = v @ v
        if vtv == 0.0:
            continue
        coef = 2.0 / vtv
        r[k:, k:] -= coef * np.outer(v, v @ r[k:, k:])
        q[:, k:] -= coef * np.outer(q[:, k:] @ v, v)
    # flip signs so the diagonal of R is non-negative
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    r *= signs[:, None]
    q *= signs[None, :]
    # the sub-diagonal holds only rounding residue; make R exactly triangular
    r[np.tril_indices(n, -1)] = 0.0
    return q, r


def detect_duplicate_rows(w: np.ndarray) -> list[tuple[int, int]]:
    """All pairs (i, j), i < j, of bitwise-identical rows, sorted lexicographically."""
    w = np.ascontiguousarray(w)
    groups: dict[bytes, list[int]] = {}
    for i in range(w.shape[0]):
        groups.setdefault(w[i].tobytes(), []).append(i)
    pairs = []
    for idxs in groups.values():
        for a in range(len(idxs)):
            for b in range(a + 1, len(idxs)):
                pairs.append((idxs[a], idxs[b]))
    pairs.sort()
    return pairs


def trainable_params(head: Head) -> int:
    """Number of per-head values updated by the optimizer."""
    if head.kind is HeadKind.LEARNED:
        return head.K * head.n_c + head.K
    if head.kind is HeadKind.FIXED_ORTHOGONAL:
        return head.K
    if head.kind is HeadKind.FIXED_HADAMARD:
        return head.K + 1
    return 0


def _stored_params(kind: HeadKind, n_c: int, K: int) -> int:
    # values that must be persisted with the model, trainable or not
    if kind is HeadKind.LEARNED or kind is HeadKind.FIXED_ORTHOGONAL:
        return K * n_c + K
    if kind is HeadKind.FIXED_HADAMARD:
        return K * n_c + K + 1
    return 0


def build_head(kind: HeadKind, n_c: int, K: int, rng: Rng) -> tuple[Head, HeadReport]:
    """Construct a head of the given variant for n_c input channels, K classes."""
    kind = HeadKind(kind)
    if n_c < 1 or K < 1:
        raise ShapeError(f"n_c and K must be >= 1, got n_c={n_c}, K={K}")

    if kind is HeadKind.LEARNED:
        w = rng.standard_normal((K, n_c)) * math.sqrt(2.0 / n_c)
        head = Head(kind, n_c, K,
                    W=Parameter(Tensor(w), trainable=True),
                    b=Parameter(Tensor(np.zeros(K)), trainable=True),
                    alpha=None)
    elif kind is HeadKind.FIXED_ORTHOGONAL:
        m = max(n_c, K)
        q, _ = householder_qr(rng.standard_normal((m, m)))
        head = Head(kind, n_c, K,
                    W=Parameter(Tensor(q[:K, :n_c].copy()), trainable=False),
                    b=Parameter(Tensor(np.zeros(K)), trainable=True),
                    alpha=None)
    elif kind is HeadKind.FIXED_HADAMARD:
        k = max(n_c, K).bit_length() - 1
        if (1 << k) < max(n_c, K):
            k += 1
        h = hadamard_matrix(1 << k)
        w = h[:K, :n_c].astype(np.float64) / math.sqrt(n_c)
        head = Head(kind, n_c, K,
                    W=Parameter(Tensor(w), trainable=False),
                    b=Parameter(Tensor(np.zeros(K)), trainable=True),
                    alpha=Parameter(Tensor(np.float64(1.0)), trainable=True))
    else:  # FIXED_IDENTITY
        if n_c != K:
            raise DimensionError(
                f"identity head needs n_c == K, got n_c={n_c}, K={K}: "
                "it cannot handle more classes than channels"
            )
        head = Head(kind, n_c, K,
                    W=Parameter(Tensor(np.eye(K)), trainable=False),
                    b=None, alpha=None)

    pairs = detect_duplicate_rows(head.W.value.data)
    dup_rows = len({j for _, j in pairs})
    report = HeadReport(
        trainable_param_count=trainable_params(head),
        stored_param_count=_stored_params(kind, n_c, K),
        duplicate_row_count=dup_rows,
        duplicate_pairs=pairs,
    )
    return head, report


def head_forward(head: Head, x: Tensor) -> Tensor:
    """Apply a head to pooled features x of shape (N, n_c).

    The identity variant is a literal pass-through: zero added compute, and
    the returned tensor is x itself.
    """
    if x.data.ndim != 2 or x.shape[1] != head.n_c:
        raise ShapeError(f"expected (N, {head.n_c}) features, got {tuple(x.shape)}")
    if head.kind is HeadKind.FIXED_IDENTITY:
        return x
    if head.kind is HeadKind.FIXED_HADAMARD:
        y = linear(x, head.W.value)
        y = scale(y, head.alpha.value)
        return bias_add(y, head.b.value)
    return linear(x, head.W.value, head.b.value)


def head_parameters(head: Head) -> list[Parameter]:
    params = [head.W]
    if head.b is not None:
        params.append(head.b)
    if head.alpha is not None:
        params.append(head.alpha)
    return params
