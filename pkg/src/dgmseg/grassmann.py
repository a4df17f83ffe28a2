"""Points on the Grassmann manifold and the kernels defined between them.

A subspace is carried as a ``D x m`` basis with orthonormal columns.  For
batched work subspaces are stacked into arrays of shape ``(n, D, m)``; a
rank-deficient subspace of rank ``r < m`` keeps zero columns in its last
``m - r`` slots, which contribute nothing to either kernel.
"""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SubspacePoint", "KernelParams", "RankDeficiencyError", "orthonormalize",
    "subspace_stack", "projection_kernel", "cc_kernel", "combined_kernel",
    "kernel_matrix", "gram_matrix", "kernel_vector", "as_stack",
]

# entries per chunk of the (na, nb, m, m) product tensor
_CHUNK_ENTRIES = 2_000_000


class RankDeficiencyError(ValueError):
    """The data matrix has fewer than ``m`` independent directions."""

    def __init__(self, rank, m):
        super().__init__(f"data has rank {rank} < requested subspace dimension {m}")
        self.rank = rank
        self.m = m


@dataclass(frozen=True, eq=False)
class SubspacePoint:
    """Orthonormal ``D x m`` basis, optionally tagged with where it came from."""

    basis: np.ndarray
    source: object = None

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if b.ndim != 2 or not 1 <= b.shape[1] <= b.shape[0]:
            raise ValueError(f"basis must be D x m with 1 <= m <= D, got {b.shape}")
        err = np.linalg.norm(b.T @ b - np.eye(b.shape[1]))
        if err > 1e-8:
            raise ValueError(f"basis columns are not orthonormal (error {err:.2e})")
        object.__setattr__(self, "basis", b)

    @property
    def D(self):
        return self.basis.shape[0]

    @property
    def m(self):
        return self.basis.shape[1]


@dataclass(frozen=True)
class KernelParams:
    """Weights of the projection and canonical-correlation kernels."""

    alpha1: float = 1.0
    alpha2: float = 5.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ValueError("kernel weights must be non-negative with a positive sum")

    def self_kernel(self, m):
        return self.alpha1 * m + self.alpha2 * (1.0 if m > 0 else 0.0)


def _sign_fix(u):
    """Flip columns so each one's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(u), axis=-2)
    pivot = np.take_along_axis(u, idx[..., None, :], axis=-2)
    signs = np.where(pivot < 0, -1.0, 1.0)
    return u * signs


def _rank(s, shape):
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol))


def orthonormalize(data, m):
    """Leading ``m`` left singular vectors of ``data`` as a :class:`SubspacePoint`.

    Raises :class:`RankDeficiencyError` when ``data`` has rank below ``m``.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    D, n = data.shape
    if not 1 <= m <= min(D, n):
        raise ValueError(f"m={m} must lie in [1, min(D, n)] = [1, {min(D, n)}]")
    u, s, _ = np.linalg.svd(data, full_matrices=False)
    r = _rank(s, data.shape)
    if r < m:
        raise RankDeficiencyError(r, m)
    return SubspacePoint(_sign_fix(u[:, :m]))


def subspace_stack(matrices, m):
    """Batched :func:`orthonormalize` with rank fallback.

    ``matrices`` has shape ``(n, D, p)``.  Returns ``(bases, ranks)`` where
    ``bases`` is ``(n, D, m)``; columns past a matrix's numerical rank are
    zero.
    """
    matrices = np.asarray(matrices, dtype=float)
    n, D, p = matrices.shape
    if not 1 <= m <= min(D, p):
        raise ValueError(f"m={m} must lie in [1, {min(D, p)}]")
    u, s, _ = np.linalg.svd(matrices, full_matrices=False)
    u = _sign_fix(u[:, :, :m])
    tol = max(D, p) * np.finfo(float).eps * s[:, :1]
    keep = (s[:, :m] > tol) & (s[:, :1] > 0)
    ranks = keep.sum(axis=1)
    return u * keep[:, None, :], ranks


def as_stack(points):
    """Stack SubspacePoints (or pass through an ``(n, D, m)`` array).

    Points of lower rank are zero-padded to the largest ``m`` present.
    """
    if isinstance(points, np.ndarray):
        if points.ndim != 3:
            raise ValueError(f"expected an (n, D, m) stack, got shape {points.shape}")
        return np.asarray(points, dtype=float)
    points = list(points)
    if not points:
        raise ValueError("empty point list")
    Ds = {p.D for p in points}
    if len(Ds) != 1:
        raise ValueError(f"points live in different ambient dimensions {sorted(Ds)}")
    D = Ds.pop()
    m = max(p.m for p in points)
    out = np.zeros((len(points), D, m))
    for i, p in enumerate(points):
        out[i, :, :p.m] = p.basis
    return out


def _ordered(x_i, x_j):
    if x_i.D != x_j.D:
        raise ValueError(f"ambient dimension mismatch: {x_i.D} vs {x_j.D}")
    if x_i.m != x_j.m:
        raise ValueError(f"subspace dimension mismatch: {x_i.m} vs {x_j.m}")
    # fixed evaluation order keeps k(a, b) == k(b, a) bit for bit
    a, b = x_i.basis, x_j.basis
    if a.tobytes() > b.tobytes():
        a, b = b, a
    return a.T @ b


def projection_kernel(x_i, x_j):
    """Squared Frobenius norm of ``x_i^T x_j`` (sum of squared principal cosines)."""
    return float(np.sum(_ordered(x_i, x_j) ** 2))


def cc_kernel(x_i, x_j):
    """Largest canonical correlation, i.e. the top singular value of ``x_i^T x_j``."""
    return float(np.linalg.svd(_ordered(x_i, x_j), compute_uv=False)[0])


def combined_kernel(x_i, x_j, p):
    prod = _ordered(x_i, x_j)
    proj = float(np.sum(prod ** 2))
    cc = float(np.linalg.svd(prod, compute_uv=False)[0])
    return p.alpha1 * proj + p.alpha2 * cc


def kernel_matrix(a, b, p):
    """Combined kernel between every pair of two ``(n, D, m)`` stacks."""
    a = as_stack(a)
    b = as_stack(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"ambient dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[2] != b.shape[2]:
        m = max(a.shape[2], b.shape[2])
        a = np.pad(a, ((0, 0), (0, 0), (0, m - a.shape[2])))
        b = np.pad(b, ((0, 0), (0, 0), (0, m - b.shape[2])))
    na, nb, m = a.shape[0], b.shape[0], a.shape[2]
    out = np.empty((na, nb))
    step = max(1, _CHUNK_ENTRIES // max(1, nb * m * m))
    for start in range(0, na, step):
        prod = np.einsum("adm,bdn->abmn", a[start:start + step], b, optimize=True)
        proj = np.sum(prod ** 2, axis=(-2, -1))
        k = p.alpha1 * proj
        if p.alpha2 and m:
            # top singular value via the m x m normal matrix; cheaper than batched SVD
            gm = np.matmul(np.swapaxes(prod, -1, -2), prod)
            cc = np.sqrt(np.maximum(np.linalg.eigvalsh(gm)[..., -1], 0.0))
            k = k + p.alpha2 * cc
        out[start:start + step] = k
    return out


def gram_matrix(points, p):
    """Symmetric Gram matrix of the combined kernel over ``points``.

    The upper triangle is computed and mirrored, so the result is exactly
    symmetric.
    """
    x = as_stack(points)
    k = kernel_matrix(x, x, p)
    upper = np.triu(k)
    return upper + np.triu(k, 1).T


def kernel_vector(x_q, training, p):
    """Combined-kernel similarities of one query subspace to every training point."""
    q = x_q.basis[None] if isinstance(x_q, SubspacePoint) else np.asarray(x_q, dtype=float)
    if q.ndim == 2:
        q = q[None]
    return kernel_matrix(q, training, p)[0]
