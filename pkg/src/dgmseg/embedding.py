"""Discriminant graph embedding of labelled Grassmann points.

Training builds a within-class graph from kernel-space LLE reconstruction
weights and a between-class graph from cross-class neighbourhoods, then
solves a trace-difference eigenproblem for the projection matrix ``A``.
A new subspace ``x`` maps to ``A.T @ k(x)`` where ``k(x)`` holds its kernel
values against the training points.

Labels are integers, ``0`` for normal tissue and ``1`` for tumor.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grassmann import KernelParams, as_stack, gram_matrix, kernel_matrix, _sign_fix

__all__ = [
    "LabeledTrainingSet", "GraphWeights", "EmbeddingModel", "knn_within",
    "knn_between", "lle_weights", "build_within_graph", "build_between_graph",
    "train_projection", "embed", "embed_stack", "class_posterior",
    "class_posterior_batch", "fit_embedding", "save_model", "load_model",
    "InsufficientSamplesError",
]

NORMAL, TUMOR = 0, 1


class InsufficientSamplesError(ValueError):
    """A class has too few members for the requested neighbourhood size."""


@dataclass(eq=False)
class LabeledTrainingSet:
    points: np.ndarray  # (N, D, m) stack
    labels: np.ndarray  # (N,) ints
    gram: np.ndarray
    params: KernelParams

    @classmethod
    def build(cls, points, labels, params=None):
        params = params or KernelParams()
        points = as_stack(points)
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (points.shape[0],):
            raise ValueError(f"{len(labels)} labels for {points.shape[0]} points")
        return cls(points, labels, gram_matrix(points, params), params)

    def __len__(self):
        return len(self.labels)


@dataclass(eq=False)
class GraphWeights:
    W: np.ndarray

    @property
    def D(self):
        return np.diag(self.W.sum(axis=1))

    @property
    def L(self):
        return self.D - self.W


def _ranked(row, candidates, k, what):
    if len(candidates) < k:
        raise InsufficientSamplesError(
            f"{what} neighbourhood of size {k} needs {k} candidates, found {len(candidates)}")
    # stable sort on negated similarity: ties resolve to the lower index
    order = np.argsort(-row[candidates], kind="stable")
    return candidates[order[:k]]


def knn_within(i, ts, k1):
    """The ``k1`` same-class points most similar to point ``i`` under the kernel."""
    same = np.flatnonzero(ts.labels == ts.labels[i])
    return _ranked(ts.gram[i], same[same != i], k1, "within-class")


def knn_between(i, ts, k2):
    """The ``k2`` opposite-class points most similar to point ``i``."""
    other = np.flatnonzero(ts.labels != ts.labels[i])
    return _ranked(ts.gram[i], other, k2, "between-class")


def lle_weights(i, neighbors, gram):
    """Affine reconstruction weights of point ``i`` from ``neighbors`` in feature space.

    Returns a length-N vector, zero outside ``neighbors``, summing to one.
    """
    neighbors = np.asarray(neighbors, dtype=int)
    if neighbors.size == 0:
        raise ValueError("need at least one neighbour")
    g = gram
    kii = g[i, i]
    kin = g[i, neighbors]
    C = kii - kin[:, None] - kin[None, :] + g[np.ix_(neighbors, neighbors)]
    k = len(neighbors)
    eps = 1e-6 * np.trace(C) / k
    if not eps > 0:
        # coincident neighbours (e.g. several all-zero patches)
        eps = 1e-6
    w = np.linalg.solve(C + eps * np.eye(k), np.ones(k))
    w = w / w.sum()
    out = np.zeros(g.shape[0])
    out[neighbors] = w
    return out


def reconstruction_matrix(ts, k1):
    """Row ``i`` holds the LLE weights of point ``i``; also returns the neighbour sets."""
    N = len(ts)
    M = np.zeros((N, N))
    nbrs = []
    for i in range(N):
        nb = knn_within(i, ts, k1)
        M[i] = lle_weights(i, nb, ts.gram)
        nbrs.append(nb)
    return M, nbrs


def _relation(nbrs, N):
    R = np.zeros((N, N), dtype=bool)
    for i, nb in enumerate(nbrs):
        R[i, nb] = True
    return R | R.T


def build_within_graph(ts, k1):
    M, nbrs = reconstruction_matrix(ts, k1)
    full = M + M.T - M.T @ M
    W = np.where(_relation(nbrs, len(ts)), full, 0.0)
    W = (W + W.T) / 2
    np.fill_diagonal(W, 0.0)
    return GraphWeights(W)


def build_between_graph(ts, k2):
    nbrs = [knn_between(i, ts, k2) for i in range(len(ts))]
    W = _relation(nbrs, len(ts)) / float(k2)
    np.fill_diagonal(W, 0.0)
    return GraphWeights(W)


@dataclass(eq=False)
class EmbeddingModel:
    """Trained projection plus everything needed to embed and classify."""

    A: np.ndarray                # (N, d)
    points: np.ndarray           # (N, D, m)
    labels: np.ndarray           # (N,)
    params: KernelParams
    k1: int
    k2: int
    d: int
    h: float
    classifier_k: int = 15
    eigenvalues: np.ndarray = None
    train_embedded: np.ndarray = None  # (N, d)
    window: int = 5
    shift: int = 2

    def __post_init__(self):
        # one memory layout for trained and loaded models: BLAS rounding depends on it
        self.A = np.ascontiguousarray(self.A, dtype=float)
        self.points = np.ascontiguousarray(self.points, dtype=float)
        self.labels = np.ascontiguousarray(self.labels, dtype=int)
        if self.train_embedded is not None:
            self.train_embedded = np.ascontiguousarray(self.train_embedded, dtype=float)
        if self.train_embedded is None:
            self.train_embedded = embed_stack(self.points, self)

    @property
    def D(self):
        return self.points.shape[1]

    @property
    def m(self):
        return self.points.shape[2]


def trace_difference_matrix(gram, L_w, L_b, h):
    K = gram
    S = K @ L_b @ K.T - h * (K @ L_w @ K.T)
    return (S + S.T) / 2


def train_projection(ts, L_w, L_b, h=1.0, d=6, k1=10, k2=5, classifier_k=15,
                     window=5, shift=2):
    """Top-``d`` eigenvectors of ``K L_b K^T - h K L_w K^T`` as the projection."""
    N = len(ts)
    if not 1 <= d <= N:
        raise ValueError(f"embedding dimension d={d} must lie in [1, N={N}]")
    if h < 0:
        raise ValueError("h must be non-negative")
    S = trace_difference_matrix(ts.gram, L_w, L_b, h)
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite entries in the trace-difference matrix")
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals, kind="stable")[::-1][:d]
    A = _sign_fix(vecs[:, order])
    return EmbeddingModel(A=A, points=ts.points, labels=ts.labels, params=ts.params,
                          k1=k1, k2=k2, d=d, h=h, classifier_k=classifier_k,
                          eigenvalues=vals[order], window=window, shift=shift)


def fit_embedding(points, labels, params=None, k1=10, k2=5, d=6, h=1.0,
                  classifier_k=15, window=5, shift=2):
    """Full training path: Gram, both graphs, eigen-solution."""
    ts = LabeledTrainingSet.build(points, labels, params)
    for c in np.unique(ts.labels):
        n_c = int(np.sum(ts.labels == c))
        if n_c < k1 + 1:
            raise InsufficientSamplesError(
                f"class {c} has {n_c} samples; need at least k1 + 1 = {k1 + 1}")
    if len(np.unique(ts.labels)) < 2:
        raise InsufficientSamplesError("training needs samples from both classes")
    Ww = build_within_graph(ts, k1)
    Wb = build_between_graph(ts, k2)
    return train_projection(ts, Ww.L, Wb.L, h=h, d=d, k1=k1, k2=k2,
                            classifier_k=classifier_k, window=window, shift=shift)


def embed_stack(points, model):
    K = kernel_matrix(as_stack(points), model.points, model.params)
    return K @ model.A


def embed(x_q, model):
    """Embedded coordinates ``A.T @ k(x_q)`` of one subspace (length ``d``)."""
    q = x_q.basis if hasattr(x_q, "basis") else np.asarray(x_q, dtype=float)
    return embed_stack(q[None], model)[0]


def class_posterior_batch(V, model, k=None):
    """Laplace-smoothed k-NN posteriors for each row of ``V``.

    Returns an ``(n, 2)`` array with columns ``P(normal)``, ``P(tumor)``.
    """
    k = model.classifier_k if k is None else int(k)
    T = model.train_embedded
    if not 1 <= k <= len(T):
        raise ValueError(f"classifier k={k} must lie in [1, N={len(T)}]")
    V = np.atleast_2d(np.asarray(V, dtype=float))
    d2 = np.sum((V[:, None, :] - T[None, :, :]) ** 2, axis=-1)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    n_tumor = np.sum(model.labels[nn] == TUMOR, axis=1)
    n_normal = k - n_tumor
    # compute the majority side directly; 1 - p is then exact so rows sum to 1
    major = np.maximum(n_tumor, n_normal)
    p_major = (major + 1.0) / (k + 2.0)
    p_minor = 1.0 - p_major
    p_tumor = np.where(n_tumor >= n_normal, p_major, p_minor)
    p_normal = np.where(n_tumor >= n_normal, p_minor, p_major)
    return np.column_stack([p_normal, p_tumor])


def class_posterior(v, model, k=None):
    return class_posterior_batch(np.asarray(v, dtype=float)[None], model, k)[0]


_MAGIC = b"DGME"
_VERSION = 1
_HEAD = struct.Struct("<4sIddIIIIIIdIII")


def save_model(model, path):
    """Serialise ``model`` to a little-endian binary file with a versioned header."""
    N, D, m = model.points.shape
    head = _HEAD.pack(_MAGIC, _VERSION, model.params.alpha1, model.params.alpha2,
                      D, m, N, model.k1, model.k2, model.d, model.h,
                      model.classifier_k, model.window, model.shift)
    eig = model.eigenvalues if model.eigenvalues is not None else np.zeros(model.d)
    parts = [
        head,
        np.ascontiguousarray(model.points, dtype="<f8").tobytes(),
        np.asarray(model.labels, dtype="u1").tobytes(),
        np.ascontiguousarray(model.A, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.train_embedded, dtype="<f8").tobytes(),
        np.ascontiguousarray(eig, dtype="<f8").tobytes(),
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_model(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise ValueError(f"{path}: truncated model file")
    (magic, version, a1, a2, D, m, N, k1, k2, d, h,
     ck, window, shift) = _HEAD.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a model file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    sizes = [N * D * m * 8, N, N * d * 8, N * d * 8, d * 8]
    if len(buf) != _HEAD.size + sum(sizes):
        raise ValueError(f"{path}: payload size does not match header")
    off = _HEAD.size
    chunks = []
    for s in sizes:
        chunks.append(buf[off:off + s])
        off += s
    points = np.frombuffer(chunks[0], "<f8").reshape(N, D, m).astype(float)
    labels = np.frombuffer(chunks[1], "u1").astype(int)
    A = np.frombuffer(chunks[2], "<f8").reshape(N, d).astype(float)
    emb = np.frombuffer(chunks[3], "<f8").reshape(N, d).astype(float)
    eig = np.frombuffer(chunks[4], "<f8").astype(float)
    return EmbeddingModel(A=A, points=points, labels=labels,
                          params=KernelParams(a1, a2), k1=k1, k2=k2, d=d, h=h,
                          classifier_k=ck, eigenvalues=eig, train_embedded=emb,
                          window=window, shift=shift)
