"""Higher-order CRF over superpixel nodes with manifold-derived potentials.

Energy of a binary labelling ``x`` (1 = tumor)::

    E(x) = sum_i psi_i(x_i)
         + sum_(i,j) w exp(-|v_i - v_j|^2 / (2 sigma_f^2)) [x_i != x_j]
         + sum_s lambda_s min(C_s(x) / T_s, 1)

where ``v`` are embedded coordinates, ``C_s`` counts the clique members
that disagree with the clique majority and
``lambda_s = lambda_max exp(-beta_q Q_s)``.  Every clique term is a concave
function of the number of tumor labels in the clique, so the whole energy
reduces to one s-t min-cut with a few auxiliary nodes per clique.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import maxflow
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .embedding import class_posterior_batch, embed_stack
from .grassmann import subspace_stack
from .superpixel import adjacency, build_cliques, segment_slice
from .volume import Mask, extract_patch_stack, patch_footprint

__all__ = [
    "PotentialParams", "CrfGraph", "unary_energy", "pairwise_energy",
    "clique_quality", "clique_lambda", "clique_energy", "energy_terms",
    "total_energy", "minimize", "build_graph", "segment_slice_labels",
    "segment_volume", "SliceLog",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PotentialParams:
    """Weights of the pairwise and clique potentials.

    ``sigma_f=None`` selects ``sigma_scale`` times the median pairwise
    embedding distance of each slice; ``truncation=None`` uses ``ceil(t / 2)``
    for a clique of ``t`` segments.  The defaults were picked by
    leave-one-out cross-validation on phantoms.
    """

    w: float = 1.0
    sigma_f: float = None
    truncation: int = None
    lambda_max: float = 32.0
    beta_q: float = 1.0
    k_f: int = 5
    sigma_scale: float = 0.75

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("pairwise weight w must be non-negative")
        if self.sigma_f is not None and self.sigma_f <= 0:
            raise ValueError("sigma_f must be positive")
        if self.sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError("truncation T must be >= 1")
        if self.lambda_max < 0 or self.beta_q < 0:
            raise ValueError("lambda_max and beta_q must be non-negative")
        if self.k_f < 0:
            raise ValueError("k_f must be non-negative")


@dataclass(eq=False)
class CrfGraph:
    unary: np.ndarray                      # (n, 2) energy per label
    edges: np.ndarray                      # (E, 2) i < j
    edge_weight: np.ndarray                # (E,) cost when labels differ
    cliques: list = field(default_factory=list)
    lambda_q: np.ndarray = None            # (S,)
    truncation: np.ndarray = None          # (S,) T per clique
    embeddings: np.ndarray = None          # (n, d)

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=float).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        self.edge_weight = np.asarray(self.edge_weight, dtype=float).reshape(-1)
        self.cliques = [np.asarray(c, dtype=int) for c in self.cliques]
        if self.lambda_q is None:
            self.lambda_q = np.zeros(len(self.cliques))
        if self.truncation is None:
            self.truncation = np.array([max(1, math.ceil(len(c) / 2)) for c in self.cliques])
        self.lambda_q = np.asarray(self.lambda_q, dtype=float)
        self.truncation = np.asarray(self.truncation, dtype=int)

    @property
    def n_nodes(self):
        return len(self.unary)

    def check(self):
        if not (np.all(np.isfinite(self.unary)) and np.all(np.isfinite(self.edge_weight))
                and np.all(np.isfinite(self.lambda_q))):
            raise FloatingPointError("non-finite potential in CRF graph")


def unary_energy(v, label, model, k=None):
    """Negative log posterior of ``label`` at embedded point ``v``."""
    return float(-np.log(class_posterior_batch(np.asarray(v)[None], model, k)[0, label]))


def _gauss(d2, p, sigma_f):
    return p.w * np.exp(-d2 / (2.0 * sigma_f ** 2))


def pairwise_energy(v_i, v_j, c_i, c_j, p, sigma_f=None):
    """Potts-gated Gaussian affinity; zero when the labels agree."""
    if c_i == c_j:
        return 0.0
    sigma_f = sigma_f if sigma_f is not None else p.sigma_f
    if sigma_f is None:
        raise ValueError("sigma_f must be given for a single pair")
    d2 = float(np.sum((np.asarray(v_i, float) - np.asarray(v_j, float)) ** 2))
    return float(_gauss(d2, p, sigma_f))


def clique_quality(segments, embeddings):
    """Mean per-dimension population variance of the clique's embedded coordinates."""
    pts = np.asarray(embeddings, dtype=float)[np.asarray(segments, dtype=int)]
    if len(pts) < 2:
        return 0.0
    return float(np.mean(np.var(pts, axis=0)))


def clique_lambda(quality, p):
    return p.lambda_max * math.exp(-p.beta_q * quality)


def clique_energy(labels, lambda_q, T, mode="linear"):
    """Robust clique penalty from the labels of its members.

    ``mode="linear"`` is ``lambda_q * min(C / T, 1)``; ``mode="power"`` is
    ``lambda_q * C**(1/T)`` below ``T`` and ``lambda_q`` from ``T`` on.  Only
    the linear form is minimised exactly.
    """
    labels = np.asarray(labels)
    n1 = int(np.sum(labels == 1))
    C = min(n1, len(labels) - n1)
    if mode == "linear":
        return lambda_q * min(C / T, 1.0)
    if mode == "power":
        return lambda_q * C ** (1.0 / T) if C < T else float(lambda_q)
    raise ValueError(f"unknown clique mode {mode!r}")


def energy_terms(graph, labeling, mode="linear"):
    """``(unary, pairwise, clique)`` subtotals of the energy of ``labeling``."""
    x = np.asarray(labeling)
    if x.shape != (graph.n_nodes,):
        raise ValueError(f"labeling has shape {x.shape}, expected ({graph.n_nodes},)")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    x = x.astype(int)
    u = float(np.sum(graph.unary[np.arange(len(x)), x]))
    if len(graph.edges):
        cut = x[graph.edges[:, 0]] != x[graph.edges[:, 1]]
        pw = float(np.sum(graph.edge_weight[cut]))
    else:
        pw = 0.0
    cl = 0.0
    for c, lam, T in zip(graph.cliques, graph.lambda_q, graph.truncation):
        cl += clique_energy(x[c], lam, T, mode)
    return u, pw, cl


def total_energy(graph, labeling, mode="linear"):
    u, pw, cl = energy_terms(graph, labeling, mode)
    return u + pw + cl


def _count_penalty(t, lam, T):
    """Clique penalty as a function of the number of tumor labels, 0..t."""
    n = np.arange(t + 1)
    return lam * np.minimum(np.minimum(n, t - n) / T, 1.0)


def _concave_pieces(F):
    """Write ``F(n) = F(0) + slope*n + sum_j gamma_j min(n, j)`` with ``gamma_j >= 0``."""
    d = np.diff(F)
    if len(d) == 0:
        return 0.0, []
    gammas = d[:-1] - d[1:]
    scale = max(1.0, float(np.max(np.abs(F))))
    if np.any(gammas < -1e-9 * scale):
        raise ValueError("clique penalty is not concave in the label count")
    pieces = [(j + 1, g) for j, g in enumerate(gammas) if g > 1e-12 * scale]
    return float(d[-1]), pieces


def minimize(graph):
    """Exact minimum-energy binary labelling via a single s-t min-cut."""
    graph.check()
    n = graph.n_nodes
    e0 = graph.unary[:, 0].copy()
    e1 = graph.unary[:, 1].copy()
    aux = []  # (nodes, j, gamma)
    for c, lam, T in zip(graph.cliques, graph.lambda_q, graph.truncation):
        if lam <= 0 or len(c) < 2:
            continue
        slope, pieces = _concave_pieces(_count_penalty(len(c), lam, T))
        np.add.at(e1, c, slope)
        for j, g in pieces:
            aux.append((c, j, g))
    g = maxflow.Graph[float](n + len(aux), len(graph.edges) + sum(len(a[0]) for a in aux))
    nodes = g.add_nodes(n + len(aux))
    # sink side means label 1; a node on the sink side pays its source capacity
    diff = e1 - e0
    g.add_grid_tedges(nodes[:n], np.maximum(diff, 0.0), np.maximum(-diff, 0.0))
    if len(graph.edges):
        w = graph.edge_weight
        g.add_edges(graph.edges[:, 0], graph.edges[:, 1], w, w)
    for k, (c, j, gamma) in enumerate(aux):
        z = n + k
        # z = 1 pays gamma*j; z = 0 pays gamma for every member labelled 1
        g.add_tedge(z, gamma * j, 0.0)
        g.add_edges(np.full(len(c), z), c, np.full(len(c), gamma), np.zeros(len(c)))
    g.maxflow()
    x = g.get_grid_segments(nodes[:n]).astype(np.uint8)
    # guard against round-off in the flow: never worse than a uniform labelling
    best, best_e = x, total_energy(graph, x)
    for lab in (0, 1):
        u = np.full(n, lab, dtype=np.uint8)
        e = total_energy(graph, u)
        if e < best_e:
            best, best_e = u, e
    return best


def _sigma(V, p):
    if p.sigma_f is not None:
        return float(p.sigma_f)
    if len(V) < 2:
        return 1.0
    med = float(np.median(pdist(V)))
    return p.sigma_scale * med if med > 0 else 1.0


def build_graph(V, unary, sp_edges, cliques, p):
    """Assemble a :class:`CrfGraph` from embedded segments.

    Edges are the spatial adjacencies plus each node's ``k_f`` nearest
    neighbours in embedding space.
    """
    V = np.asarray(V, dtype=float)
    n = len(V)
    pairs = [np.asarray(sp_edges, dtype=int).reshape(-1, 2)]
    if p.k_f > 0 and n > 1:
        k = min(p.k_f + 1, n)
        _, nn = cKDTree(V).query(V, k=k)
        nn = np.asarray(nn).reshape(n, k)
        src = np.repeat(np.arange(n), k)
        dst = nn.ravel()
        keep = src != dst
        pairs.append(np.column_stack([src[keep], dst[keep]]))
    E = np.concatenate(pairs)
    E = np.column_stack([E.min(axis=1), E.max(axis=1)])
    E = E[E[:, 0] != E[:, 1]]
    E = np.unique(E, axis=0) if len(E) else E.reshape(0, 2)
    sigma = _sigma(V, p)
    d2 = np.sum((V[E[:, 0]] - V[E[:, 1]]) ** 2, axis=1) if len(E) else np.zeros(0)
    weights = _gauss(d2, p, sigma)
    lam = []
    T = []
    for c in cliques:
        q = clique_quality(c, V) / sigma ** 2
        lam.append(clique_lambda(q, p))
        T.append(p.truncation if p.truncation is not None else max(1, math.ceil(len(c) / 2)))
    return CrfGraph(unary=unary, edges=E, edge_weight=weights, cliques=list(cliques),
                    lambda_q=np.asarray(lam), truncation=np.asarray(T), embeddings=V)


@dataclass
class SliceLog:
    slice_index: int
    initial_energy: float
    final_energy: float
    n_nodes: int
    n_edges: int
    n_cliques: int

    def line(self):
        return (f"slice {self.slice_index}: initial {self.initial_energy:.6f} "
                f"final {self.final_energy:.6f} nodes {self.n_nodes} "
                f"edges {self.n_edges} cliques {self.n_cliques}")


def _centers(sp, r):
    H, W = sp.labels.shape
    c = np.rint(sp.centroids).astype(int)
    c[:, 0] = np.clip(c[:, 0], r, H - 1 - r)
    c[:, 1] = np.clip(c[:, 1], r, W - 1 - r)
    return c


def segment_slice_labels(img, model, p, reference, target_size=12, group_factor=4,
                         seed=0, slice_index=0):
    """Label one axial slice; returns ``(pixel_labels, SliceLog)``."""
    r = patch_footprint(model.window, model.shift)
    if min(img.shape) < 2 * r + 1:
        raise ValueError(f"slice {img.shape} smaller than the patch footprint {2 * r + 1}")
    sp = segment_slice(img, target_size, seed=seed, slice_index=slice_index)
    sp_edges = adjacency(sp)
    cliques = build_cliques(sp, group_factor, seed=seed, edges=sp_edges)
    mats = extract_patch_stack(img, _centers(sp, r), model.window, model.shift, reference)
    bases, _ = subspace_stack(mats, model.m)
    V = embed_stack(bases, model)
    unary = -np.log(class_posterior_batch(V, model))
    graph = build_graph(V, unary, sp_edges, cliques.cliques, p)
    x = minimize(graph)
    info = SliceLog(slice_index, total_energy(graph, np.argmin(unary, axis=1)),
                    total_energy(graph, x), graph.n_nodes, len(graph.edges),
                    len(graph.cliques))
    return x[sp.labels], info


def segment_volume(v, model, p=None, target_size=12, group_factor=4, seed=0,
                   reference=None, return_log=False):
    """Segment every axial slice of ``v`` and stack the labels into a Mask.

    ``reference`` is the intensity subtracted from every patch; by default
    the volume median, which is the background level whenever the lesion
    occupies less than half the volume.
    """
    p = p or PotentialParams()
    data = np.asarray(v.data, dtype=float)
    if reference is None:
        reference = float(np.median(data))
    out = np.zeros(data.shape, dtype=np.uint8)
    logs = []
    for z in range(data.shape[2]):
        out[:, :, z], info = segment_slice_labels(
            data[:, :, z], model, p, reference, target_size, group_factor, seed, z)
        log.debug(info.line())
        logs.append(info)
    mask = Mask(out, v.spacing)
    return (mask, logs) if return_log else mask
