"""Compact superpixels on axial slices and their grouping into cliques.

Superpixels come from grid-initialised k-means over scaled ``(x, y,
intensity)`` features, followed by a connectivity pass that merges stray
fragments into the largest touching segment.  Cliques re-run the same
clustering on segment centroids and are split wherever they are not
spatially connected.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

__all__ = ["SuperpixelMap", "CliqueMap", "segment_slice", "build_cliques", "adjacency"]


@dataclass(eq=False)
class SuperpixelMap:
    labels: np.ndarray          # (H, W) segment id per pixel, ids 0..k-1
    intensity: np.ndarray       # (H, W) source pixels
    slice_index: int = 0
    intensity_scale: float = 1.0

    @property
    def n_segments(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)

    @property
    def centroids(self):
        """``(k, 2)`` mean pixel coordinates of each segment."""
        ii, jj = np.indices(self.labels.shape)
        lab = self.labels.ravel()
        n = self.sizes
        cx = np.bincount(lab, ii.ravel(), self.n_segments) / n
        cy = np.bincount(lab, jj.ravel(), self.n_segments) / n
        return np.column_stack([cx, cy])

    @property
    def mean_intensity(self):
        return (np.bincount(self.labels.ravel(), self.intensity.ravel().astype(float),
                            self.n_segments) / self.sizes)

    def members(self, seg):
        return np.argwhere(self.labels == seg)


@dataclass(eq=False)
class CliqueMap:
    cliques: list              # list of int arrays of segment ids
    clique_of: np.ndarray      # (k,) clique index per segment

    def __len__(self):
        return len(self.cliques)


def _grid_centers(shape, k):
    """``k`` points spread over a near-square grid covering ``shape``."""
    H, W = shape
    rows = int(min(k, max(1, round(math.sqrt(k * H / W)))))
    counts = np.diff(np.round(np.linspace(0, k, rows + 1)).astype(int))
    pts = []
    for r, c in enumerate(counts):
        x = (r + 0.5) * H / rows - 0.5
        for j in range(c):
            pts.append((x, (j + 0.5) * W / c - 0.5))
    return np.asarray(pts, dtype=float)


def _kmeans(feats, centers, rng, max_iter=20):
    """Lloyd iterations; empty clusters are reseeded at a random point."""
    assign = None
    for _ in range(max_iter):
        _, new = cKDTree(centers).query(feats)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, feats)
        filled = counts > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            centers[empty] = feats[rng.choice(len(feats), len(empty), replace=False)]
    return assign


def _grid_edges(shape):
    idx = np.arange(shape[0] * shape[1]).reshape(shape)
    a = np.concatenate([idx[:-1, :].ravel(), idx[:, :-1].ravel()])
    b = np.concatenate([idx[1:, :].ravel(), idx[:, 1:].ravel()])
    return a, b


def _components(shape, a, b, keep):
    n = shape[0] * shape[1]
    g = sparse.coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])), shape=(n, n))
    return connected_components(g, directed=False)[1]


def enforce_connectivity(labels):
    """Keep each label's largest 4-connected piece; merge the rest into neighbours."""
    shape = labels.shape
    flat = labels.ravel()
    a, b = _grid_edges(shape)
    comp = _components(shape, a, b, flat[a] == flat[b])
    comp_size = np.bincount(comp)
    # largest component of each label (ties: lowest component id)
    order = np.lexsort((np.arange(len(comp)), -comp_size[comp], flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    main_comp = np.zeros(comp_size.shape, dtype=bool)
    main_comp[comp[order[first]]] = True
    orphan = ~main_comp[comp]
    if orphan.any():
        out = flat.copy()
        region = _components(shape, a, b, orphan[a] & orphan[b])
        seg_size = np.bincount(flat[~orphan], minlength=flat.max() + 1)
        # directed pixel pairs (orphan region -> kept label)
        src = np.concatenate([a, b])
        dst = np.concatenate([b, a])
        sel = orphan[src] & ~orphan[dst]
        touch_region = region[src[sel]]
        touch_label = flat[dst[sel]]
        best = {}
        for r, lab in zip(touch_region, touch_label):
            cur = best.get(r)
            if cur is None or (seg_size[lab], -lab) > (seg_size[cur], -cur):
                best[r] = lab
        for r in np.unique(region[orphan]):
            # an orphan region always touches a kept segment unless nothing is kept
            out[(region == r) & orphan] = best.get(r, flat[orphan][0])
        flat = out
    _, relabeled = np.unique(flat, return_inverse=True)
    return relabeled.reshape(shape)


def segment_slice(pixels, target_size=12, seed=0, slice_index=0, max_iter=20):
    """Partition a 2D slice into ~``target_size``-pixel connected superpixels."""
    img = np.asarray(pixels, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a non-empty 2D slice")
    if target_size < 4:
        raise ValueError("target_size must be at least 4")
    H, W = img.shape
    sd = float(img.std())
    lam_i = sd if sd > 0 else 1.0
    if H * W < target_size:
        return SuperpixelMap(np.zeros((H, W), dtype=int), img, slice_index, lam_i)
    k = max(1, int(round(H * W / target_size)))
    lam_s = math.sqrt(target_size)
    ii, jj = np.indices((H, W))
    feats = np.column_stack([ii.ravel() / lam_s, jj.ravel() / lam_s, img.ravel() / lam_i])
    grid = _grid_centers((H, W), k)
    gi = np.clip(np.rint(grid[:, 0]).astype(int), 0, H - 1)
    gj = np.clip(np.rint(grid[:, 1]).astype(int), 0, W - 1)
    centers = np.column_stack([grid / lam_s, img[gi, gj] / lam_i])
    rng = np.random.default_rng(seed)
    assign = _kmeans(feats, centers, rng, max_iter)
    labels = enforce_connectivity(assign.reshape(H, W))
    return SuperpixelMap(labels, img, slice_index, lam_i)


def adjacency(sp):
    """Sorted ``(E, 2)`` array of segment pairs sharing a 4-connected boundary."""
    lab = sp.labels
    a = np.concatenate([lab[:-1, :].ravel(), lab[:, :-1].ravel()])
    b = np.concatenate([lab[1:, :].ravel(), lab[:, 1:].ravel()])
    diff = a != b
    pairs = np.column_stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])])
    if not len(pairs):
        return np.zeros((0, 2), dtype=int)
    return np.unique(pairs, axis=0)


def build_cliques(sp, group_factor=4, seed=0, edges=None):
    """Group segments into spatially connected cliques of about ``group_factor``."""
    k = sp.n_segments
    if group_factor < 1:
        raise ValueError("group_factor must be >= 1")
    if group_factor == 1 or k == 1:
        clique_of = np.arange(k)
    else:
        k2 = math.ceil(k / group_factor)
        cent = sp.centroids
        lam_s = math.sqrt(sp.sizes.mean() * group_factor)
        lam_i = sp.intensity_scale
        feats = np.column_stack([cent / lam_s, sp.mean_intensity / lam_i])
        grid = _grid_centers(sp.labels.shape, k2)
        _, near = cKDTree(cent).query(grid)
        centers = np.column_stack([grid / lam_s, sp.mean_intensity[near] / lam_i])
        clique_of = _kmeans(feats, centers, np.random.default_rng(seed))
    if edges is None:
        edges = adjacency(sp)
    # split cliques into connected pieces of the segment adjacency graph
    same = clique_of[edges[:, 0]] == clique_of[edges[:, 1]] if len(edges) else np.zeros(0, bool)
    g = sparse.coo_matrix((np.ones(same.sum()), (edges[same, 0], edges[same, 1])),
                          shape=(k, k))
    _, pieces = connected_components(g, directed=False)
    _, clique_of = np.unique(pieces, return_inverse=True)
    order = np.argsort(clique_of, kind="stable")
    bounds = np.flatnonzero(np.diff(clique_of[order])) + 1
    cliques = np.split(order, bounds)
    return CliqueMap(cliques, clique_of)
