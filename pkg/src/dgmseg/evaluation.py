"""Segmentation error measures and the 0-100 challenge scoring scheme."""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

__all__ = [
    "ScoreReference", "MetricReport", "REFERENCE", "overlap_error",
    "rel_abs_volume_diff", "surface_distances", "border_voxels", "dice",
    "challenge_score", "report",
]


@dataclass(frozen=True)
class ScoreReference:
    """Metric values that a human rater reaches, scored as 90."""

    overlap_error: float = 12.94
    volume_diff: float = 9.64
    avg_surface: float = 0.40
    rms_surface: float = 0.72
    max_surface: float = 4.0


REFERENCE = ScoreReference()


@dataclass
class MetricReport:
    overlap_error_pct: float
    volume_diff_pct: float
    avg_surf_mm: float
    rms_surf_mm: float
    max_surf_mm: float
    dice: float
    scores: dict
    mean_score: float

    def to_dict(self):
        return asdict(self)


def _array(m):
    return np.asarray(m if isinstance(m, np.ndarray) else getattr(m, "data", m)).astype(bool)


def _sets(a, b):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def overlap_error(a, b):
    """Volumetric overlap error in percent, ``100 (1 - |A & B| / |A | B|)``."""
    a, b = _sets(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return 100.0 * (1.0 - np.count_nonzero(a & b) / union)


def rel_abs_volume_diff(a, b):
    """Relative absolute volume difference of ``a`` against ground truth ``b`` (%)."""
    a, b = _sets(a, b)
    nb = np.count_nonzero(b)
    if nb == 0:
        raise ValueError("ground truth mask is empty")
    return 100.0 * abs(np.count_nonzero(a) - nb) / nb


def dice(a, b):
    a, b = _sets(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def border_voxels(a):
    """Foreground voxels with a background face neighbour or on the volume edge."""
    a = np.asarray(a, dtype=bool)
    padded = np.pad(a, 1, constant_values=False)
    inner = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(a.ndim, 1))
    return a & ~inner[tuple(slice(1, -1) for _ in range(a.ndim))]


def _nearest(src, dst):
    _, idx = cKDTree(dst).query(src)
    # recompute with the plain formula so results do not depend on tree internals
    return np.sqrt(np.sum((src - dst[idx]) ** 2, axis=1))


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Average, RMS and maximum symmetric surface distance in mm."""
    a, b = _sets(a, b)
    if not a.any() or not b.any():
        raise ValueError("surface distance is undefined for an empty mask")
    s = np.asarray(spacing, dtype=float)
    pa = np.argwhere(border_voxels(a)) * s
    pb = np.argwhere(border_voxels(b)) * s
    d = np.concatenate([_nearest(pa, pb), _nearest(pb, pa)])
    # exactly rounded sums do not depend on order, so swapping a and b is exact
    n = len(d)
    return math.fsum(d) / n, math.sqrt(math.fsum(d * d) / n), float(d.max())


def challenge_score(value, reference):
    """Linear score: 100 at zero error, 90 at ``reference``, floored at 0."""
    if reference <= 0:
        raise ValueError("reference value must be positive")
    return max(0.0, 100.0 - 10.0 * (value / reference))


def report(a, b, spacing=None, reference=REFERENCE):
    """All five error measures, Dice, per-measure scores and their mean."""
    if spacing is None:
        spacing = getattr(b, "spacing", (1.0, 1.0, 1.0))
    oe = overlap_error(a, b)
    vd = rel_abs_volume_diff(a, b)
    avg, rms, mx = surface_distances(a, b, spacing)
    scores = {
        "overlap_error": challenge_score(oe, reference.overlap_error),
        "volume_diff": challenge_score(vd, reference.volume_diff),
        "avg_surf": challenge_score(avg, reference.avg_surface),
        "rms_surf": challenge_score(rms, reference.rms_surface),
        "max_surf": challenge_score(mx, reference.max_surface),
    }
    return MetricReport(oe, vd, avg, rms, mx, dice(a, b), scores,
                        float(np.mean(list(scores.values()))))
