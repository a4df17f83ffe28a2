"""Volumes, masks, synthetic contrast phantoms and patch extraction.

Volumes are stored as arrays of shape ``(nx, ny, nz)``; an axial slice is
``data[:, :, k]``.  On disk a volume is a raw little-endian payload with the
x index varying fastest, next to a JSON sidecar describing it.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Volume", "Mask", "PhantomSpec", "generate_phantom", "add_gaussian_noise",
    "load_volume", "save_volume", "load_mask", "save_mask", "crop_roi",
    "extract_patch_matrix", "patch_footprint",
]

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a raw/sidecar pair is missing, malformed or inconsistent."""


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D image with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary label volume, 0 = normal, 1 = tumor."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("mask labels must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask labels must be 0 or 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a single-sphere contrast phantom.

    Intensities are in HU; ``tumor_contrast`` is added to the background
    inside the sphere.  ``tumor_center`` is in voxel coordinates and defaults
    to the volume center.
    """

    volume_dims: tuple = (128, 128, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    background_intensity: float = 60.0
    tumor_contrast: float = 20.0
    tumor_diameter: float = 30.0
    tumor_center: tuple = None
    noise_sd: float = 1.5
    rng_seed: int = 0

    def center(self):
        if self.tumor_center is not None:
            return tuple(float(c) for c in self.tumor_center)
        return tuple((n - 1) / 2.0 for n in self.volume_dims)

    def validate(self):
        _check_spacing(self.spacing)
        if len(self.volume_dims) != 3 or min(self.volume_dims) < 1:
            raise ValueError(f"invalid volume_dims {self.volume_dims}")
        if self.tumor_diameter <= 0:
            raise ValueError("tumor_diameter must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        radius = self.tumor_diameter / 2.0
        for c, n, s in zip(self.center(), self.volume_dims, self.spacing):
            # sphere must fit within the outer faces of the voxel grid
            if c * s - radius < -0.5 * s or c * s + radius > (n - 0.5) * s:
                raise ValueError(
                    f"tumor sphere (diameter {self.tumor_diameter} mm) does not fit "
                    f"inside volume {self.volume_dims} at center {self.center()}")


def sphere_mask(dims, spacing, center, diameter):
    """Voxels whose centers lie within ``diameter / 2`` mm of ``center``."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    d2 = sum(((g - c) * s) ** 2 for g, c, s in zip(grids, center, spacing))
    return d2 <= (diameter / 2.0) ** 2


def generate_phantom(spec):
    """Build a noisy spherical-lesion phantom and its ground truth.

    Intensities are rounded to integer HU after noise injection, as a CT
    scanner would report them, so the result survives an int16 round trip.
    """
    spec.validate()
    inside = sphere_mask(spec.volume_dims, spec.spacing, spec.center(), spec.tumor_diameter)
    clean = np.full(spec.volume_dims, float(spec.background_intensity))
    clean[inside] += spec.tumor_contrast
    noisy = add_gaussian_noise(Volume(clean, spec.spacing), spec.noise_sd, spec.rng_seed)
    data = np.rint(noisy.data)
    return Volume(data, spec.spacing), Mask(inside.astype(np.uint8), spec.spacing)


def add_gaussian_noise(v, sd, seed=None):
    """Return ``v`` plus i.i.d. N(0, sd^2) noise per voxel."""
    if sd < 0:
        raise ValueError("noise sd must be non-negative")
    data = np.asarray(v.data, dtype=float)
    if sd == 0:
        return Volume(data.copy(), v.spacing)
    rng = np.random.default_rng(seed)
    return Volume(data + rng.normal(0.0, sd, size=data.shape), v.spacing)


def _paths(path):
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".raw"), path.with_name(path.name + ".json")


def _save(array, spacing, path, dtype_code):
    raw_path, json_path = _paths(path)
    header = {
        "dims": [int(n) for n in array.shape],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype_code,
        "order": "x-fastest",
    }
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.asarray(array, dtype=_DTYPES[dtype_code]).tobytes(order="F"))
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    return raw_path, json_path


def _load(path, expected_dtype=None):
    raw_path, json_path = _paths(path)
    if not json_path.exists():
        raise VolumeFormatError(f"missing sidecar header {json_path}")
    if not raw_path.exists():
        raise VolumeFormatError(f"missing payload {raw_path}")
    try:
        header = json.loads(json_path.read_text())
        dims = tuple(int(n) for n in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        code = header["dtype"]
        order = header.get("order", "x-fastest")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {json_path}: {exc}") from exc
    if code not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {code!r}")
    if expected_dtype is not None and code != expected_dtype:
        raise VolumeFormatError(f"expected dtype {expected_dtype!r}, header says {code!r}")
    if order != "x-fastest":
        raise VolumeFormatError(f"unsupported voxel order {order!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"invalid dims {dims}")
    payload = raw_path.read_bytes()
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload size {len(payload)} bytes does not match header dims {dims} "
            f"({expected} bytes)")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return data, spacing, code


def save_volume(v, path):
    """Write ``v`` as ``<path>.raw`` (int16) plus ``<path>.json``."""
    data = np.asarray(v.data)
    if not np.issubdtype(data.dtype, np.integer):
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.rint(data)):
            raise ValueError("volume data must be integer valued to be stored as int16")
    info = np.iinfo(np.int16)
    if data.size and (data.min() < info.min or data.max() > info.max):
        raise ValueError("volume data out of int16 range")
    return _save(data, v.spacing, path, "i16")


def load_volume(path):
    data, spacing, _ = _load(path, "i16")
    return Volume(data.astype(float), spacing)


def save_mask(m, path):
    """Write ``m`` as ``<path>.raw`` (uint8) plus ``<path>.json``."""
    return _save(m.data, m.spacing, path, "u8")


def load_mask(path):
    data, spacing, _ = _load(path, "u8")
    return Mask(np.array(data), spacing)


def crop_roi(v, origin, dims):
    """Sub-volume starting at voxel ``origin`` with extent ``dims``.

    Works for both :class:`Volume` and :class:`Mask`.
    """
    origin = tuple(int(o) for o in origin)
    dims = tuple(int(d) for d in dims)
    if len(origin) != 3 or len(dims) != 3:
        raise ValueError("origin and dims need three components")
    for o, d, n in zip(origin, dims, v.data.shape):
        if o < 0 or d < 1 or o + d > n:
            raise IndexError(f"ROI origin {origin} dims {dims} outside volume {v.data.shape}")
    sl = tuple(slice(o, o + d) for o, d in zip(origin, dims))
    return type(v)(v.data[sl].copy(), v.spacing)


def patch_footprint(window=5, shift=2):
    """Half-width of the pixel neighbourhood read by :func:`extract_patch_matrix`."""
    return window // 2 + shift


def _shift_offsets(shift):
    r = np.arange(-shift, shift + 1)
    return [(dx, dy) for dx in r for dy in r]


def extract_patch_matrix(v, center, window=5, shift=2, reference=None):
    """Data matrix of shifted ``window x window`` sub-windows around ``center``.

    Column ``j`` is the vectorised window displaced by the ``j``-th offset in
    ``[-shift, shift]^2`` on the axial slice containing ``center``, giving a
    ``window**2 x (2*shift+1)**2`` matrix.

    With ``reference=None`` the matrix is z-normalised (matrix mean removed,
    divided by the matrix sd, or by 1 when the sd is zero).  Otherwise the
    scalar ``reference`` intensity is subtracted instead, which keeps the
    absolute contrast of homogeneous regions visible to the subspace.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if shift < 0:
        raise ValueError("shift must be non-negative")
    data = np.asarray(v.data if isinstance(v, (Volume, Mask)) else v)
    if data.ndim == 3:
        cx, cy, cz = (int(c) for c in center)
        if not 0 <= cz < data.shape[2]:
            raise IndexError(f"slice {cz} outside volume")
        img = data[:, :, cz]
    else:
        cx, cy = (int(c) for c in center[:2])
        img = data
    r = patch_footprint(window, shift)
    if cx - r < 0 or cy - r < 0 or cx + r >= img.shape[0] or cy + r >= img.shape[1]:
        raise IndexError(f"patch window around ({cx}, {cy}) exceeds slice bounds {img.shape}")
    h = window // 2
    cols = [img[cx + dx - h:cx + dx + h + 1, cy + dy - h:cy + dy + h + 1].ravel()
            for dx, dy in _shift_offsets(shift)]
    mat = np.asarray(cols, dtype=float).T
    if reference is not None:
        return mat - float(reference)
    mat = mat - mat.mean()
    sd = mat.std()
    return mat / sd if sd > 0 else mat


def extract_patch_stack(img, centers, window=5, shift=2, reference=0.0):
    """Vectorised reference-mode extraction for many centers on one 2D slice.

    Returns an array of shape ``(n, window**2, (2*shift+1)**2)`` equal to
    stacking :func:`extract_patch_matrix` outputs with the same ``reference``.
    """
    img = np.asarray(img, dtype=float)
    centers = np.asarray(centers, dtype=int).reshape(-1, 2)
    r = patch_footprint(window, shift)
    if len(centers) and ((centers < r).any() or (centers + r >= np.array(img.shape)).any()):
        raise IndexError("patch window exceeds slice bounds")
    h = window // 2
    wx, wy = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="ij")
    offs = np.array(_shift_offsets(shift))
    # rows: window pixel (x-major, matching ravel); columns: shift
    px = centers[:, 0, None, None] + wx.ravel()[None, :, None] + offs[None, None, :, 0]
    py = centers[:, 1, None, None] + wy.ravel()[None, :, None] + offs[None, None, :, 1]
    return img[px, py] - float(reference)
