"""Volume containers, the NCVOL raw format, resampling, morphology and overlap metrics.

Arrays are indexed ``data[x, y, z]``.  Binary masks are plain boolean numpy
arrays with the same shape as the volume they describe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

PBS, FAT, LNP = 0, 1, 2
LABEL_NAMES = {PBS: "pbs", FAT: "fat", LNP: "lnp"}
PALETTE = np.array([[0, 0, 0], [230, 105, 180], [255, 255, 255]], dtype=np.uint8)

_MAGIC = "NCVOL 1"


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_axis: int = 2

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("amplitudes must be finite")
        if data.size and data.min() < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.depth_axis not in (0, 1, 2):
            raise ValueError("depth_axis must be 0, 1 or 2")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_axis: int = 2

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError("label volume must be 3D")
        if labels.size and (labels.min() < 0 or labels.max() > LNP):
            raise ValueError("labels must be PBS=0, FAT=1 or LNP=2")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


@dataclass(frozen=True)
class SegReport:
    dsc_lnp: float
    dsc_fat: float
    dsc_pbs: float
    counts_a: dict = field(default_factory=dict)
    counts_b: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dsc_lnp": self.dsc_lnp,
            "dsc_fat": self.dsc_fat,
            "dsc_pbs": self.dsc_pbs,
            "counts_a": dict(self.counts_a),
            "counts_b": dict(self.counts_b),
        }


# ---------------------------------------------------------------------------
# I/O


def _write_raw(path, payload: np.ndarray, dtype: str, spacing, depth_axis: int):
    nx, ny, nz = payload.shape
    header = (
        f"{_MAGIC}\n"
        f"dims {nx} {ny} {nz}\n"
        f"spacing {' '.join(repr(float(s)) for s in spacing)}\n"
        f"depth_axis {depth_axis}\n"
        f"dtype {dtype}\n"
        "end\n"
    )
    np_dtype = "<f4" if dtype == "f32le" else "u1"
    body = np.asarray(payload).astype(np_dtype).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body)


def _read_raw(path):
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(6):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise VolumeFormatError(f"{path}: truncated header")
        lines.append(raw[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    if lines[0] != _MAGIC:
        raise VolumeFormatError(f"{path}: bad magic line {lines[0]!r}")
    try:
        key, *vals = lines[1].split()
        assert key == "dims" and len(vals) == 3
        dims = tuple(int(v) for v in vals)
        key, *vals = lines[2].split()
        assert key == "spacing" and len(vals) == 3
        spacing = tuple(float(v) for v in vals)
        key, val = lines[3].split()
        assert key == "depth_axis"
        depth_axis = int(val)
        key, dtype = lines[4].split()
        assert key == "dtype" and dtype in ("f32le", "u8")
        assert lines[5] == "end"
    except (AssertionError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header") from exc
    if min(dims) < 1:
        raise VolumeFormatError(f"{path}: dims must be positive")
    np_dtype = np.dtype("<f4") if dtype == "f32le" else np.dtype("u1")
    count = math.prod(dims)
    payload = raw[pos:]
    if len(payload) != count * np_dtype.itemsize:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload) // np_dtype.itemsize} values, header declares {count}"
        )
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims, order="F")
    return data, spacing, depth_axis, dtype


def write_volume(path, vol: IntensityVolume) -> None:
    _write_raw(path, vol.data, "f32le", vol.spacing, vol.depth_axis)


def read_volume(path) -> IntensityVolume:
    data, spacing, depth_axis, dtype = _read_raw(path)
    if dtype != "f32le":
        raise VolumeFormatError(f"{path}: expected dtype f32le, found {dtype}")
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite amplitude")
    if data.min() < 0:
        raise VolumeFormatError(f"{path}: negative amplitude")
    return IntensityVolume(data, spacing, depth_axis)


def write_labels(path, labels: LabelVolume) -> None:
    _write_raw(path, labels.labels, "u8", labels.spacing, labels.depth_axis)


def read_labels(path) -> LabelVolume:
    data, spacing, depth_axis, dtype = _read_raw(path)
    if dtype != "u8":
        raise VolumeFormatError(f"{path}: expected dtype u8, found {dtype}")
    if data.max() > LNP:
        raise VolumeFormatError(f"{path}: label code out of range")
    return LabelVolume(data.copy(), spacing, depth_axis)


def write_mask(path, mask: np.ndarray, spacing=(1.0, 1.0, 1.0), depth_axis: int = 2) -> None:
    """Masks and small integer maps share the u8 layout of label files."""
    _write_raw(path, np.asarray(mask).astype(np.uint8), "u8", spacing, depth_axis)


def write_map(path, values: np.ndarray, spacing=(1.0, 1.0, 1.0), depth_axis: int = 2) -> None:
    _write_raw(path, np.asarray(values, dtype=float), "f32le", spacing, depth_axis)


# ---------------------------------------------------------------------------
# Resampling


def downsample(vol: IntensityVolume, factor: int) -> IntensityVolume:
    """Block-mean pooling; trailing partial blocks average the voxels they hold."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return vol
    data = vol.data
    for axis in range(3):
        starts = np.arange(0, data.shape[axis], factor)
        sums = np.add.reduceat(data, starts, axis=axis)
        counts = np.diff(np.append(starts, data.shape[axis]))
        shape = [1, 1, 1]
        shape[axis] = len(counts)
        data = sums / counts.reshape(shape)
    return IntensityVolume(data, tuple(s * factor for s in vol.spacing), vol.depth_axis)


def auto_downsample_factor(dims, limit: int = 100) -> int:
    """Smallest integer factor that brings every dimension strictly below ``limit``.

    Up to 396 voxels per side this is at most 4.  Sides of 397..400 keep a
    partial block at factor 4 (ceil(400/4) == 100), so they get factor 5.
    """
    dims = [int(d) for d in dims]
    factor = 1
    while any(math.ceil(d / factor) >= limit for d in dims):
        factor += 1
    return factor


def upsample_labels(labels: np.ndarray, factor: int, dims) -> np.ndarray:
    """Nearest-neighbour expansion back to ``dims`` (inverse of block pooling)."""
    if factor == 1:
        return np.asarray(labels).copy()
    idx = [np.arange(d) // factor for d in dims]
    return np.asarray(labels)[np.ix_(*idx)]


# ---------------------------------------------------------------------------
# Metrics


def dice(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        raise ValueError("dice is undefined for two empty masks")
    return 2.0 * int(np.count_nonzero(x & y)) / total


def seg_report(a: LabelVolume | np.ndarray, b: LabelVolume | np.ndarray) -> SegReport:
    la = a.labels if isinstance(a, LabelVolume) else np.asarray(a)
    lb = b.labels if isinstance(b, LabelVolume) else np.asarray(b)
    if la.shape != lb.shape:
        raise ValueError(f"label shapes differ: {la.shape} vs {lb.shape}")
    scores = {}
    counts_a, counts_b = {}, {}
    for code, name in LABEL_NAMES.items():
        ma, mb = la == code, lb == code
        counts_a[name] = int(ma.sum())
        counts_b[name] = int(mb.sum())
        # a class absent from both inputs counts as perfect agreement
        scores[name] = 1.0 if counts_a[name] + counts_b[name] == 0 else dice(ma, mb)
    return SegReport(scores["lnp"], scores["fat"], scores["pbs"], counts_a, counts_b)


# ---------------------------------------------------------------------------
# Morphology


def _structure(connectivity: int) -> np.ndarray:
    ranks = {6: 1, 18: 2, 26: 3}
    if connectivity not in ranks:
        raise ValueError("connectivity must be 6, 18 or 26")
    return ndimage.generate_binary_structure(3, ranks[connectivity])


def neighbor_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """Half of the neighbourhood: one offset per undirected neighbour pair, raster order."""
    struct = _structure(connectivity)
    offsets = []
    for off in np.argwhere(struct) - 1:
        off = tuple(int(o) for o in off)
        if off > (0, 0, 0):
            offsets.append(off)
    return offsets


def shifted_pairs(shape, offset):
    """Slices ``(a, b)`` so that ``arr[b]`` is the neighbour at ``offset`` of ``arr[a]``."""
    a = tuple(slice(max(0, -d), n - max(0, d)) for d, n in zip(offset, shape))
    b = tuple(slice(max(0, d), n - max(0, -d)) for d, n in zip(offset, shape))
    return a, b


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (g**2).sum(axis=0) <= r * r


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (voxels) to the nearest non-member; the border is outside."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance transform of an empty mask")
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1, 1:-1]


def morphological_open(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        raise ValueError("opening radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    se = ball(radius)
    pad = int(radius) + 1
    padded = np.pad(mask, pad, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=se, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=se, border_value=0)
    return opened[pad:-pad, pad:-pad, pad:-pad]


def connected_components(mask: np.ndarray, connectivity: int = 26):
    """Return ``(labels, sizes)``; component ids run from 1, ``sizes[i]`` belongs to id ``i + 1``."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def largest_component(mask: np.ndarray, connectivity: int = 18) -> np.ndarray:
    labels, sizes = connected_components(mask, connectivity)
    if sizes.size == 0:
        return np.zeros_like(mask, dtype=bool)
    return labels == (int(np.argmax(sizes)) + 1)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def outer_rim(mask: np.ndarray) -> np.ndarray:
    """Members with at least one 6-neighbour outside the mask (the border is outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = ndimage.binary_erosion(padded, structure=_structure(6), border_value=0)
    return mask & ~inner[1:-1, 1:-1, 1:-1]


def _hull_members(points: np.ndarray, candidates: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Boolean membership of ``candidates`` in the convex hull of ``points`` (any affine rank)."""
    origin = points.mean(axis=0)
    centred = points - origin
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    rank = int(np.sum(sv > 1e-9 * max(1.0, sv[0] if sv.size else 1.0)))
    rel = candidates - origin
    if rank < 3:
        # drop candidates off the affine span, then test inside the span
        basis = vt[:rank]
        coords = rel @ basis.T
        off_span = np.linalg.norm(rel - coords @ basis, axis=1)
        inside = off_span <= tol
        if rank == 0:
            return inside
        pts = centred @ basis.T
        if rank == 1:
            lo, hi = pts[:, 0].min(), pts[:, 0].max()
            return inside & (coords[:, 0] >= lo - tol) & (coords[:, 0] <= hi + tol)
        hull = ConvexHull(pts)
        eq = hull.equations
        return inside & np.all(coords @ eq[:, :-1].T + eq[:, -1] <= tol, axis=1)
    hull = ConvexHull(centred)
    eq = hull.equations
    out = np.empty(len(rel), dtype=bool)
    chunk = 1 << 16
    for start in range(0, len(rel), chunk):
        part = rel[start : start + chunk]
        out[start : start + chunk] = np.all(part @ eq[:, :-1].T + eq[:, -1] <= tol, axis=1)
    return out


def convex_hull_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels whose centres lie in the convex hull of the member voxel centres."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("convex hull of an empty mask")
    # interior voxels never carry hull vertices
    points = np.argwhere(outer_rim(mask)).astype(float)
    lo = points.min(axis=0).astype(int)
    hi = points.max(axis=0).astype(int)
    grid = np.mgrid[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    candidates = grid.reshape(3, -1).T.astype(float)
    inside = _hull_members(points, candidates)
    out = np.zeros_like(mask)
    box = out[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    box[...] = inside.reshape(box.shape)
    return out | mask


# ---------------------------------------------------------------------------
# Rendering


def render_slice(array: np.ndarray, axis: int, index: int, labels: bool) -> np.ndarray:
    """RGB uint8 image of one axial slice; labels use the fixed palette, intensities min-max grey."""
    array = np.asarray(array)
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    if not 0 <= index < array.shape[axis]:
        raise IndexError(f"slice index {index} out of range for axis {axis} (size {array.shape[axis]})")
    sl = np.take(array, index, axis=axis)
    if labels:
        return PALETTE[sl.astype(np.intp)]
    sl = sl.astype(float)
    lo, hi = float(sl.min()), float(sl.max())
    grey = np.zeros_like(sl) if hi <= lo else (sl - lo) / (hi - lo)
    grey = np.round(grey * 255).astype(np.uint8)
    return np.repeat(grey[..., None], 3, axis=-1)
