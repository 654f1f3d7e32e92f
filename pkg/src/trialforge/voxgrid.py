"""Voxel containers, physical geometry, morphology and the ITSV file format.

Arrays are indexed ``[x, y, z]``.  Linearisation (for hashing, file
payloads and tie-breaking) is x-fastest, i.e. Fortran order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from trialforge.errors import VolumeError

HU_MIN = -1024
HU_MAX = 3071
NODULE_LABEL = 23
ALPHA_MIN = 0.03
ALPHA_MAX = 1.5

MAGIC = b"ITSV1\n"
_DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2")}
_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class Spacing:
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        for v in (self.sx, self.sy, self.sz):
            if not (math.isfinite(v) and v > 0):
                raise VolumeError(f"spacing must be finite and positive, got {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.sx, self.sy, self.sz)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def iso(cls, s: float) -> "Spacing":
        return cls(s, s, s)

    @classmethod
    def of(cls, value) -> "Spacing":
        if isinstance(value, Spacing):
            return value
        if np.isscalar(value):
            return cls.iso(float(value))
        sx, sy, sz = (float(v) for v in value)
        return cls(sx, sy, sz)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D grid with physical spacing.

    Use :class:`LabelVolume` (uint8 anatomy labels) or :class:`HUVolume`
    (int16 Hounsfield units).  The voxel array is made read-only on
    construction so volumes can be shared between workers.
    """

    voxels: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing.iso(1.0))

    dtype_name = ""

    def __post_init__(self):
        want = _DTYPES[self.dtype_name]
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"volume must be 3-D and nonempty, got shape {arr.shape}")
        if arr.dtype != want:
            if self.dtype_name == "i16":
                self._check_hu(arr)
            elif arr.size and (arr.min() < 0 or arr.max() > 255):
                raise VolumeError("label values must fit in 8 bits")
            arr = arr.astype(want)
        else:
            if self.dtype_name == "i16":
                self._check_hu(arr)
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @staticmethod
    def _check_hu(arr):
        lo, hi = int(arr.min()), int(arr.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise VolumeError(f"HU values outside [{HU_MIN}, {HU_MAX}]: min={lo} max={hi}")

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.voxels.shape)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.dims == other.dims
            and np.array_equal(self.voxels, other.voxels)
        )

    def to_bytes(self) -> bytes:
        sx, sy, sz = self.spacing.as_tuple()
        nx, ny, nz = self.dims
        header = f"dims={nx},{ny},{nz};spacing={sx!r},{sy!r},{sz!r};dtype={self.dtype_name}\n"
        payload = np.asarray(self.voxels, dtype=_DTYPES[self.dtype_name]).tobytes(order="F")
        return MAGIC + header.encode("ascii") + payload

    def replace(self, voxels: np.ndarray) -> "Volume":
        return type(self)(voxels, self.spacing)


class LabelVolume(Volume):
    dtype_name = "u8"

    def mask(self, labels) -> np.ndarray:
        return np.isin(self.voxels, list(_as_label_set(labels)))


class HUVolume(Volume):
    dtype_name = "i16"


AnyVolume = Union[LabelVolume, HUVolume]


def _as_label_set(labels) -> set:
    if isinstance(labels, (int, np.integer)):
        return {int(labels)}
    return {int(x) for x in labels}


def parse_volume(data: bytes) -> AnyVolume:
    if not data.startswith(MAGIC):
        raise VolumeError("bad magic: not an ITSV1 volume")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise VolumeError("missing header line")
    try:
        header = data[len(MAGIC):end].decode("ascii")
        fields = dict(part.split("=", 1) for part in header.split(";"))
        dims = tuple(int(v) for v in fields["dims"].split(","))
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
        dtype_name = fields["dtype"]
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise VolumeError(f"malformed header: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or min(dims) < 1:
        raise VolumeError(f"malformed header: {header!r}")
    if dtype_name not in _DTYPES:
        raise VolumeError(f"unknown dtype {dtype_name!r}")
    dt = _DTYPES[dtype_name]
    payload = data[end + 1:]
    want = dims[0] * dims[1] * dims[2] * dt.itemsize
    if len(payload) < want:
        raise VolumeError(f"truncated payload: expected {want} bytes, found {len(payload)}")
    if len(payload) > want:
        raise VolumeError(f"trailing bytes: expected {want} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    cls = LabelVolume if dtype_name == "u8" else HUVolume
    return cls(arr, Spacing(*spacing))


def read_volume(path) -> AnyVolume:
    """Read an ITSV file; raises VolumeError on any format violation."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise VolumeError(f"no such volume file: {path}") from exc
    return parse_volume(data)


def write_volume(vol: AnyVolume, path) -> None:
    data = vol.to_bytes()
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise VolumeError(f"cannot write {path}: {exc}") from exc


def world_to_index(point: Sequence[float], spacing: Spacing) -> tuple:
    sp = spacing.as_array()
    return tuple(int(v) for v in np.floor(np.asarray(point, float) / sp + 0.5))


def index_to_world(index: Sequence[float], spacing: Spacing) -> np.ndarray:
    return np.asarray(index, float) * spacing.as_array()


def equivalent_diameter(voxel_count: int, spacing: Spacing) -> float:
    """Diameter of the sphere with the same physical volume."""
    vol = voxel_count * spacing.sx * spacing.sy * spacing.sz
    return (6.0 * vol / math.pi) ** (1.0 / 3.0)


def mask_bounds(mask: np.ndarray):
    """Half-open index bounds (lo, hi) of the nonzero voxels, or None if empty."""
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(np.any(mask, axis=other))
        if hit.size == 0:
            return None
        lo.append(int(hit[0]))
        hi.append(int(hit[-1]) + 1)
    return np.array(lo), np.array(hi)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a face neighbour outside it (or on the grid edge)."""
    mask = np.asarray(mask, bool)
    out = np.zeros(mask.shape, dtype=bool)
    bounds = mask_bounds(mask)
    if bounds is None:
        return out
    lo, hi = bounds
    crop = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    padded = np.pad(crop, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = crop & ~interior[1:-1, 1:-1, 1:-1]
    return out


class SurfaceIndex:
    """Exact nearest-boundary-voxel queries for one label set of a volume."""

    def __init__(self, vol: LabelVolume, labels):
        labels = _as_label_set(labels)
        mask = vol.mask(labels)
        if not mask.any():
            raise VolumeError(f"label(s) {sorted(labels)} absent from volume")
        lo, hi = mask_bounds(mask)
        b = boundary_mask(mask)
        pts = (np.argwhere(b[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]) + lo).astype(float)
        pts *= vol.spacing.as_array()
        self.mask = mask
        self.points = pts
        self._tree = cKDTree(pts)

    def distance(self, p) -> Union[float, np.ndarray]:
        d, _ = self._tree.query(np.asarray(p, float))
        return d if np.ndim(d) else float(d)


def surface_distance(vol: LabelVolume, p, label) -> float:
    """Euclidean distance (mm) from world point ``p`` to the nearest boundary
    voxel centre of ``label`` (an id or a collection of ids)."""
    return SurfaceIndex(vol, label).distance(p)


def largest_component(mask) -> LabelVolume:
    """Keep the largest 26-connected component of a binary mask.

    Ties go to the component whose first voxel in x-fastest scan order comes
    first.  Accepts a LabelVolume or a bare array; the result has values 0/1.
    """
    spacing = mask.spacing if isinstance(mask, Volume) else Spacing.iso(1.0)
    arr = np.asarray(mask.voxels if isinstance(mask, Volume) else mask) != 0
    lab, n = ndimage.label(arr, structure=_STRUCT26)
    if n == 0:
        raise VolumeError("empty mask")
    flat = lab.ravel(order="F")
    counts = np.bincount(flat, minlength=n + 1)
    counts[0] = -1
    nz = np.flatnonzero(flat)
    first = np.full(n + 1, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    best = max(range(1, n + 1), key=lambda k: (counts[k], -first[k]))
    return LabelVolume((lab == best).astype(np.uint8), spacing)


def resample_mask(mask, src, dst, alpha: float) -> LabelVolume:
    """Nearest-neighbour rescale of a binary mask onto ``dst`` spacing by ``alpha``.

    Output voxel ``i`` samples source coordinate
    ``((i + 0.5) * dst / alpha) / src - 0.5`` rounded half-up, so grid
    centres stay aligned and alpha=1 with equal spacing is the identity.
    """
    if not (ALPHA_MIN <= alpha <= ALPHA_MAX):
        raise VolumeError(f"alpha={alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")
    arr = np.asarray(mask.voxels if isinstance(mask, Volume) else mask) != 0
    if not arr.any():
        raise VolumeError("empty mask")
    src = Spacing.of(src)
    dst = Spacing.of(dst)
    idx = []
    for n, s, d in zip(arr.shape, src.as_tuple(), dst.as_tuple()):
        m = max(1, int(round(n * s * alpha / d)))
        coord = ((np.arange(m) + 0.5) * d / alpha) / s - 0.5
        j = np.floor(coord + 0.5).astype(np.int64)
        idx.append(np.clip(j, 0, n - 1))
    out = arr[np.ix_(*idx)]
    return LabelVolume(out.astype(np.uint8), dst)


def crop_to_mask(arr: np.ndarray) -> tuple:
    """Return (cropped array, lower corner) for the bounding box of nonzeros."""
    bounds = mask_bounds(arr)
    if bounds is None:
        raise VolumeError("empty mask")
    lo, hi = bounds
    return arr[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], lo


def centroid_world(mask: np.ndarray, spacing: Spacing) -> np.ndarray:
    bounds = mask_bounds(mask)
    if bounds is None:
        raise VolumeError("empty mask")
    lo, hi = bounds
    pts = np.argwhere(mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]) + lo
    return pts.mean(axis=0) * spacing.as_array()


def linear_index(ijk: Iterable[int], dims: Sequence[int]) -> int:
    i, j, k = (int(v) for v in ijk)
    return i + dims[0] * (j + dims[1] * k)
