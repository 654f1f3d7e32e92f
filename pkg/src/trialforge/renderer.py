"""Surrogate label-to-HU renderer, pre-synthesis QC and windowed slice extraction.

Each voxel gets its label's mean HU plus Gaussian noise.  The noise for voxel
``i`` (F-order linear index) is drawn from counter-based words ``2i`` and
``2i + 1`` of the render key, so output never depends on how work is split.
"""

from __future__ import annotations

import re

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from trialforge import phantom as ph
from trialforge import rng, voxgrid
from trialforge.errors import RenderError
from trialforge.voxgrid import HU_MAX, HU_MIN, HUVolume, LabelVolume

WINDOW_WIDTH = 1500.0
WINDOW_LEVEL = -600.0

_LUNG = (-780.0, 60.0)
_AIRWAY = (-950.0, 15.0)
DEFAULT_HU_TABLE = {
    ph.BACKGROUND: (-1000.0, 5.0),
    ph.BODY: (40.0, 20.0),
    ph.LUL: _LUNG,
    ph.LLL: _LUNG,
    ph.RUL: _LUNG,
    ph.RML: _LUNG,
    ph.RLL: _LUNG,
    ph.AIRWAY: _AIRWAY,
    ph.TRACHEA: _AIRWAY,
    ph.HEART: (40.0, 20.0),
    ph.AORTA: (50.0, 20.0),
    ph.ESOPHAGUS: (30.0, 20.0),
    ph.PULMONARY_VEIN: (45.0, 20.0),
    ph.SVC: (45.0, 20.0),
    ph.NODULE: (-600.0, 80.0),
}


@dataclass(frozen=True)
class RenderParams:
    table: Mapping[int, tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.table is None:
            object.__setattr__(self, "table", dict(DEFAULT_HU_TABLE))
        for lab, (mean, sd) in self.table.items():
            if not (HU_MIN <= mean <= HU_MAX):
                raise RenderError(f"label {lab}: mean {mean} outside [{HU_MIN}, {HU_MAX}]")
            if sd < 0:
                raise RenderError(f"label {lab}: negative sigma")

    def scaled(self, noise: float) -> "RenderParams":
        """Same means with every sigma multiplied by ``noise``."""
        return RenderParams({k: (m, s * noise) for k, (m, s) in self.table.items()}, self.seed)


def render(composed: LabelVolume, params: Optional[RenderParams] = None, seed: Optional[int] = None) -> HUVolume:
    params = params or RenderParams()
    seed = params.seed if seed is None else seed
    lab = np.asarray(composed.voxels)
    present = np.unique(lab)
    missing = [int(v) for v in present if int(v) not in params.table]
    if missing:
        raise RenderError(f"no HU entry for label(s) {missing}")
    lut_mean = np.zeros(256)
    lut_sd = np.zeros(256)
    for k, (m, s) in params.table.items():
        if 0 <= k < 256:
            lut_mean[k] = m
            lut_sd[k] = s
    flat = lab.ravel(order="F")
    index = np.arange(flat.size, dtype=np.uint64)
    key = rng.derive_key(seed, "render")
    hu = lut_mean[flat] + lut_sd[flat] * rng.normals(key, index)
    hu = np.clip(np.floor(hu + 0.5), HU_MIN, HU_MAX).astype(np.int16)
    return HUVolume(hu.reshape(lab.shape, order="F"), composed.spacing)


# -- QC --------------------------------------------------------------------


@dataclass(frozen=True)
class QCResult:
    accepted: bool
    reason: str = ""

    def __bool__(self):
        return self.accepted


def qc_check(composed: LabelVolume, lesion_free: bool = False) -> QCResult:
    """Reject volumes with no nodule label (unless flagged lesion-free) or missing lobes."""
    present = set(np.unique(composed.voxels).tolist())
    missing = sorted(name for name, v in ph.LOBE_LABELS.items() if v not in present)
    if missing:
        return QCResult(False, "missing_lobes:" + ",".join(missing))
    if ph.NODULE not in present and not lesion_free:
        return QCResult(False, "empty_label_23")
    return QCResult(True)


# -- slices ----------------------------------------------------------------


def window(hu, width: float = WINDOW_WIDTH, level: float = WINDOW_LEVEL) -> np.ndarray:
    return np.clip((np.asarray(hu, float) - (level - width / 2.0)) / width, 0.0, 1.0)


@dataclass(frozen=True)
class SlicePack:
    axial: np.ndarray  # (3, nx, ny): z-1, z, z+1
    coronal: np.ndarray  # (nx, nz) at the centroid's y
    sagittal: np.ndarray  # (ny, nz) at the centroid's x
    index: tuple
    clamped: bool

    def planes(self) -> dict:
        return {
            "axial_prev": self.axial[0],
            "axial": self.axial[1],
            "axial_next": self.axial[2],
            "coronal": self.coronal,
            "sagittal": self.sagittal,
        }


def extract_slices(hu: HUVolume, centroid, width: float = WINDOW_WIDTH, level: float = WINDOW_LEVEL) -> SlicePack:
    """Lung-windowed slices through ``centroid`` (world mm).

    The axial triple is shifted inward when the centroid sits on the first or
    last z slice; ``clamped`` records that.
    """
    ijk = voxgrid.world_to_index(centroid, hu.spacing)
    dims = hu.dims
    if any(not (0 <= i < n) for i, n in zip(ijk, dims)):
        raise RenderError(f"centroid {tuple(centroid)} outside the volume")
    x, y, z = ijk
    zc = min(max(z, 1), dims[2] - 2) if dims[2] >= 3 else z
    clamped = zc != z or dims[2] < 3
    zs = [min(max(zc + d, 0), dims[2] - 1) for d in (-1, 0, 1)]
    v = hu.voxels
    axial = np.stack([window(v[:, :, k], width, level) for k in zs])
    return SlicePack(axial, window(v[:, y, :], width, level), window(v[x, :, :], width, level), (x, y, z), clamped)


def write_pgm(image: np.ndarray, path) -> None:
    """16-bit binary PGM; ``image`` in [0, 1], array axis 0 becomes image columns."""
    img = np.asarray(image, float)
    if img.ndim != 2:
        raise RenderError("PGM needs a 2-D image")
    data = np.floor(np.clip(img, 0.0, 1.0).T * 65535.0 + 0.5).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header tokens, then exactly one whitespace byte before the payload
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(3)) != 65535:
        raise RenderError(f"{path}: not a 16-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(raw[m.end():], dtype=">u2", count=w * h).reshape(h, w)
    return data.T.astype(float) / 65535.0


def write_slices(pack: SlicePack, directory, row: str) -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for plane, img in pack.planes().items():
        p = d / f"{row}_{plane}.pgm"
        write_pgm(img, p)
        paths.append(p)
    return paths


def body_recovery(hu: HUVolume, anatomy: LabelVolume, threshold: float = -300.0) -> float:
    """Fraction of body-label voxels inside the largest component of HU > ``threshold``."""
    body = np.asarray(anatomy.voxels) == ph.BODY
    if not body.any():
        raise RenderError("no body label")
    comp = voxgrid.largest_component(np.asarray(hu.voxels) > threshold).voxels != 0
    return float(np.count_nonzero(comp & body) / np.count_nonzero(body))


__all__ = [
    "RenderParams", "DEFAULT_HU_TABLE", "render", "qc_check", "QCResult", "window", "SlicePack",
    "extract_slices", "write_pgm", "read_pgm", "write_slices", "body_recovery",
]
