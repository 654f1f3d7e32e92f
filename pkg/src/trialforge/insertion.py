"""Label-level nodule insertion: lobe targeting, rescaling, placement, snap and validation.

A donor mask is cropped to its bounding box, rescaled onto the host grid and
positioned by its anchor voxel (the kernel voxel nearest the kernel centroid).
A position is valid when every donor voxel lands on the target lobe label.
The set of valid anchor positions is the erosion of the lobe by the donor
kernel, computed as an FFT correlation over the lobe's bounding box.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import signal

from trialforge import phantom as ph
from trialforge import voxgrid
from trialforge.errors import InsertionError
from trialforge.profiler import AnatomyContext, NoduleProfile, point_from_percentiles
from trialforge.rng import Stream
from trialforge.trialengine import Manifest, ManifestRow
from trialforge.voxgrid import ALPHA_MAX, ALPHA_MIN, NODULE_LABEL, LabelVolume

OVERLAP_MODES = frozenset({"M10", "M12"})
JITTER_PCT = 5.0
PLEURAL_LABELS = ph.LUNG_LABELS | {NODULE_LABEL}
DIAGNOSTIC_COLUMNS = ("row_index", "status", "reason", "snap", "snap_dist", "pleural_mm", "alpha",
                      "overlap", "attempts", "group")


@dataclass(frozen=True)
class InsertionConstraints:
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    rho_min: float = 2.0
    max_snap_mm: float = math.inf
    max_replacements: int = 10

    def __post_init__(self):
        if not (0 < self.alpha_min < self.alpha_max):
            raise InsertionError("need 0 < alpha_min < alpha_max")
        if self.rho_min < 0:
            raise InsertionError("rho_min must be >= 0")
        if self.max_snap_mm < 0 or self.max_replacements < 0:
            raise InsertionError("max_snap_mm and max_replacements must be >= 0")


@dataclass
class InsertionResult:
    row_index: int
    status: str  # accepted | rejected | error
    reason: str = ""
    composed: Optional[LabelVolume] = None
    snap_triggered: bool = False
    snap_distance_voxels: float = 0.0
    pleural_distance_mm: float = float("nan")
    alpha: float = 1.0
    overlap_voxels: int = 0
    attempts: int = 0
    position: Optional[tuple] = None  # world mm of the anchor voxel
    nodule_voxels: Optional[np.ndarray] = field(default=None, repr=False)  # (N, 3) host indices
    lobe: str = ""
    group: int = -1

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def diagnostics(self) -> dict:
        return {
            "row_index": self.row_index,
            "status": self.status,
            "reason": self.reason,
            "snap": "true" if self.snap_triggered else "false",
            "snap_dist": repr(round(self.snap_distance_voxels, 6)),
            "pleural_mm": repr(round(self.pleural_distance_mm, 6)),
            "alpha": repr(round(self.alpha, 6)),
            "overlap": self.overlap_voxels,
            "attempts": self.attempts,
            "group": self.group,
        }


# -- geometry --------------------------------------------------------------


@dataclass(frozen=True)
class Kernel:
    """Donor mask cropped to its bounds, with an anchor voxel in kernel coordinates."""

    mask: np.ndarray
    anchor: tuple

    @classmethod
    def of(cls, mask: np.ndarray) -> "Kernel":
        crop, _ = voxgrid.crop_to_mask(np.asarray(mask) != 0)
        pts = np.argwhere(crop)
        c = pts.mean(axis=0)
        d = np.sum((pts - c) ** 2, axis=1)
        # nearest voxel to the centroid; ties to the smallest linear index
        order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2], d))
        return cls(crop, tuple(int(v) for v in pts[order[0]]))

    @property
    def offsets(self) -> np.ndarray:
        return np.argwhere(self.mask) - np.asarray(self.anchor)


def valid_positions(kernel: Kernel, region: np.ndarray) -> np.ndarray:
    """Boolean map of anchor positions whose kernel lies entirely inside ``region``."""
    region = np.asarray(region) != 0
    out = np.zeros(region.shape, dtype=bool)
    bounds = voxgrid.mask_bounds(region)
    if bounds is None:
        return out
    lo, hi = bounds
    crop = region[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    k = kernel.mask
    if any(c < s for c, s in zip(crop.shape, k.shape)):
        return out
    corr = signal.fftconvolve(crop.astype(np.float64), k[::-1, ::-1, ::-1].astype(np.float64), mode="valid")
    hit = corr > k.sum() - 0.5
    start = lo + np.asarray(kernel.anchor)
    out[start[0]:start[0] + hit.shape[0], start[1]:start[1] + hit.shape[1],
        start[2]:start[2] + hit.shape[2]] = hit
    return out


def nearest_valid(valid: np.ndarray, ijk) -> Optional[tuple]:
    """Nearest True voxel to ``ijk`` (index-space Euclidean); ties to the smallest linear index."""
    c = np.asarray(ijk, int)
    if np.all(c >= 0) and np.all(c < valid.shape) and valid[tuple(c)]:
        return tuple(int(v) for v in c), 0.0
    pts = np.argwhere(valid)
    if len(pts) == 0:
        return None
    d2 = np.sum((pts - c) ** 2, axis=1)
    order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2], d2))
    best = pts[order[0]]
    return tuple(int(v) for v in best), float(math.sqrt(d2[order[0]]))


def snap_correct(candidate, kernel, lobe_mask: np.ndarray, spacing) -> tuple:
    """Move ``candidate`` (world mm) to the nearest anchor position with the kernel inside the lobe.

    Returns (world point, distance in voxels).  Raises InsertionError when the
    lobe mask is empty or has no valid position at all.
    """
    sp = voxgrid.Spacing.of(spacing)
    lobe_mask = np.asarray(lobe_mask) != 0
    if not lobe_mask.any():
        raise InsertionError("empty lobe mask")
    if not isinstance(kernel, Kernel):
        kernel = Kernel.of(kernel)
    found = nearest_valid(valid_positions(kernel, lobe_mask), voxgrid.world_to_index(candidate, sp))
    if found is None:
        raise InsertionError("no valid position in lobe")
    ijk, dist = found
    return voxgrid.index_to_world(ijk, sp), dist


def donor_kernel(donor_mask, donor_spacing, host_spacing, alpha: float) -> Kernel:
    arr = donor_mask.voxels if hasattr(donor_mask, "voxels") else donor_mask
    crop, _ = voxgrid.crop_to_mask(np.asarray(arr) != 0)
    scaled = voxgrid.resample_mask(crop, donor_spacing, host_spacing, alpha)
    return Kernel.of(scaled.voxels)


def choose_alpha(row_alpha: float, constraints: InsertionConstraints) -> Optional[float]:
    """Scale factor for the donor.

    Resampling works in physical units, so alpha 1 preserves the donor's
    physical diameter whatever the two spacings are.  Out-of-range requests
    are refused instead of clamped.
    """
    a = float(row_alpha)
    if not (constraints.alpha_min <= a <= constraints.alpha_max):
        return None
    return a


# -- single insertion ------------------------------------------------------


def _jittered(profile: NoduleProfile, stream: Stream, attempt: int) -> tuple:
    pct = [profile["reinsertion_lobe_cc_pct"], profile["reinsertion_lobe_ml_pct"],
           profile["reinsertion_lobe_ap_pct"]]
    width = JITTER_PCT * attempt
    return tuple(min(100.0, max(0.0, float(v) + stream.uniform_range(-width, width))) for v in pct)


def insert(row: ManifestRow, donor_mask, donor_profile: NoduleProfile, host: ph.PhantomPatient,
           constraints: InsertionConstraints = InsertionConstraints(), permit_overlap: bool = False,
           composed: Optional[np.ndarray] = None, seed: int = 0,
           ctx: Optional[AnatomyContext] = None, keep_volume: bool = True) -> InsertionResult:
    """Insert one manifest row into ``host`` (or into ``composed``, a working label array).

    ``composed`` is modified in place when given, which is how grouped rows
    accumulate into one volume.  Precondition failures raise InsertionError;
    exhausted re-placement returns a rejected result.
    """
    anat = host.anatomy
    ctx = ctx or AnatomyContext(anat)
    if not ph.LUNG_LABELS <= ctx.present:
        raise InsertionError(f"host {host.patient_id} is not host-eligible (missing lobe)")
    if donor_profile.get("nodule_mean_diam_mm") is None or not donor_profile.blueprint_valid:
        raise InsertionError(f"donor {donor_profile.key} is not donor-eligible")
    lobe = row.lobe or donor_profile["reinsertion_lobe"]
    if lobe not in ph.LOBE_LABELS:
        raise InsertionError(f"unknown lobe {lobe!r}")
    lobe_label = ph.LOBE_LABELS[lobe]
    if composed is None:
        composed = np.array(anat.voxels, copy=True)
    sp = anat.spacing
    base = dict(row_index=row.row_index, lobe=lobe, group=row.group)

    alpha = choose_alpha(row.alpha, constraints)
    if alpha is None:
        return InsertionResult(status="rejected", reason="alpha_out_of_bounds", alpha=float(row.alpha), **base)
    dspacing = donor_mask.spacing if hasattr(donor_mask, "spacing") else sp
    kernel = donor_kernel(donor_mask, dspacing, sp, alpha)

    # overlap-permitting modes test containment against the pristine lobe
    region = (anat.voxels == lobe_label) if permit_overlap else (composed == lobe_label)
    valid = valid_positions(kernel, region)
    if not valid.any():
        return InsertionResult(status="rejected", reason="no_feasible_position", alpha=alpha, attempts=0, **base)

    box = ctx.lobe_box(lobe)
    side = ph.lobe_side(lobe)
    surface = ctx.surface(PLEURAL_LABELS)
    stream = Stream.derive(seed, "replace", row.subcohort, row.row_index)
    offsets = kernel.offsets
    last_reason = "pleural_distance"
    for attempt in range(constraints.max_replacements + 1):
        if attempt == 0:
            target = np.array(row.placement, float)
        else:
            target = point_from_percentiles(*_jittered(donor_profile, stream, attempt), box, side)
        ijk, dist = nearest_valid(valid, voxgrid.world_to_index(target, sp))
        if dist * float(min(sp.as_tuple())) > constraints.max_snap_mm:
            last_reason = "snap_too_far"
            continue
        vox = offsets + np.asarray(ijk)
        centroid = vox.mean(axis=0) * sp.as_array()
        rho = float(surface.distance(centroid))
        if rho < constraints.rho_min:
            last_reason = "pleural_distance"
            continue
        idx = tuple(vox.T)
        overlap = int(np.count_nonzero(composed[idx] == NODULE_LABEL))
        if overlap and not permit_overlap:
            last_reason = "overlap"
            continue
        composed[idx] = NODULE_LABEL
        return InsertionResult(
            status="accepted", composed=LabelVolume(composed, sp) if keep_volume else None,
            snap_triggered=dist > 0, snap_distance_voxels=dist, pleural_distance_mm=rho, alpha=alpha,
            overlap_voxels=overlap, attempts=attempt + 1,
            position=tuple(float(v) for v in voxgrid.index_to_world(ijk, sp)), nodule_voxels=vox, **base)
    return InsertionResult(status="rejected", reason=last_reason, alpha=alpha,
                           attempts=constraints.max_replacements + 1, **base)


# -- batches ---------------------------------------------------------------


class CohortAssets:
    """Patients and profiles addressable by id, with cached anatomy contexts."""

    def __init__(self, patients: Sequence[ph.PhantomPatient], profiles: Sequence[NoduleProfile]):
        self.patients = {p.patient_id: p for p in patients}
        self.profiles = {(p.patient_id, p.nodule_index): p for p in profiles}
        self._ctx: Dict[str, AnatomyContext] = {}

    def context(self, pid: str) -> AnatomyContext:
        if pid not in self._ctx:
            self._ctx[pid] = AnatomyContext(self.patients[pid].anatomy)
        return self._ctx[pid]

    def resolve(self, row: ManifestRow) -> tuple:
        try:
            donor = self.patients[row.donor_patient]
            host = self.patients[row.host_patient]
            profile = self.profiles[(row.donor_patient, row.donor_nodule)]
            mask = donor.nodule_masks[row.donor_nodule]
        except (KeyError, IndexError):
            raise InsertionError(f"row {row.row_index} does not resolve against the cohort") from None
        return mask, profile, host


@dataclass
class InsertionReport:
    mode: str
    subcohort: str
    n_rows: int
    n_accepted: int
    n_rejected: int
    n_errors: int
    success_rate: float
    snap_rate: float
    mean_snap_distance: float
    pleural_mean_mm: float
    pleural_median_mm: float
    alpha_histogram: dict
    lobe_distribution: dict
    overlap_rate: float
    overlap_voxels: int
    n_groups: int
    composed_groups: int
    overlap_permitted: bool
    reasons: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True, allow_nan=True)


def summarize(manifest: Manifest, results: Sequence[InsertionResult]) -> InsertionReport:
    n = len(results)
    acc = [r for r in results if r.accepted]
    snapped = [r for r in acc if r.snap_triggered]
    rho = np.array([r.pleural_distance_mm for r in acc])
    groups = manifest.groups()
    alpha_bins = np.linspace(ALPHA_MIN, ALPHA_MAX, 8)
    hist, _ = np.histogram([r.alpha for r in acc], bins=alpha_bins)
    return InsertionReport(
        mode=manifest.mode,
        subcohort=manifest.subcohort,
        n_rows=n,
        n_accepted=len(acc),
        n_rejected=sum(r.status == "rejected" for r in results),
        n_errors=sum(r.status == "error" for r in results),
        success_rate=len(acc) / n if n else 0.0,
        snap_rate=len(snapped) / n if n else 0.0,
        mean_snap_distance=float(np.mean([r.snap_distance_voxels for r in snapped])) if snapped else 0.0,
        pleural_mean_mm=float(rho.mean()) if len(rho) else float("nan"),
        pleural_median_mm=float(np.median(rho)) if len(rho) else float("nan"),
        alpha_histogram={"edges": [round(float(e), 6) for e in alpha_bins], "counts": hist.tolist()},
        lobe_distribution=dict(sorted(Counter(r.lobe for r in acc).items())),
        overlap_rate=sum(r.overlap_voxels > 0 for r in acc) / n if n else 0.0,
        overlap_voxels=int(sum(r.overlap_voxels for r in acc)),
        n_groups=len(groups),
        composed_groups=sum(len(g) > 1 for g in groups),
        overlap_permitted=manifest.mode in OVERLAP_MODES,
        reasons=dict(sorted(Counter(r.reason for r in results if not r.accepted).items())),
    )


def _run_group(rows: List[ManifestRow], assets: CohortAssets, constraints: InsertionConstraints,
               permit_overlap: bool, seed: int, keep_volumes: bool) -> tuple:
    host_id = rows[0].host_patient
    results = []
    composed = None
    for row in rows:
        try:
            if row.host_patient != host_id:
                raise InsertionError(f"group {row.group} mixes hosts")
            mask, profile, host = assets.resolve(row)
            if composed is None:
                composed = np.array(host.anatomy.voxels, copy=True)
            res = insert(row, mask, profile, host, constraints, permit_overlap, composed, seed,
                         assets.context(host.patient_id), keep_volume=False)
        except InsertionError as e:
            res = InsertionResult(row.row_index, "error", str(e), lobe=row.lobe, group=row.group)
        results.append(res)
    volume = None
    if composed is not None and any(r.accepted for r in results):
        volume = LabelVolume(composed, assets.patients[host_id].anatomy.spacing)
        if keep_volumes:
            for r in results:
                if r.accepted:
                    r.composed = volume
    return results, volume


def insert_batch(manifest: Manifest, assets: CohortAssets,
                 constraints: InsertionConstraints = InsertionConstraints(), seed: int = 0,
                 jobs: int = 1, keep_volumes: bool = False, sink=None) -> tuple:
    """Insert every row; returns (results in row order, report).

    Rows of one group share a composed volume.  ``sink(rows, volume)`` is
    called once per group with an accepted insertion, in manifest order.
    Row failures are recorded, never raised.
    """
    permit = manifest.mode in OVERLAP_MODES
    groups = manifest.groups()
    # contexts are filled lazily; warm them so threads never race on the cache
    for g in groups:
        if g[0].host_patient in assets.patients:
            assets.context(g[0].host_patient).surface(PLEURAL_LABELS)

    def work(g):
        return _run_group(g, assets, constraints, permit, seed, keep_volumes)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            outs = list(ex.map(work, groups))
    else:
        outs = [work(g) for g in groups]
    by_row = {}
    for g, (res, vol) in zip(groups, outs):
        for r in res:
            by_row[r.row_index] = r
        if sink is not None and vol is not None:
            sink(g, vol)
    results = [by_row[r.row_index] for r in manifest.rows]
    return results, summarize(manifest, results)


def write_diagnostics(results: Sequence[InsertionResult], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.diagnostics())


__all__ = [
    "InsertionConstraints", "InsertionResult", "InsertionReport", "CohortAssets", "Kernel", "insert",
    "insert_batch", "snap_correct", "valid_positions", "nearest_valid", "summarize", "write_diagnostics",
]
