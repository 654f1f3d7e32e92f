"""Nodule profiling: compact vectors, the 54-attribute profile, blueprints and eligibility.

Percentile conventions (all in [0, 100] for points inside the reference box):

* cranio-caudal (cc): 0 at the superior edge, 100 at the inferior edge;
* mediolateral (ml): 0 at the medial edge, 100 at the lateral edge, mirrored
  per side so both lungs share one convention;
* anteroposterior (ap): 0 anterior, 100 posterior.  AP values are computed
  but flagged low-confidence and are not used to drive placement.

Reference boxes span the centres of the extreme voxels of a lung or lobe.
All distances are measured from the nodule centroid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from trialforge import phantom as ph
from trialforge import voxgrid
from trialforge.errors import ProfileError
from trialforge.voxgrid import LabelVolume, Spacing

SNAP_RADIUS_MM = 10.0
NEARBY_MM = 10.0
CENTRAL_FRACTION = 1.0 / 3.0

DISTANCE_TARGETS = {
    "pleural_distance_mm": ph.LUNG_LABELS | {ph.NODULE},
    "airway_distance_mm": {ph.AIRWAY, ph.TRACHEA},
    "dist_to_heart_mm": {ph.HEART},
    "dist_to_aorta_mm": {ph.AORTA},
    "dist_to_pulmonary_vein_mm": {ph.PULMONARY_VEIN},
    "dist_to_trachea_mm": {ph.TRACHEA},
    "dist_to_esophagus_mm": {ph.ESOPHAGUS},
    "dist_to_svc_mm": {ph.SVC},
}
NEARBY_CANDIDATES = ("body", "airway", "heart", "aorta", "esophagus", "trachea",
                     "pulmonary_vein", "svc") + tuple(ph.LOBE_LABELS)

GROUPS = {
    "identity": ("ct_path",),
    "bounding_box": ("coordX", "coordY", "coordZ", "w", "h", "d"),
    "morphology": ("nodule_mean_diam_mm", "nodule_vol_mm3"),
    "anatomy": ("organ_label_id", "organ_label_name", "nearby_organs_10mm", "lung_side",
                "lobe_name", "lung_zone", "central_peripheral"),
    "lung_position": ("cranio_caudal_pct", "mediolateral_pct", "anteroposterior_pct"),
    "lobe_position": ("lobe_cc_pct", "lobe_ml_pct", "lobe_ap_pct"),
    "distances": tuple(DISTANCE_TARGETS),
    "inter_nodule": ("n_nodules_in_patient", "nearest_nodule_id", "nearest_nodule_distance_mm",
                     "nearest_nodule_dx_mm", "nearest_nodule_dy_mm", "nearest_nodule_dz_mm",
                     "all_nodule_ids", "all_nodule_distances_mm", "ipsilateral",
                     "nearest_same_lobe", "bilateral_distribution"),
    "reinsertion": ("reinsertion_lobe", "reinsertion_lung_side", "reinsertion_lung_zone",
                    "reinsertion_lung_cc_pct", "reinsertion_lung_ml_pct", "reinsertion_lung_ap_pct",
                    "reinsertion_lobe_cc_pct", "reinsertion_lobe_ml_pct", "reinsertion_lobe_ap_pct",
                    "reinsertion_pleural_dist", "reinsertion_airway_dist",
                    "reinsertion_lobe_surface_dist", "reinsertion_diam"),
}
CORE_COLUMNS = tuple(c for cols in GROUPS.values() for c in cols)
AUX_COLUMNS = ("dataset_tag", "patient_id", "nodule_index", "malignancy", "blueprint_valid",
               "ap_low_confidence")
PROFILE_COLUMNS = CORE_COLUMNS + AUX_COLUMNS

_INT_COLUMNS = {"organ_label_id", "n_nodules_in_patient", "nearest_nodule_id", "nodule_index"}
_BOOL_COLUMNS = {"ipsilateral", "nearest_same_lobe", "bilateral_distribution", "blueprint_valid",
                 "ap_low_confidence"}
_STR_COLUMNS = {"ct_path", "organ_label_name", "nearby_organs_10mm", "lung_side", "lobe_name",
                "lung_zone", "central_peripheral", "all_nodule_ids", "all_nodule_distances_mm",
                "reinsertion_lobe", "reinsertion_lung_side", "reinsertion_lung_zone", "dataset_tag",
                "patient_id", "malignancy"}


# -- reference boxes -------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in world millimetres (voxel-centre extremes)."""

    lo: tuple
    hi: tuple

    @classmethod
    def of_mask(cls, mask: np.ndarray, spacing: Spacing) -> Optional["Box"]:
        bounds = voxgrid.mask_bounds(mask)
        if bounds is None:
            return None
        sp = spacing.as_array()
        lo, hi = bounds
        return cls(tuple((lo * sp).tolist()), tuple(((hi - 1) * sp).tolist()))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def centre(self) -> np.ndarray:
        return (np.asarray(self.hi) + np.asarray(self.lo)) / 2.0


def _pct(value, lo, hi):
    if hi <= lo:
        return 50.0
    return 100.0 * (value - lo) / (hi - lo)


def box_percentiles(point, box: Box, side: str) -> tuple:
    """(cc, ml, ap) percentiles of ``point`` within ``box``."""
    x, y, z = (float(v) for v in point)
    cc = 100.0 - _pct(z, box.lo[2], box.hi[2])
    ml_from_low = _pct(x, box.lo[0], box.hi[0])
    # right lung: medial is high x; left lung: medial is low x
    ml = 100.0 - ml_from_low if side == "right" else ml_from_low
    ap = _pct(y, box.lo[1], box.hi[1])
    return cc, ml, ap


def point_from_percentiles(cc: float, ml: float, ap: float, box: Box, side: str) -> np.ndarray:
    """Inverse of :func:`box_percentiles`."""
    lo = np.asarray(box.lo, float)
    ext = box.extent
    fx = (100.0 - ml) / 100.0 if side == "right" else ml / 100.0
    return np.array([
        lo[0] + fx * ext[0],
        lo[1] + ap / 100.0 * ext[1],
        lo[2] + (100.0 - cc) / 100.0 * ext[2],
    ])


# -- per-anatomy cache -----------------------------------------------------


class AnatomyContext:
    """Lazily cached surfaces and boxes for one anatomy volume."""

    def __init__(self, anatomy: LabelVolume):
        self.anatomy = anatomy
        self.spacing = anatomy.spacing
        self._surfaces: Dict[frozenset, Optional[voxgrid.SurfaceIndex]] = {}
        self._boxes: Dict[object, Optional[Box]] = {}
        self.present = frozenset(np.unique(anatomy.voxels).tolist())

    def surface(self, labels) -> Optional[voxgrid.SurfaceIndex]:
        key = frozenset(labels)
        if key not in self._surfaces:
            if key & self.present:
                self._surfaces[key] = voxgrid.SurfaceIndex(self.anatomy, key)
            else:
                self._surfaces[key] = None
        return self._surfaces[key]

    def distance(self, labels, point) -> Optional[float]:
        s = self.surface(labels)
        return None if s is None else s.distance(point)

    def lobe_box(self, lobe: str) -> Optional[Box]:
        if lobe not in self._boxes:
            self._boxes[lobe] = Box.of_mask(self.anatomy.voxels == ph.LOBE_LABELS[lobe], self.spacing)
        return self._boxes[lobe]

    def lung_box(self, side: str) -> Optional[Box]:
        key = ("lung", side)
        if key not in self._boxes:
            lobes = ph.RIGHT_LOBES if side == "right" else ph.LEFT_LOBES
            labels = [ph.LOBE_LABELS[k] for k in lobes]
            self._boxes[key] = Box.of_mask(np.isin(self.anatomy.voxels, labels), self.spacing)
        return self._boxes[key]

    def lobe_at(self, point) -> Optional[str]:
        """Lobe containing ``point``; otherwise the nearest lobe voxel within 10 mm."""
        sp = self.spacing.as_array()
        ijk = np.floor(np.asarray(point, float) / sp + 0.5).astype(int)
        dims = np.array(self.anatomy.dims)
        if np.all(ijk >= 0) and np.all(ijk < dims):
            lab = int(self.anatomy.voxels[tuple(ijk)])
            if lab in ph.LOBE_BY_LABEL:
                return ph.LOBE_BY_LABEL[lab]
        r = np.ceil(SNAP_RADIUS_MM / sp).astype(int)
        lo = np.maximum(ijk - r, 0)
        hi = np.minimum(ijk + r + 1, dims)
        if np.any(hi <= lo):
            return None
        sub = self.anatomy.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        cand = np.argwhere(np.isin(sub, list(ph.LUNG_LABELS)))
        if cand.size == 0:
            return None
        world = (cand + lo) * sp
        d = np.linalg.norm(world - np.asarray(point, float), axis=1)
        order = np.lexsort((cand[:, 0], cand[:, 1], cand[:, 2], d))
        best = order[0]
        if d[best] > SNAP_RADIUS_MM:
            return None
        return ph.LOBE_BY_LABEL[int(sub[tuple(cand[best])])]


# -- compact vector --------------------------------------------------------


@dataclass(frozen=True)
class CompactVector:
    d: float
    lobe: str
    y: str
    zone: str
    side: str
    centrality: str
    rho: float


def _zone(cc_pct: float) -> str:
    if cc_pct < 100.0 / 3.0:
        return "upper"
    if cc_pct < 200.0 / 3.0:
        return "middle"
    return "lower"


def _centrality(point, lung_box: Box, side: str) -> str:
    medial_x = lung_box.hi[0] if side == "right" else lung_box.lo[0]
    c = lung_box.centre
    hilum = np.array([medial_x, c[1], c[2]])
    dist = float(np.linalg.norm(np.asarray(point, float) - hilum))
    return "central" if dist < lung_box.extent[0] * CENTRAL_FRACTION else "peripheral"


def _nodule_array(nodule) -> np.ndarray:
    arr = nodule.voxels if isinstance(nodule, voxgrid.Volume) else np.asarray(nodule)
    return arr != 0


def compact_vector(anatomy: LabelVolume, nodule, malignancy: str = "unlabeled",
                   ctx: Optional[AnatomyContext] = None) -> CompactVector:
    """Seven-field summary (diameter, lobe, malignancy, zone, side, centrality, pleural distance)."""
    ctx = ctx or AnatomyContext(anatomy)
    m = _nodule_array(nodule)
    if not m.any():
        raise ProfileError("empty nodule mask")
    c = voxgrid.centroid_world(m, anatomy.spacing)
    lobe = ctx.lobe_at(c)
    if lobe is None:
        raise ProfileError(f"centroid {c.round(2).tolist()} outside all lobes within {SNAP_RADIUS_MM} mm")
    side = ph.lobe_side(lobe)
    lung_box = ctx.lung_box(side)
    cc, _, _ = box_percentiles(c, lung_box, side)
    return CompactVector(
        d=voxgrid.equivalent_diameter(int(m.sum()), anatomy.spacing),
        lobe=lobe,
        y=malignancy,
        zone=_zone(cc),
        side=side,
        centrality=_centrality(c, lung_box, side),
        rho=float(ctx.distance(DISTANCE_TARGETS["pleural_distance_mm"], c)),
    )


# -- full profile ----------------------------------------------------------


@dataclass
class NoduleProfile:
    """One profile row: the 54 core attributes plus auxiliary columns."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def patient_id(self) -> str:
        return self.values["patient_id"]

    @property
    def nodule_index(self) -> int:
        return self.values["nodule_index"]

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.nodule_index)

    @property
    def dataset_tag(self) -> str:
        return self.values["dataset_tag"]

    @property
    def diameter(self) -> float:
        return self.values["nodule_mean_diam_mm"]

    @property
    def lobe(self) -> Optional[str]:
        return self.values["lobe_name"]

    @property
    def malignancy(self) -> str:
        return self.values["malignancy"]

    @property
    def centroid(self) -> np.ndarray:
        return np.array([self.values["coordX"], self.values["coordY"], self.values["coordZ"]], float)

    @property
    def blueprint_valid(self) -> bool:
        return bool(self.values["blueprint_valid"])

    @property
    def compact(self) -> CompactVector:
        v = self.values
        if v["lobe_name"] is None:
            raise ProfileError(f"profile {self.key} has no lobe")
        return CompactVector(v["nodule_mean_diam_mm"], v["lobe_name"], v["malignancy"], v["lung_zone"],
                             v["lung_side"], v["central_peripheral"], v["pleural_distance_mm"])

    def core(self) -> dict:
        return {k: self.values[k] for k in CORE_COLUMNS}


@dataclass(frozen=True)
class Eligibility:
    donor_eligible: bool
    host_eligible: bool
    reason: str = ""


def _bbox_dims(m: np.ndarray, spacing: Spacing) -> tuple:
    lo, hi = voxgrid.mask_bounds(m)
    ext = (hi - lo) * spacing.as_array()
    return tuple(float(e) for e in ext)


def full_profile(patient: ph.PhantomPatient, nodule_index: int,
                 ctx: Optional[AnatomyContext] = None) -> NoduleProfile:
    """Profile one nodule (inter-nodule fields are left empty; see :func:`profile_patient`)."""
    if not 0 <= nodule_index < len(patient.nodule_masks):
        raise ProfileError(f"{patient.patient_id} has no nodule {nodule_index}")
    anat = patient.anatomy
    sp = anat.spacing
    ctx = ctx or AnatomyContext(anat)
    m = _nodule_array(patient.nodule_masks[nodule_index])
    truth = patient.nodule_truth[nodule_index] if nodule_index < len(patient.nodule_truth) else None
    v: dict = {k: None for k in PROFILE_COLUMNS}
    v.update(
        ct_path=f"{patient.patient_id}.itsv",
        dataset_tag=patient.dataset_tag,
        patient_id=patient.patient_id,
        nodule_index=nodule_index,
        malignancy=truth.malignancy if truth else "unlabeled",
        ap_low_confidence=True,
        n_nodules_in_patient=1,
        nearby_organs_10mm="",
    )
    if not m.any():
        v["blueprint_valid"] = False
        return NoduleProfile(v)
    c = voxgrid.centroid_world(m, sp)
    count = int(m.sum())
    w, h, d = _bbox_dims(m, sp)
    diam = voxgrid.equivalent_diameter(count, sp)
    v.update(coordX=float(c[0]), coordY=float(c[1]), coordZ=float(c[2]), w=w, h=h, d=d,
             nodule_mean_diam_mm=diam, nodule_vol_mm3=count * sp.sx * sp.sy * sp.sz)
    for col, labels in DISTANCE_TARGETS.items():
        v[col] = ctx.distance(labels, c)

    lobe = ctx.lobe_at(c)
    if lobe is None:
        v["blueprint_valid"] = False
        return NoduleProfile(v)
    side = ph.lobe_side(lobe)
    lung_box = ctx.lung_box(side)
    lobe_box = ctx.lobe_box(lobe)
    cc, ml, ap = box_percentiles(c, lung_box, side)
    lcc, lml, lap = box_percentiles(c, lobe_box, side)
    lab = ph.LOBE_LABELS[lobe]
    nearby = []
    for name in NEARBY_CANDIDATES:
        if name == lobe:
            continue
        dist = ctx.distance({ph.LABELS[name]}, c)
        if dist is not None and dist <= NEARBY_MM:
            nearby.append(name)
    v.update(
        organ_label_id=lab,
        organ_label_name=lobe,
        nearby_organs_10mm=";".join(nearby),
        lung_side=side,
        lobe_name=lobe,
        lung_zone=_zone(cc),
        central_peripheral=_centrality(c, lung_box, side),
        cranio_caudal_pct=cc,
        mediolateral_pct=ml,
        anteroposterior_pct=ap,
        lobe_cc_pct=lcc,
        lobe_ml_pct=lml,
        lobe_ap_pct=lap,
    )
    v.update(reinsertion_blueprint(v, ctx))
    return NoduleProfile(v)


def reinsertion_blueprint(values: dict, ctx: AnatomyContext) -> dict:
    """Blueprint fields copied or derived from a profile's measured values.

    An undefined lobe yields an all-empty blueprint with ``blueprint_valid``
    false, which makes the nodule donor-ineligible.
    """
    out = {k: None for k in GROUPS["reinsertion"]}
    lobe = values.get("lobe_name")
    if lobe is None or values.get("nodule_mean_diam_mm") is None:
        out["blueprint_valid"] = False
        return out
    c = np.array([values["coordX"], values["coordY"], values["coordZ"]], float)
    out.update(
        reinsertion_lobe=lobe,
        reinsertion_lung_side=values["lung_side"],
        reinsertion_lung_zone=values["lung_zone"],
        reinsertion_lung_cc_pct=values["cranio_caudal_pct"],
        reinsertion_lung_ml_pct=values["mediolateral_pct"],
        reinsertion_lung_ap_pct=values["anteroposterior_pct"],
        reinsertion_lobe_cc_pct=values["lobe_cc_pct"],
        reinsertion_lobe_ml_pct=values["lobe_ml_pct"],
        reinsertion_lobe_ap_pct=values["lobe_ap_pct"],
        reinsertion_pleural_dist=values["pleural_distance_mm"],
        reinsertion_airway_dist=values["airway_distance_mm"],
        reinsertion_lobe_surface_dist=ctx.distance({ph.LOBE_LABELS[lobe]}, c),
        reinsertion_diam=values["nodule_mean_diam_mm"],
        blueprint_valid=True,
    )
    return out


def inter_nodule_attrs(profiles: Sequence[NoduleProfile]) -> List[NoduleProfile]:
    """Fill the inter-nodule group for all nodules of one patient."""
    if not profiles:
        raise ProfileError("no profiles given")
    pids = {p.patient_id for p in profiles}
    if len(pids) != 1:
        raise ProfileError(f"profiles from several patients: {sorted(pids)}")
    out = [NoduleProfile(dict(p.values)) for p in profiles]
    n = len(out)
    for p in out:
        p.values["n_nodules_in_patient"] = n
    if n == 1:
        return out
    pts = np.array([p.centroid for p in out])
    sides = {p.get("lung_side") for p in out if p.get("lung_side")}
    bilateral = sides == {"left", "right"}
    for i, p in enumerate(out):
        diffs = pts - pts[i]
        dist = np.linalg.norm(diffs, axis=1)
        others = [j for j in range(n) if j != i]
        j = min(others, key=lambda k: (dist[k], k))
        q = out[j]
        p.values.update(
            nearest_nodule_id=q.nodule_index,
            nearest_nodule_distance_mm=float(dist[j]),
            nearest_nodule_dx_mm=float(diffs[j, 0]),
            nearest_nodule_dy_mm=float(diffs[j, 1]),
            nearest_nodule_dz_mm=float(diffs[j, 2]),
            all_nodule_ids=";".join(str(out[k].nodule_index) for k in others),
            all_nodule_distances_mm=";".join(f"{dist[k]:.3f}" for k in others),
            ipsilateral=p.get("lung_side") is not None and p.get("lung_side") == q.get("lung_side"),
            nearest_same_lobe=p.lobe is not None and p.lobe == q.lobe,
            bilateral_distribution=bilateral,
        )
    return out


def profile_patient(patient: ph.PhantomPatient) -> List[NoduleProfile]:
    if not patient.nodule_masks:
        return []
    ctx = AnatomyContext(patient.anatomy)
    profs = [full_profile(patient, j, ctx) for j in range(len(patient.nodule_masks))]
    return inter_nodule_attrs(profs)


def profile_cohort(patients: Iterable[ph.PhantomPatient]) -> List[NoduleProfile]:
    out = []
    for p in patients:
        out.extend(profile_patient(p))
    return out


def host_eligible(anatomy: LabelVolume) -> bool:
    present = set(np.unique(anatomy.voxels).tolist())
    return all(lab in present for lab in ph.LOBE_LABELS.values())


def eligibility(patient: ph.PhantomPatient, profile: Optional[NoduleProfile]) -> Eligibility:
    host_ok = host_eligible(patient.anatomy)
    reasons = []
    donor_ok = True
    if profile is None or profile.get("nodule_mean_diam_mm") is None:
        donor_ok = False
        reasons.append("empty nodule mask")
    elif not profile.blueprint_valid:
        donor_ok = False
        reasons.append("invalid blueprint (undefined lobe)")
    if not host_ok:
        reasons.append("missing lobe label(s)")
    return Eligibility(donor_ok, host_ok, "; ".join(reasons))


# -- host table ------------------------------------------------------------


@dataclass(frozen=True)
class HostRecord:
    patient_id: str
    dataset_tag: str
    sex: str
    age: float
    host_eligible: bool
    spacing: tuple
    dims: tuple
    lobe_boxes: dict  # lobe -> Box or None

    def box(self, lobe: str) -> Optional[Box]:
        return self.lobe_boxes.get(lobe)


def host_record(patient: ph.PhantomPatient, ctx: Optional[AnatomyContext] = None) -> HostRecord:
    ctx = ctx or AnatomyContext(patient.anatomy)
    return HostRecord(
        patient_id=patient.patient_id,
        dataset_tag=patient.dataset_tag,
        sex=patient.sex,
        age=float(patient.age),
        host_eligible=host_eligible(patient.anatomy),
        spacing=patient.anatomy.spacing.as_tuple(),
        dims=patient.anatomy.dims,
        lobe_boxes={lobe: ctx.lobe_box(lobe) for lobe in ph.LOBE_LABELS},
    )


HOST_COLUMNS = ("patient_id", "dataset_tag", "sex", "age", "host_eligible", "sx", "sy", "sz",
                "nx", "ny", "nz") + tuple(
    f"{lobe}_{edge}{ax}" for lobe in ph.LOBE_LABELS for edge in ("lo", "hi") for ax in "xyz")


# -- CSV I/O ---------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return ""
        return repr(float(value))
    return str(value)


def _parse(col: str, text: str):
    if col == "nearby_organs_10mm":
        return text
    if text == "":
        return None
    if col in _BOOL_COLUMNS or col == "host_eligible":
        return text == "true"
    if col in _INT_COLUMNS or col in ("nx", "ny", "nz"):
        return int(text)
    if col in _STR_COLUMNS or col in ("sex",):
        return text
    return float(text)


def write_profiles(profiles: Sequence[NoduleProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for p in profiles:
            w.writerow([_fmt(p.values.get(c)) for c in PROFILE_COLUMNS])


def read_profiles(path) -> List[NoduleProfile]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        missing = [c for c in PROFILE_COLUMNS if c not in r]
        if missing:
            raise ProfileError(f"profile table missing columns: {missing[:5]}")
        out.append(NoduleProfile({c: _parse(c, r[c]) for c in PROFILE_COLUMNS}))
    return out


def write_hosts(hosts: Sequence[HostRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HOST_COLUMNS)
        for h in hosts:
            row = [h.patient_id, h.dataset_tag, h.sex, _fmt(float(h.age)), _fmt(h.host_eligible),
                   *(_fmt(float(s)) for s in h.spacing), *(str(d) for d in h.dims)]
            for lobe in ph.LOBE_LABELS:
                b = h.box(lobe)
                row.extend([""] * 6 if b is None else [_fmt(float(x)) for x in (*b.lo, *b.hi)])
            w.writerow(row)


def read_hosts(path) -> List[HostRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        boxes = {}
        for lobe in ph.LOBE_LABELS:
            vals = [r[f"{lobe}_{e}{a}"] for e in ("lo", "hi") for a in "xyz"]
            boxes[lobe] = None if "" in vals else Box(tuple(map(float, vals[:3])), tuple(map(float, vals[3:])))
        out.append(HostRecord(
            patient_id=r["patient_id"], dataset_tag=r["dataset_tag"], sex=r["sex"], age=float(r["age"]),
            host_eligible=r["host_eligible"] == "true",
            spacing=tuple(float(r[k]) for k in ("sx", "sy", "sz")),
            dims=tuple(int(r[k]) for k in ("nx", "ny", "nz")),
            lobe_boxes=boxes,
        ))
    return out
