"""Procedural lung phantoms with seeded nodules.

Shapes are declared in normalised coordinates (fractions of the field of
view) and rasterised at voxel centres in millimetres, so the same seed gives
the same topology at any grid size.  Axis conventions: x runs from the
patient's right (low x) to left, y from anterior (0) to posterior, z from
inferior to superior.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from trialforge import voxgrid
from trialforge.errors import PhantomError, PlacementError
from trialforge.rng import Stream, derive_key
from trialforge.templates import Template, template
from trialforge.voxgrid import LabelVolume, Spacing

BACKGROUND = 0
BODY = 1
LUL, LLL, RUL, RML, RLL = 2, 3, 4, 5, 6
AIRWAY = 7
HEART = 8
AORTA = 9
ESOPHAGUS = 10
TRACHEA = 11
PULMONARY_VEIN = 12
SVC = 13
NODULE = voxgrid.NODULE_LABEL

LABELS = {
    "background": BACKGROUND,
    "body": BODY,
    "LUL": LUL,
    "LLL": LLL,
    "RUL": RUL,
    "RML": RML,
    "RLL": RLL,
    "airway": AIRWAY,
    "heart": HEART,
    "aorta": AORTA,
    "esophagus": ESOPHAGUS,
    "trachea": TRACHEA,
    "pulmonary_vein": PULMONARY_VEIN,
    "svc": SVC,
    "nodule": NODULE,
}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
LOBE_LABELS = {"RUL": RUL, "RML": RML, "RLL": RLL, "LUL": LUL, "LLL": LLL}
LOBE_BY_LABEL = {v: k for k, v in LOBE_LABELS.items()}
LUNG_LABELS = frozenset(LOBE_LABELS.values())
RIGHT_LOBES = ("RUL", "RML", "RLL")
LEFT_LOBES = ("LUL", "LLL")

DATASET_TAGS = ("DLCS24", "LUNA25", "LUNA16", "LUNGx", "LNDbv4", "NSCLCR", "IMDCT")
UNLABELED_TAGS = frozenset({"LUNA16"})
SINGLE_NODULE_TAGS = frozenset({"NSCLCR", "IMDCT"})

DEFAULT_DIMS = (96, 80, 96)
DEFAULT_SPACING = 2.5
MIN_DIM = 32
RHO_MIN_MM = 2.0
MAX_ATTEMPTS = 1000


def lobe_side(lobe: str) -> str:
    return "left" if lobe.startswith("L") else "right"


@dataclass(frozen=True)
class NoduleTruth:
    diameter_mm: float
    lobe: str
    malignancy: str  # benign | malignant | unlabeled
    centroid: tuple  # world mm


@dataclass(frozen=True)
class PhantomPatient:
    patient_id: str
    anatomy: LabelVolume
    sex: str = "M"
    age: float = 60.0
    dataset_tag: str = DATASET_TAGS[0]
    nodule_masks: tuple = ()
    nodule_truth: tuple = ()
    seed: int = 0

    @property
    def spacing(self) -> Spacing:
        return self.anatomy.spacing

    @property
    def demographics(self) -> tuple:
        return (self.sex, self.age)


# -- rasterisation helpers -------------------------------------------------


class _Canvas:
    def __init__(self, dims, spacing: Spacing):
        self.dims = tuple(int(d) for d in dims)
        self.spacing = spacing
        self.extent = np.array(self.dims, float) * spacing.as_array()
        self.labels = np.zeros(self.dims, dtype=np.uint8)
        # normalised voxel-centre coordinates, broadcastable
        self.u = ((np.arange(self.dims[0]) + 0.5) / self.dims[0])[:, None, None]
        self.v = ((np.arange(self.dims[1]) + 0.5) / self.dims[1])[None, :, None]
        self.w = ((np.arange(self.dims[2]) + 0.5) / self.dims[2])[None, None, :]

    def ellipsoid(self, centre, semi) -> np.ndarray:
        cx, cy, cz = centre
        a, b, c = semi
        return ((self.u - cx) / a) ** 2 + ((self.v - cy) / b) ** 2 + ((self.w - cz) / c) ** 2 <= 1.0

    def tube(self, p0, p1, radius_frac) -> np.ndarray:
        """Capsule around segment p0-p1 (normalised), radius as a fraction of the x extent."""
        e = self.extent
        a = np.asarray(p0, float) * e
        b = np.asarray(p1, float) * e
        r = radius_frac * e[0]
        out = np.zeros(self.dims, dtype=bool)
        # evaluate only inside the capsule's bounding box
        vox = e / np.array(self.dims)
        lo = np.maximum(np.floor((np.minimum(a, b) - r) / vox - 0.5).astype(int), 0)
        hi = np.minimum(np.ceil((np.maximum(a, b) + r) / vox + 0.5).astype(int), self.dims)
        if np.any(hi <= lo):
            return out
        x = self.u[lo[0]:hi[0]] * e[0]
        y = self.v[:, lo[1]:hi[1]] * e[1]
        z = self.w[:, :, lo[2]:hi[2]] * e[2]
        d = b - a
        dd = float(d @ d)
        t = ((x - a[0]) * d[0] + (y - a[1]) * d[1] + (z - a[2]) * d[2]) / dd
        t = np.clip(t, 0.0, 1.0)
        inside = (x - a[0] - t * d[0]) ** 2 + (y - a[1] - t * d[1]) ** 2 + (z - a[2] - t * d[2]) ** 2 <= r * r
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
        return out


def generate_phantom(seed: int, dims: Sequence[int] = DEFAULT_DIMS, spacing=DEFAULT_SPACING,
                     patient_id: Optional[str] = None) -> PhantomPatient:
    """Build the anatomy of one phantom patient (no nodules, default demographics)."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise PhantomError(f"dims {dims} too small; need at least {MIN_DIM} per axis")
    spacing = Spacing.of(spacing)
    rs = Stream.derive(seed, "anatomy")
    scale = 1.0 + rs.uniform_range(-0.04, 0.04)
    dx = rs.uniform_range(-0.01, 0.01)
    dz = rs.uniform_range(-0.01, 0.01)
    j_rul = rs.uniform_range(-0.02, 0.02)
    j_rml = rs.uniform_range(-0.02, 0.02)
    j_lul = rs.uniform_range(-0.02, 0.02)

    cv = _Canvas(dims, spacing)
    lab = cv.labels
    body = ((cv.u - 0.5) / 0.46) ** 2 + ((cv.v - 0.5) / 0.44) ** 2 <= 1.0
    lab[np.broadcast_to(body, dims)] = BODY

    rc = (0.30 + dx, 0.50, 0.50 + dz)
    lc = (0.70 + dx, 0.50, 0.50 + dz)
    right = cv.ellipsoid(rc, (0.155 * scale, 0.27 * scale, 0.40 * scale))
    left = cv.ellipsoid(lc, (0.150 * scale, 0.265 * scale, 0.385 * scale))

    w = np.broadcast_to(cv.w, dims)
    v = np.broadcast_to(cv.v, dims)
    upper_r = w > rc[2] + 0.05 + j_rul
    middle_r = (w > rc[2] - 0.15 + j_rml) & ~upper_r & (v < rc[1])
    lab[right] = RLL
    lab[right & upper_r] = RUL
    lab[right & middle_r] = RML
    lab[left] = LLL
    lab[left & (w > lc[2] - 0.02 + j_lul)] = LUL

    carina = (0.50, 0.45, 0.70)
    structures = [
        (HEART, cv.ellipsoid((0.52, 0.40, 0.35), (0.09, 0.13, 0.12))),
        (TRACHEA, cv.tube(carina, (0.50, 0.45, 1.0), 0.022)),
        (AIRWAY, cv.tube(carina, (0.33 + dx, 0.48, 0.57 + dz), 0.014)
         | cv.tube(carina, (0.67 + dx, 0.48, 0.57 + dz), 0.014)),
        (AORTA, cv.tube((0.50, 0.40, 0.42), (0.52, 0.50, 0.74), 0.028)
         | cv.tube((0.52, 0.50, 0.74), (0.56, 0.64, 0.68), 0.028)
         | cv.tube((0.56, 0.64, 0.68), (0.56, 0.64, 0.05), 0.028)),
        (ESOPHAGUS, cv.tube((0.49, 0.58, 0.0), (0.49, 0.58, 1.0), 0.015)),
        (SVC, cv.tube((0.45, 0.40, 0.44), (0.45, 0.40, 0.85), 0.018)),
        (PULMONARY_VEIN, cv.tube((0.48, 0.44, 0.40), (0.38 + dx, 0.50, 0.46), 0.011)
         | cv.tube((0.56, 0.44, 0.40), (0.62 + dx, 0.50, 0.46), 0.011)),
    ]
    for value, m in structures:
        lab[m] = value

    present = set(np.unique(lab).tolist())
    missing = [LABEL_NAMES[k] for k in (set(LABELS.values()) - {NODULE}) if k not in present]
    if missing:
        raise PhantomError(f"dims {dims} too small to fit structures: {sorted(missing)}")
    pid = patient_id if patient_id is not None else f"phantom-{seed}"
    return PhantomPatient(pid, LabelVolume(lab, spacing), seed=int(seed))


# -- nodules ---------------------------------------------------------------

SIZE_BINS_MM = ((2.5, 4.0), (4.0, 6.0), (6.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 36.0))


def default_size_sampler(stream: Stream) -> float:
    """Pick one of six size bins uniformly, then a diameter uniformly inside it."""
    lo, hi = SIZE_BINS_MM[stream.below(len(SIZE_BINS_MM))]
    return stream.uniform_range(lo, hi)


def fixed_size(diameter_mm: float) -> Callable[[Stream], float]:
    return lambda stream: float(diameter_mm)


def _axis_ratios(stream: Stream) -> tuple:
    while True:
        r1 = stream.uniform_range(0.7, 1.3)
        r2 = stream.uniform_range(0.7, 1.3)
        r3 = 1.0 / (r1 * r2)
        if 0.7 <= r3 <= 1.3:
            return (r1, r2, r3)


def _local_ellipsoid(dims, sp: np.ndarray, centre_ijk, semi_mm) -> tuple:
    semi = np.asarray(semi_mm, float)
    c = np.asarray(centre_ijk, int)
    rad = np.ceil(semi / sp).astype(int)
    lo = np.maximum(c - rad, 0)
    hi = np.minimum(c + rad + 1, dims)
    grids = [((np.arange(lo[a], hi[a]) - c[a]) * sp[a] / semi[a]) ** 2 for a in range(3)]
    local = grids[0][:, None, None] + grids[1][None, :, None] + grids[2][None, None, :] <= 1.0
    local[tuple(c - lo)] = True
    return lo, hi, local


def ellipsoid_mask(dims, spacing: Spacing, centre_ijk, semi_mm) -> np.ndarray:
    """Voxelised axis-aligned ellipsoid; the centre voxel is always set."""
    lo, hi, local = _local_ellipsoid(dims, spacing.as_array(), centre_ijk, semi_mm)
    out = np.zeros(dims, dtype=bool)
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = local
    return out


@dataclass(frozen=True)
class NodulePlan:
    """Optional per-nodule targets for :func:`seed_nodules`.

    ``size_range`` is half-open and applies to the voxelised
    equivalent-sphere diameter, not just the requested one.
    """

    lobe: Optional[str] = None
    size_range: Optional[tuple] = None
    malignancy: Optional[str] = None


def _lobe_depth(anat: LabelVolume, label: int) -> tuple:
    """Lobe voxel indices and their distance (mm) to the nearest non-lobe voxel centre."""
    from scipy import ndimage

    m = anat.voxels == label
    bounds = voxgrid.mask_bounds(m)
    if bounds is None:
        return np.zeros((0, 3), int), np.zeros(0)
    lo, hi = bounds
    crop = np.pad(m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 1, constant_values=False)
    edt = ndimage.distance_transform_edt(crop, sampling=anat.spacing.as_tuple())[1:-1, 1:-1, 1:-1]
    idx = np.argwhere(crop[1:-1, 1:-1, 1:-1])
    return idx + lo, edt[tuple(idx.T)]


def seed_nodules(patient: PhantomPatient, seed: int, count: int,
                 size_sampler: Callable[[Stream], float] = default_size_sampler,
                 malignancy_rate: float = 0.3, plan: Optional[Sequence[NodulePlan]] = None) -> PhantomPatient:
    """Add ``count`` ellipsoidal nodules, each fully inside one lobe.

    Each nodule's centroid is at least 2 mm from the lung boundary and the
    nodule does not touch earlier nodules.  Candidate centres are limited to
    lobe voxels deeper than the smallest possible semi-axis, which rules out
    only positions that cannot hold the nodule.  Raises PlacementError if a
    nodule cannot be placed within 1000 attempts.
    """
    if count < 0:
        raise PhantomError("count must be >= 0")
    if count == 0:
        return patient
    if plan is not None and len(plan) != count:
        raise PhantomError("plan length must equal count")
    anat = patient.anatomy
    sp = anat.spacing
    spa = sp.as_array()
    dims = anat.dims
    lung_surface = voxgrid.SurfaceIndex(anat, LUNG_LABELS)
    depth = {name: _lobe_depth(anat, lab) for name, lab in LOBE_LABELS.items()}
    taken = np.zeros(dims, dtype=bool)
    for m in patient.nodule_masks:
        taken |= m.voxels != 0
    masks = list(patient.nodule_masks)
    truth = list(patient.nodule_truth)
    rs = Stream.derive(seed, "nodules")
    for k in range(count):
        ns = rs.child(k)
        target = plan[k] if plan is not None else NodulePlan()
        if patient.dataset_tag in UNLABELED_TAGS:
            malignancy = "unlabeled"
        elif target.malignancy is not None:
            malignancy = target.malignancy
        else:
            malignancy = "malignant" if ns.bernoulli(malignancy_rate) else "benign"
        placed = None
        diameter = None
        for _ in range(MAX_ATTEMPTS):
            if target.size_range is not None:
                diameter = ns.uniform_range(*target.size_range)
            elif diameter is None:
                diameter = float(size_sampler(ns))
            if not (0 < diameter <= 100):
                raise PhantomError(f"size sampler produced {diameter} mm outside (0, 100]")
            lobes = [target.lobe] if target.lobe else list(LOBE_LABELS)
            lobe = lobes[ns.below(len(lobes))]
            vox, dist = depth[lobe]
            cand = vox[dist > 0.7 * diameter / 2.0]
            if len(cand) == 0:
                if target.lobe or not any(len(v[d > 0.7 * diameter / 2.0]) for v, d in depth.values()):
                    break
                continue
            centre = cand[ns.below(len(cand))]
            semi = np.array(_axis_ratios(ns)) * diameter / 2.0
            lo, hi, local = _local_ellipsoid(dims, spa, centre, semi)
            region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
            if not np.all(anat.voxels[region][local] == LOBE_LABELS[lobe]):
                continue
            if taken[region][local].any():
                continue
            d_eq = voxgrid.equivalent_diameter(int(local.sum()), sp)
            if target.size_range is not None and not (target.size_range[0] <= d_eq < target.size_range[1]):
                continue
            c = (np.argwhere(local) + lo).mean(axis=0) * spa
            if lung_surface.distance(c) < RHO_MIN_MM:
                continue
            placed = (region, local, lobe, c, d_eq)
            break
        if placed is None:
            raise PlacementError(
                f"could not place a {diameter:.1f} mm nodule in {patient.patient_id} "
                f"after {MAX_ATTEMPTS} attempts"
            )
        region, local, lobe, c, d_eq = placed
        m = np.zeros(dims, dtype=bool)
        m[region] = local
        taken |= m
        masks.append(LabelVolume(m.astype(np.uint8) * NODULE, sp))
        truth.append(NoduleTruth(d_eq, lobe, malignancy, tuple(float(x) for x in c)))
    return dataclasses.replace(patient, nodule_masks=tuple(masks), nodule_truth=tuple(truth))


@dataclass(frozen=True)
class CohortConfig:
    """Parameters for :func:`phantom_cohort`.

    With ``balanced`` set, labelled nodules follow a cycling design over
    (lobe, size bin) cells so that small cohorts still contain malignant and
    benign donors for every lobe and size bin.  In the first two passes over
    the 30 cells the label alternates with cell parity (even cells malignant
    first), so every cell holds both labels after 60 nodules and even a few
    patients see both.  Later passes are malignant once per
    ``round(1 / malignancy_rate)`` cycles.  Within a cell the
    exact diameter and position stay random.  Unlabelled datasets always use
    the random sampler.
    """

    template: str = "NLST"
    dims: tuple = DEFAULT_DIMS
    spacing: float = DEFAULT_SPACING
    malignancy_rate: float = 0.3
    max_nodules: int = 4
    balanced: bool = True
    size_sampler: Callable[[Stream], float] = field(default=default_size_sampler, compare=False)


def design_plan(index: int, malignancy_rate: float) -> NodulePlan:
    """Balanced-design targets for the ``index``-th labelled nodule of a cohort."""
    cell = index % 30
    cycle = index // 30
    lobe = tuple(LOBE_LABELS)[cell % 5]
    size_range = SIZE_BINS_MM[cell // 5]
    if cycle < 2:
        malignant = (cycle + cell) % 2 == 0
    elif malignancy_rate <= 0:
        malignant = False
    else:
        period = max(1, round(1.0 / malignancy_rate))
        malignant = (cycle + cell) % period == 0
    return NodulePlan(lobe, size_range, "malignant" if malignant else "benign")


def patient_seed(seed: int, index: int) -> int:
    return (int(seed) ^ int(index)) & ((1 << 64) - 1)


def _nodule_count(seed: int, index: int, config: CohortConfig) -> int:
    tag = DATASET_TAGS[index % len(DATASET_TAGS)]
    if tag in SINGLE_NODULE_TAGS:
        return 1
    return Stream.derive(patient_seed(seed, index), "count").integer(1, config.max_nodules)


def _design_offset(seed: int, index: int, config: CohortConfig) -> int:
    """Number of labelled nodules in patients before ``index`` (cheap: counts only)."""
    total = 0
    for j in range(index):
        if DATASET_TAGS[j % len(DATASET_TAGS)] not in UNLABELED_TAGS:
            total += _nodule_count(seed, j, config)
    return total


def make_patient(seed: int, index: int, config: CohortConfig = CohortConfig()) -> PhantomPatient:
    """Patient ``index`` of the cohort with root ``seed``; independent of the other patients."""
    ps = patient_seed(seed, index)
    tag = DATASET_TAGS[index % len(DATASET_TAGS)]
    tmpl: Template = template(config.template)
    sex, age = tmpl.draw_demographics(Stream.derive(ps, "demographics"))
    p = generate_phantom(ps, config.dims, config.spacing, patient_id=f"PH{index:04d}")
    p = dataclasses.replace(p, sex=sex, age=age, dataset_tag=tag)
    count = _nodule_count(seed, index, config)
    plan = None
    if config.balanced and tag not in UNLABELED_TAGS:
        offset = _design_offset(seed, index, config)
        plan = [design_plan(offset + k, config.malignancy_rate) for k in range(count)]
    return seed_nodules(p, derive_key(ps, "seed_nodules"), count, config.size_sampler,
                        config.malignancy_rate, plan=plan)


def phantom_cohort(seed: int, n_patients: int, config: CohortConfig = CohortConfig(),
                   jobs: int = 1) -> list:
    """Generate ``n_patients`` patients with seeds ``seed XOR index``."""
    if n_patients < 1:
        raise PhantomError("n_patients must be >= 1")
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(lambda i: make_patient(seed, i, config), range(n_patients)))
    return [make_patient(seed, i, config) for i in range(n_patients)]


TRUTH_COLUMNS = ("patient_id", "nodule_index", "diameter_mm", "lobe", "malignant",
                 "cx", "cy", "cz", "dataset_tag")


def truth_rows(patients) -> list:
    rows = []
    for p in patients:
        for j, t in enumerate(p.nodule_truth):
            rows.append({
                "patient_id": p.patient_id,
                "nodule_index": j,
                "diameter_mm": repr(round(t.diameter_mm, 6)),
                "lobe": t.lobe,
                "malignant": t.malignancy,
                "cx": repr(round(t.centroid[0], 6)),
                "cy": repr(round(t.centroid[1], 6)),
                "cz": repr(round(t.centroid[2], 6)),
                "dataset_tag": p.dataset_tag,
            })
    return rows


COHORT_INDEX = "cohort.json"


def save_cohort(patients: Sequence[PhantomPatient], directory) -> None:
    """Write anatomy and nodule masks as ITSV plus a JSON index of metadata."""
    import json
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for p in patients:
        voxgrid.write_volume(p.anatomy, d / f"{p.patient_id}.itsv")
        for j, m in enumerate(p.nodule_masks):
            voxgrid.write_volume(m, d / f"{p.patient_id}_n{j}.itsv")
        index.append({
            "patient_id": p.patient_id, "sex": p.sex, "age": p.age, "dataset_tag": p.dataset_tag,
            "seed": p.seed,
            "nodules": [{"diameter_mm": t.diameter_mm, "lobe": t.lobe, "malignancy": t.malignancy,
                         "centroid": list(t.centroid)} for t in p.nodule_truth],
        })
    (d / COHORT_INDEX).write_text(json.dumps({"version": 1, "patients": index}, indent=1, sort_keys=True))


def load_cohort(directory) -> list:
    import json
    from pathlib import Path

    d = Path(directory)
    try:
        meta = json.loads((d / COHORT_INDEX).read_text())
    except FileNotFoundError:
        raise PhantomError(f"no {COHORT_INDEX} in {d}") from None
    out = []
    for e in meta["patients"]:
        pid = e["patient_id"]
        anatomy = voxgrid.read_volume(d / f"{pid}.itsv")
        masks = tuple(voxgrid.read_volume(d / f"{pid}_n{j}.itsv") for j in range(len(e["nodules"])))
        truth = tuple(NoduleTruth(n["diameter_mm"], n["lobe"], n["malignancy"], tuple(n["centroid"]))
                      for n in e["nodules"])
        out.append(PhantomPatient(pid, anatomy, e["sex"], e["age"], e["dataset_tag"], masks, truth, e["seed"]))
    return out


def max_inscribed_radius_mm(anatomy: LabelVolume, label: int) -> float:
    """Largest distance from a label voxel to the nearest non-label voxel (exact EDT)."""
    from scipy import ndimage

    m = np.pad(anatomy.voxels == label, 1, constant_values=False)
    if not m.any():
        return 0.0
    edt = ndimage.distance_transform_edt(m, sampling=anatomy.spacing.as_tuple())
    return float(edt.max())


__all__ = [
    "generate_phantom", "seed_nodules", "phantom_cohort", "make_patient", "PhantomPatient",
    "NoduleTruth", "CohortConfig", "LABELS", "LOBE_LABELS", "DATASET_TAGS", "truth_rows",
    "default_size_sampler", "fixed_size", "lobe_side", "max_inscribed_radius_mm", "NodulePlan",
    "design_plan", "save_cohort", "load_cohort",
]
