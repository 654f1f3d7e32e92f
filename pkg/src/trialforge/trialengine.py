"""Trial specifications, the deterministic Build operator and the 13 trial modes.

Every random choice is drawn from a counter-based stream keyed by the spec
seed and a label tuple, so a manifest is a pure function of
``(spec, profile table, host table)``:

* row labels: one shuffle keyed ``(sigma, "labels", subcohort)``;
* host for row ``r``: keyed ``(sigma, "host", r)``.  Hosts ignore prevalence
  and donor filters, so specs that share a seed and host predicate reuse the
  same host sequence;
* donor for row ``r``: keyed ``(sigma, subcohort, "donor", r)``: size bin
  from ``w_T``, lobe from ``lambda_T``, then uniform within the matching
  pool cell, relaxing the lobe and then the bin when a cell is empty.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from trialforge import phantom as ph
from trialforge.errors import BuildError, SpecError
from trialforge.profiler import HostRecord, NoduleProfile, point_from_percentiles
from trialforge.rng import Stream
from trialforge.templates import LOBES, SIZE_BIN_EDGES, TEMPLATES, Template, size_bin, template

SPEC_VERSION = 1
MAX_REDRAWS = 100
LABELS = ("benign", "malignant", "unlabeled")
MODES = tuple(f"M{i}" for i in range(1, 14))
POLICIES = ("one_to_one", "one_to_many_hosts", "donor_patient_complete")
MANIFEST_COLUMNS = ("row_index", "mode", "subcohort", "donor_patient", "donor_nodule", "host_patient",
                    "label", "lobe", "px", "py", "pz", "alpha", "group")

# M6 rotates over the five datasets that carry binary malignancy labels for
# every nodule in the phantom cohort (LUNA16 is unlabeled).
M6_DATASETS = ("DLCS24", "LUNA25", "LUNGx", "LNDbv4", "IMDCT")
M5_PREVALENCES = (0.01, 0.02, 0.05, 0.10, 0.20)
M4_AGE_SPLIT = 65.0


# -- predicates ------------------------------------------------------------


@dataclass(frozen=True)
class NodulePredicate:
    """Donor filter; ``None`` fields are unconstrained.

    ``size_mm`` is half-open ``[lo, hi)`` unless ``size_inclusive`` is set,
    in which case it is closed.
    """

    size_mm: Optional[Tuple[float, float]] = None
    lobes: Optional[Tuple[str, ...]] = None
    datasets: Optional[Tuple[str, ...]] = None
    size_inclusive: bool = False

    def __call__(self, prof: NoduleProfile) -> bool:
        if self.size_mm is not None:
            lo, hi = self.size_mm
            d = prof.diameter
            if d is None or d < lo:
                return False
            if (d > hi) if self.size_inclusive else (d >= hi):
                return False
        if self.lobes is not None and prof.lobe not in self.lobes:
            return False
        if self.datasets is not None and prof.dataset_tag not in self.datasets:
            return False
        return True

    def to_json(self) -> dict:
        out = {}
        if self.size_mm is not None:
            lo, hi = self.size_mm
            out["size_mm"] = [lo, None if math.isinf(hi) else hi]
            if self.size_inclusive:
                out["size_inclusive"] = True
        if self.lobes is not None:
            out["lobes"] = list(self.lobes)
        if self.datasets is not None:
            out["datasets"] = list(self.datasets)
        return out

    @classmethod
    def from_json(cls, d: Optional[dict]) -> "NodulePredicate":
        d = d or {}
        size = d.get("size_mm")
        if size is not None:
            lo, hi = size
            size = (float(lo if lo is not None else 0.0), float("inf") if hi is None else float(hi))
            if size[0] > size[1]:
                raise SpecError(f"phi_nod.size_mm lower bound exceeds upper: {size}")
        lobes = d.get("lobes")
        if lobes is not None:
            bad = [x for x in lobes if x not in LOBES]
            if bad:
                raise SpecError(f"unknown lobes in phi_nod: {bad}")
            lobes = tuple(lobes)
        datasets = tuple(d["datasets"]) if d.get("datasets") is not None else None
        return cls(size, lobes, datasets, bool(d.get("size_inclusive", False)))


@dataclass(frozen=True)
class HostPredicate:
    """Host filter on dataset tag (``"!TAG"`` negates), sex and half-open age band."""

    dataset: Optional[str] = None
    sex: Optional[str] = None
    age: Optional[Tuple[float, float]] = None

    def __call__(self, host: HostRecord) -> bool:
        if self.dataset is not None:
            if self.dataset.startswith("!"):
                if host.dataset_tag == self.dataset[1:]:
                    return False
            elif host.dataset_tag != self.dataset:
                return False
        if self.sex is not None and host.sex != self.sex:
            return False
        if self.age is not None and not (self.age[0] <= host.age < self.age[1]):
            return False
        return True

    def to_json(self) -> dict:
        out = {}
        if self.dataset is not None:
            out["dataset"] = self.dataset
        if self.sex is not None:
            out["sex"] = self.sex
        if self.age is not None:
            out["age"] = list(self.age)
        return out

    @classmethod
    def from_json(cls, d: Optional[dict]) -> "HostPredicate":
        d = d or {}
        sex = d.get("sex")
        if sex is not None and sex not in ("M", "F"):
            raise SpecError(f"phi_demo.sex must be M or F, got {sex!r}")
        age = d.get("age")
        if age is not None:
            age = (float(age[0]), float(age[1]))
        return cls(d.get("dataset"), sex, age)


@dataclass(frozen=True)
class InsertionParams:
    alpha_max: float = 1.5
    rho_min: float = 2.0


# -- trial spec ------------------------------------------------------------


@dataclass(frozen=True)
class TrialSpec:
    n: int = 1000
    pi: float = 0.04
    template: str = "NLST"
    phi_nod: NodulePredicate = field(default_factory=NodulePredicate)
    phi_ins: InsertionParams = field(default_factory=InsertionParams)
    phi_demo: HostPredicate = field(default_factory=HostPredicate)
    sigma: int = 0
    B: int = 0
    d_excl: Tuple[str, ...] = ()
    mode: str = "M1"
    policy: Optional[str] = None
    subcohort: str = "all"
    nodules_per_case: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise SpecError(f"n must be a positive integer, got {self.n!r}")
        if not (0.0 <= self.pi <= 1.0):
            raise SpecError(f"pi must lie in [0, 1], got {self.pi}")
        if self.template not in TEMPLATES:
            raise SpecError(f"unknown template {self.template!r}")
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.policy is not None and self.policy not in POLICIES:
            raise SpecError(f"unknown policy {self.policy!r}")
        lo, hi = self.nodules_per_case
        if not (1 <= lo <= hi):
            raise SpecError(f"invalid nodules_per_case {self.nodules_per_case}")
        if not (0 <= self.sigma < 2 ** 64):
            raise SpecError("sigma must be a 64-bit unsigned integer")

    @property
    def tmpl(self) -> Template:
        return template(self.template)

    @property
    def n_malignant(self) -> int:
        return n_malignant(self.n, self.pi)

    def to_json(self) -> dict:
        return {
            "version": SPEC_VERSION,
            "n": self.n,
            "pi": self.pi,
            "template": self.template,
            "phi_nod": self.phi_nod.to_json(),
            "phi_ins": asdict(self.phi_ins),
            "phi_demo": self.phi_demo.to_json(),
            "sigma": self.sigma,
            "B": self.B,
            "d_excl": list(self.d_excl),
            "mode": self.mode,
            "policy": self.policy,
            "subcohort": self.subcohort,
            "nodules_per_case": list(self.nodules_per_case),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrialSpec":
        known = {"version", "n", "pi", "template", "phi_nod", "phi_ins", "phi_demo", "sigma", "B",
                 "d_excl", "mode", "policy", "subcohort", "nodules_per_case"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec fields: {sorted(extra)}")
        try:
            ins = d.get("phi_ins") or {}
            return cls(
                n=int(d.get("n", 1000)),
                pi=float(d.get("pi", template(d.get("template", "NLST")).pi)),
                template=d.get("template", "NLST"),
                phi_nod=NodulePredicate.from_json(d.get("phi_nod")),
                phi_ins=InsertionParams(float(ins.get("alpha_max", 1.5)), float(ins.get("rho_min", 2.0))),
                phi_demo=HostPredicate.from_json(d.get("phi_demo")),
                sigma=int(d.get("sigma", 0)),
                B=int(d.get("B", 0)),
                d_excl=tuple(d.get("d_excl") or ()),
                mode=d.get("mode", "M1"),
                policy=d.get("policy"),
                subcohort=str(d.get("subcohort", "all")),
                nodules_per_case=tuple(d.get("nodules_per_case", (1, 1))),
            )
        except (TypeError, ValueError) as exc:
            raise SpecError(f"malformed spec: {exc}") from exc

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def n_malignant(n: int, pi: float) -> int:
    # guard against binary representation (0.07 * 100 = 7.000000000000001 etc.)
    return int(math.floor(n * pi + 1e-9))


def load_spec(path) -> TrialSpec:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SpecError(f"{path}: spec must be a JSON object")
    return TrialSpec.from_json(data)


# -- manifest --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    row_index: int
    mode: str
    subcohort: str
    donor_patient: str
    donor_nodule: int
    host_patient: str
    label: str
    lobe: str
    px: float
    py: float
    pz: float
    alpha: float = 1.0
    group: int = -1

    @property
    def placement(self) -> tuple:
        return (self.px, self.py, self.pz)

    def as_strings(self) -> list:
        return [str(self.row_index), self.mode, self.subcohort, self.donor_patient, str(self.donor_nodule),
                self.host_patient, self.label, self.lobe, _num(self.px), _num(self.py), _num(self.pz),
                _num(self.alpha), str(self.group)]


def _num(x: float) -> str:
    return repr(round(float(x), 6))


@dataclass
class Manifest:
    mode: str
    subcohort: str
    rows: List[ManifestRow]
    spec: Optional[TrialSpec] = None
    meta: dict = field(default_factory=dict)
    relaxations: List[str] = field(default_factory=list)

    @property
    def digest(self) -> str:
        return manifest_digest(self)

    def groups(self) -> List[List[ManifestRow]]:
        out: Dict[int, List[ManifestRow]] = {}
        for r in self.rows:
            out.setdefault(r.group if r.group >= 0 else -1 - r.row_index, []).append(r)
        return list(out.values())

    def label_counts(self) -> dict:
        counts = {k: 0 for k in LABELS}
        for r in self.rows:
            counts[r.label] += 1
        return counts

    def __len__(self):
        return len(self.rows)


def _header_blob(m: Manifest) -> str:
    if m.spec is not None:
        return m.spec.canonical()
    return json.dumps({"mode": m.mode, "subcohort": m.subcohort, **m.meta}, sort_keys=True,
                      separators=(",", ":"))


def manifest_digest(m: Manifest) -> str:
    """SHA-256 over the canonical spec header and the ordered row serialisation."""
    h = hashlib.sha256()
    h.update(_header_blob(m).encode("utf-8"))
    h.update(b"\n")
    for r in m.rows:
        h.update(",".join(r.as_strings()).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_manifests(manifests: Sequence[Manifest], path) -> str:
    """Write one CSV holding every row of ``manifests`` plus a ``.digest`` sidecar.

    The sidecar holds one ``<subcohort> <digest>`` line per manifest followed
    by ``combined <digest>`` over the lines above it.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for m in manifests:
            for r in m.rows:
                w.writerow(r.as_strings())
    lines = [f"{m.subcohort} {m.digest}" for m in manifests]
    combined = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    with open(str(path) + ".digest", "w") as fh:
        fh.write("\n".join(lines + [f"combined {combined}"]) + "\n")
    return combined


def read_manifest_rows(path) -> List[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS[:-1] if c not in (reader.fieldnames or [])]
        if missing:
            raise SpecError(f"{path}: manifest missing columns {missing}")
        rows = []
        for r in reader:
            rows.append(ManifestRow(
                int(r["row_index"]), r["mode"], r["subcohort"], r["donor_patient"], int(r["donor_nodule"]),
                r["host_patient"], r["label"], r["lobe"], float(r["px"]), float(r["py"]), float(r["pz"]),
                float(r["alpha"]), int(r.get("group") or -1),
            ))
    return rows


def read_digest_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                k, v = line.split()
                out[k] = v
    return out


# -- pools -----------------------------------------------------------------


def _profile_order(p: NoduleProfile):
    return (p.patient_id, p.nodule_index)


def donor_pool(profiles: Iterable[NoduleProfile], spec: TrialSpec) -> List[NoduleProfile]:
    """Omega: blueprint-valid nodules outside D_excl that satisfy phi_nod, in canonical order."""
    excl = set(spec.d_excl)
    pool = [p for p in profiles
            if p.blueprint_valid and p.lobe is not None and p.dataset_tag not in excl and spec.phi_nod(p)]
    return sorted(pool, key=_profile_order)


class _Cells:
    def __init__(self, pool: Sequence[NoduleProfile]):
        self.all = list(pool)
        self.by_bin: Dict[int, list] = {}
        self.by_cell: Dict[tuple, list] = {}
        for p in pool:
            b = size_bin(p.diameter)
            self.by_bin.setdefault(b, []).append(p)
            self.by_cell.setdefault((b, p.lobe), []).append(p)


def lobe_fits(host: HostRecord, lobe: str, diameter: float, rho_min: float) -> bool:
    """The donor diameter plus a pleural margin on both sides fits the host lobe box."""
    box = host.box(lobe)
    if box is None:
        return False
    extent = min(float(e) + s for e, s in zip(box.extent, host.spacing))
    return diameter + 2.0 * rho_min <= extent


def _feasible(donor: NoduleProfile, host: HostRecord, spec: TrialSpec) -> bool:
    return donor.patient_id != host.patient_id and lobe_fits(host, donor.lobe, donor.diameter,
                                                            spec.phi_ins.rho_min)


def placement_for(donor: NoduleProfile, host: HostRecord) -> tuple:
    """World target read from the donor blueprint's lobe percentiles."""
    box = host.box(donor.lobe)
    side = ph.lobe_side(donor.lobe)
    p = point_from_percentiles(donor["reinsertion_lobe_cc_pct"], donor["reinsertion_lobe_ml_pct"],
                               donor["reinsertion_lobe_ap_pct"], box, side)
    return tuple(round(float(v), 6) for v in p)


def _draw_donor(stream: Stream, cells: _Cells, tmpl: Template, log: list, row: int) -> NoduleProfile:
    b = stream.weighted_index(tmpl.w)
    lobe = LOBES[stream.weighted_index(tmpl.lam)]
    cell = cells.by_cell.get((b, lobe))
    if not cell:
        cell = cells.by_bin.get(b)
        if cell:
            log.append(f"row {row}: relaxed lobe {lobe} in bin {b}")
        else:
            cell = cells.all
            log.append(f"row {row}: relaxed bin {b} and lobe {lobe}")
    return cell[stream.below(len(cell))]


def build(spec: TrialSpec, profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord]) -> Manifest:
    """Deterministically build the manifest of one trial spec.

    Rows carry exactly ``floor(n * pi)`` malignant and the rest benign labels.
    Raises BuildError when a label pool is empty, no host satisfies the host
    predicate, or a row finds no feasible donor after 100 redraws.
    """
    if not profiles:
        raise BuildError("profile table is empty")
    pool = donor_pool(profiles, spec)
    pools = {lab: _Cells([p for p in pool if p.malignancy == lab]) for lab in ("malignant", "benign")}
    host_list = sorted((h for h in hosts if h.host_eligible and spec.phi_demo(h)), key=lambda h: h.patient_id)
    if not host_list:
        raise BuildError(f"no host satisfies phi_demo {spec.phi_demo.to_json()}")

    lo_k, hi_k = spec.nodules_per_case
    case_sizes = []
    for c in range(spec.n):
        if hi_k == lo_k:
            case_sizes.append(lo_k)
        else:
            case_sizes.append(Stream.derive(spec.sigma, spec.subcohort, "nnod", c).integer(lo_k, hi_k))
    n_rows = sum(case_sizes)
    n_mal = n_malignant(n_rows, spec.pi)
    need = {"malignant": n_mal, "benign": n_rows - n_mal}
    for lab, k in need.items():
        if k > 0 and not pools[lab].all:
            raise BuildError(f"infeasible prevalence: need {k} {lab} donors but the filtered pool has none")

    labels = ["malignant"] * n_mal + ["benign"] * (n_rows - n_mal)
    Stream.derive(spec.sigma, "labels", spec.subcohort).shuffle(labels)

    tmpl = spec.tmpl
    rows: List[ManifestRow] = []
    log: List[str] = []
    r = 0
    for c, k in enumerate(case_sizes):
        host = host_list[Stream.derive(spec.sigma, "host", c).below(len(host_list))]
        used = set()
        for _ in range(k):
            ds = Stream.derive(spec.sigma, spec.subcohort, "donor", r)
            cells = pools[labels[r]]
            for _attempt in range(MAX_REDRAWS):
                donor = _draw_donor(ds, cells, tmpl, log, r)
                if donor.key not in used and _feasible(donor, host, spec):
                    break
            else:
                raise BuildError(
                    f"row {r}: no feasible {labels[r]} donor for host {host.patient_id} "
                    f"after {MAX_REDRAWS} redraws")
            used.add(donor.key)
            px, py, pz = placement_for(donor, host)
            rows.append(ManifestRow(r, spec.mode, spec.subcohort, donor.patient_id, donor.nodule_index,
                                    host.patient_id, labels[r], donor.lobe, px, py, pz, 1.0,
                                    c if hi_k > 1 else -1))
            r += 1
    return Manifest(spec.mode, spec.subcohort, rows, spec=spec, relaxations=log)


# -- mode constructors -----------------------------------------------------


def _base(**kw) -> TrialSpec:
    return TrialSpec(**kw)


def mode_specs(mode: str, base: Optional[TrialSpec] = None, config: Optional[dict] = None) -> List[Tuple[str, TrialSpec]]:
    """Sub-cohort specs for the synthetic modes M1-M10.

    ``base`` overrides the M1 defaults (n, seed, template ...) before the
    mode-specific fields are applied.  ``config`` may carry ``m8_exclusion``
    (list of dataset tags), ``n`` (cohort size override) and ``sigma``.
    """
    config = config or {}
    if mode not in MODES[:10]:
        raise SpecError(f"mode_specs covers M1-M10, got {mode!r}")
    m1 = base or TrialSpec(n=1000, pi=0.04, template="NLST", sigma=0)
    m1 = replace(m1, mode=mode)
    n_override = config.get("n")
    if "sigma" in config:
        m1 = replace(m1, sigma=int(config["sigma"]))

    def n_or(default):
        return int(n_override) if n_override is not None else default

    out: List[Tuple[str, TrialSpec]] = []
    if mode == "M1":
        out.append(("M1", replace(m1, n=n_or(m1.n), subcohort="M1")))
    elif mode == "M2":
        for i in range(6):
            lo, hi = SIZE_BIN_EDGES[i], SIZE_BIN_EDGES[i + 1]
            tag = f"size_{i + 1}"
            out.append((tag, replace(m1, n=n_or(100), subcohort=tag,
                                     phi_nod=NodulePredicate(size_mm=(lo, hi)))))
    elif mode == "M3":
        for lobe in LOBES:
            tag = f"lobe_{lobe}"
            out.append((tag, replace(m1, n=n_or(100), subcohort=tag,
                                     phi_nod=NodulePredicate(size_mm=(6.0, 15.0), lobes=(lobe,),
                                                             size_inclusive=True))))
    elif mode == "M4":
        dataset = config.get("m4_dataset", "DLCS24")
        for sex in ("M", "F"):
            for band, age in (("lt65", (0.0, M4_AGE_SPLIT)), ("ge65", (M4_AGE_SPLIT, 200.0))):
                tag = f"{sex}_{band}"
                out.append((tag, replace(m1, n=n_or(200), subcohort=tag,
                                         phi_demo=HostPredicate(dataset=dataset, sex=sex, age=age))))
    elif mode == "M5":
        sigma = int(config.get("sigma", 42))
        for v in M5_PREVALENCES:
            tag = f"pi_{v:.2f}"
            out.append((tag, replace(m1, n=n_or(500), pi=v, sigma=sigma, subcohort=tag)))
    elif mode == "M6":
        all_tags = tuple(config.get("datasets", ph.DATASET_TAGS))
        for tag_k in config.get("m6_datasets", M6_DATASETS):
            tag = f"only_{tag_k}"
            out.append((tag, replace(m1, n=n_or(300), subcohort=tag,
                                     d_excl=tuple(t for t in all_tags if t != tag_k),
                                     phi_demo=HostPredicate(dataset="!" + tag_k))))
    elif mode == "M7":
        for b in range(1, 21):
            tag = f"boot_{b:02d}"
            out.append((tag, replace(m1, n=n_or(200), sigma=m1.sigma + b, subcohort=tag)))
    elif mode == "M8":
        excl = tuple(config.get("m8_exclusion", ()))
        sigma = int(config.get("sigma", 42))
        out.append(("M8", replace(m1, n=n_or(500), sigma=sigma, d_excl=excl, subcohort="M8")))
    elif mode == "M9":
        for r in range(3):
            tag = f"round_{r}"
            out.append((tag, replace(m1, n=n_or(500), pi=m9_prevalence(r), sigma=m1.sigma + r,
                                     subcohort=tag)))
    elif mode == "M10":
        total = n_or(531)
        out.append(("single", replace(m1, n=max(1, math.floor(0.75 * total)), subcohort="single")))
        out.append(("multi", replace(m1, n=max(1, math.ceil(0.25 * total)), subcohort="multi",
                                     nodules_per_case=(2, 5))))
    return out


def m9_prevalence(r: int) -> float:
    """Round-r prevalence of the decay schedule, reported at three decimals (0.040, 0.028, 0.020)."""
    return round(0.04 * 0.7 ** r, 3)


def _eligible_donors(profiles: Iterable[NoduleProfile]) -> List[NoduleProfile]:
    return sorted((p for p in profiles if p.blueprint_valid and p.lobe is not None), key=_profile_order)


def _host_map(hosts: Iterable[HostRecord]) -> Dict[str, HostRecord]:
    return {h.patient_id: h for h in hosts if h.host_eligible}


def _row(i, mode, sub, donor: NoduleProfile, host: HostRecord, group=-1) -> ManifestRow:
    px, py, pz = placement_for(donor, host)
    return ManifestRow(i, mode, sub, donor.patient_id, donor.nodule_index, host.patient_id,
                       donor.malignancy, donor.lobe, px, py, pz, 1.0, group)


def build_iso(profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord]) -> List[Manifest]:
    """M11: every donor-eligible nodule re-inserted into its own patient; one manifest per dataset."""
    hmap = _host_map(hosts)
    by_tag: Dict[str, List[NoduleProfile]] = {}
    for p in _eligible_donors(profiles):
        if p.patient_id in hmap:
            by_tag.setdefault(p.dataset_tag, []).append(p)
    out = []
    for tag in sorted(by_tag, key=_tag_order):
        rows = [_row(i, "M11", tag, p, hmap[p.patient_id]) for i, p in enumerate(by_tag[tag])]
        out.append(Manifest("M11", tag, rows, meta={"kind": "iso"}))
    return out


def build_comp(profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord]) -> List[Manifest]:
    """M12: each patient's eligible nodules inserted together into its own anatomy."""
    hmap = _host_map(hosts)
    by_tag: Dict[str, Dict[str, List[NoduleProfile]]] = {}
    for p in _eligible_donors(profiles):
        if p.patient_id in hmap:
            by_tag.setdefault(p.dataset_tag, {}).setdefault(p.patient_id, []).append(p)
    out = []
    for tag in sorted(by_tag, key=_tag_order):
        rows = []
        for g, pid in enumerate(sorted(by_tag[tag])):
            for p in by_tag[tag][pid]:
                rows.append(_row(len(rows), "M12", tag, p, hmap[pid], g))
        out.append(Manifest("M12", tag, rows, meta={"kind": "comp"}))
    return out


def _tag_order(tag: str) -> tuple:
    return (ph.DATASET_TAGS.index(tag) if tag in ph.DATASET_TAGS else len(ph.DATASET_TAGS), tag)


def derangement(items: Sequence, stream: Stream) -> list:
    """Seeded permutation with no fixed point (rejection sampling)."""
    if len(items) < 2:
        raise BuildError("a derangement needs at least two items")
    while True:
        perm = list(items)
        stream.shuffle(perm)
        if all(a != b for a, b in zip(items, perm)):
            return perm


def build_cross(profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord], policy: str, seed: int,
                n_hosts: int = 3, subcohort: str = "all", donor_tags: Optional[Sequence[str]] = None,
                host_tags: Optional[Sequence[str]] = None) -> Manifest:
    """M13: transplant nodules into foreign anatomies under an assignment policy.

    ``donor_tags``/``host_tags`` restrict donors and hosts to dataset tags
    (the cross-dataset grid).  Hosts are always different patients from the
    donor.
    """
    if policy not in POLICIES:
        raise SpecError(f"unknown policy {policy!r}")
    hmap = _host_map(hosts)
    donors = [p for p in _eligible_donors(profiles) if donor_tags is None or p.dataset_tag in donor_tags]
    host_ids = sorted(pid for pid, h in hmap.items() if host_tags is None or h.dataset_tag in host_tags)
    by_patient: Dict[str, List[NoduleProfile]] = {}
    for p in donors:
        by_patient.setdefault(p.patient_id, []).append(p)
    donor_ids = sorted(by_patient)
    meta = {"kind": "cross", "policy": policy, "seed": seed, "n_hosts": n_hosts}
    rows: List[ManifestRow] = []
    st = Stream.derive(seed, "cross", policy, subcohort)
    patients = sorted(set(donor_ids) | set(host_ids))
    if len(patients) < 2:
        raise BuildError("cross-patient transplantation needs at least two patients")

    if policy == "one_to_one":
        if donor_tags is None and host_tags is None:
            common = [pid for pid in donor_ids if pid in hmap]
            pairs = list(zip(common, derangement(common, st))) if len(common) >= 2 else []
        else:
            hs = [h for h in host_ids]
            st.shuffle(hs)
            pairs = []
            for pid in donor_ids:
                q = next((h for h in hs if h != pid), None)
                if q is None:
                    break
                hs.remove(q)
                pairs.append((pid, q))
        for g, (pid, q) in enumerate(pairs):
            for p in by_patient[pid]:
                rows.append(_row(len(rows), "M13", subcohort, p, hmap[q]))
    elif policy == "one_to_many_hosts":
        if len(patients) < n_hosts + 1 and donor_tags is None:
            raise BuildError(f"one_to_many_hosts with N={n_hosts} needs at least {n_hosts + 1} patients")
        for p in donors:
            cand = [h for h in host_ids if h != p.patient_id]
            if len(cand) < n_hosts:
                raise BuildError(f"only {len(cand)} candidate hosts for donor {p.key}, need {n_hosts}")
            chosen = st.child(p.patient_id, p.nodule_index).sample(cand, n_hosts)
            for q in chosen:
                rows.append(_row(len(rows), "M13", subcohort, p, hmap[q]))
    else:  # donor_patient_complete
        for g, pid in enumerate(donor_ids):
            cand = [h for h in host_ids if h != pid]
            if not cand:
                raise BuildError(f"no foreign host available for donor patient {pid}")
            q = cand[st.child(pid).below(len(cand))]
            for p in by_patient[pid]:
                rows.append(_row(len(rows), "M13", subcohort, p, hmap[q], g))
    return Manifest("M13", subcohort, rows, meta=meta)


def assignment_matrix(manifest: Manifest) -> Dict[Tuple[str, str], int]:
    """Sparse donor-patient x host-patient pairing counts."""
    out: Dict[Tuple[str, str], int] = {}
    for r in manifest.rows:
        key = (r.donor_patient, r.host_patient)
        out[key] = out.get(key, 0) + 1
    return out


def build_cross_grid(profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord], policy: str,
                     seed: int, n_hosts: int = 3, tags: Sequence[str] = ph.DATASET_TAGS) -> List[Manifest]:
    """M13 host-dataset x donor-dataset grid (all ordered pairs of distinct tags)."""
    out = []
    for host_tag in tags:
        for donor_tag in tags:
            if host_tag == donor_tag:
                continue
            sub = f"H_{host_tag}__D_{donor_tag}"
            try:
                m = build_cross(profiles, hosts, policy, seed, n_hosts, sub, (donor_tag,), (host_tag,))
            except BuildError as exc:
                m = Manifest("M13", sub, [], meta={"kind": "cross", "policy": policy, "seed": seed,
                                                   "error": str(exc)})
            m.meta.update(host_dataset=host_tag, donor_dataset=donor_tag)
            out.append(m)
    return out


def build_mode(mode: str, profiles: Sequence[NoduleProfile], hosts: Sequence[HostRecord],
               seed: Optional[int] = None, config: Optional[dict] = None, jobs: int = 1) -> List[Manifest]:
    """Build every sub-cohort manifest of a mode."""
    config = dict(config or {})
    if seed is not None:
        config.setdefault("sigma", seed)
    if mode == "M11":
        return build_iso(profiles, hosts)
    if mode == "M12":
        return build_comp(profiles, hosts)
    if mode == "M13":
        return build_cross_grid(profiles, hosts, config.get("policy", "one_to_one"),
                                int(config.get("sigma", 0)), int(config.get("n_hosts", 3)))
    base = None
    if "template" in config:
        base = TrialSpec(template=config["template"], pi=template(config["template"]).pi)
    specs = mode_specs(mode, base, config)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(lambda s: build(s[1], profiles, hosts), specs))
    return [build(s, profiles, hosts) for _, s in specs]


def verify(manifests: Sequence[Manifest], digest_path) -> Tuple[bool, List[str]]:
    """Compare rebuilt manifests against a ``.digest`` sidecar."""
    want = read_digest_file(digest_path)
    problems = []
    for m in manifests:
        if want.get(m.subcohort) != m.digest:
            problems.append(f"{m.subcohort}: expected {want.get(m.subcohort)} got {m.digest}")
    extra = set(want) - {m.subcohort for m in manifests} - {"combined"}
    for k in sorted(extra):
        problems.append(f"{k}: present in digest file but not rebuilt")
    return (not problems, problems)


def manifest_to_csv_text(m: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in m.rows:
        w.writerow(r.as_strings())
    return buf.getvalue()
