"""Intensity-histogram and feature-distribution quality metrics.

Histograms use 256 uniform bins over [-1024, 3071] HU.  Feature sets are
consumed from files (CSV or the binary ITSF1 format); no network extracts
them here.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from trialforge.errors import MetricError
from trialforge.voxgrid import HU_MAX, HU_MIN, NODULE_LABEL, HUVolume, LabelVolume

N_BINS = 256
BODY_FLOOR_HU = -950.0
KL_EPS = 1e-10
EIG_FLOOR = 1e-12
FEATURE_MAGIC = b"ITSF1\n"


# -- histograms ------------------------------------------------------------


@dataclass(frozen=True)
class HUHistogram:
    masses: np.ndarray
    lo: float = float(HU_MIN)
    hi: float = float(HU_MAX)

    @property
    def bins(self) -> int:
        return len(self.masses)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    @classmethod
    def from_counts(cls, counts, lo=float(HU_MIN), hi=float(HU_MAX)) -> "HUHistogram":
        counts = np.asarray(counts, float)
        total = counts.sum()
        if total <= 0:
            raise MetricError("empty selection: histogram has no mass")
        return cls(counts / total, float(lo), float(hi))


def _values(volume, mode: str, mask=None) -> np.ndarray:
    v = np.asarray(volume.voxels if hasattr(volume, "voxels") else volume, float)
    if mask is not None:
        v = v[np.asarray(mask) != 0]
    v = v.ravel()
    if mode == "body":
        v = v[v > BODY_FLOOR_HU]
    elif mode != "cohort":
        raise MetricError(f"unknown histogram mode {mode!r}")
    return v


def hu_counts(volume, mode: str = "cohort", bins: int = N_BINS, mask=None) -> np.ndarray:
    v = _values(volume, mode, mask)
    counts, _ = np.histogram(v, bins=bins, range=(HU_MIN, HU_MAX))
    return counts


def hu_histogram(volume, mode: str = "cohort", bins: int = N_BINS, mask=None) -> HUHistogram:
    """Normalised histogram; ``body`` mode keeps voxels above -950 HU."""
    return HUHistogram.from_counts(hu_counts(volume, mode, bins, mask))


def cohort_histogram(volumes: Sequence, mode: str = "cohort", bins: int = N_BINS) -> HUHistogram:
    """Pooled voxel histogram over several volumes."""
    if not volumes:
        raise MetricError("no volumes")
    return HUHistogram.from_counts(sum(hu_counts(v, mode, bins) for v in volumes))


def _pair(p, q) -> Tuple[np.ndarray, np.ndarray, float]:
    if isinstance(p, HUHistogram) and isinstance(q, HUHistogram):
        if p.bins != q.bins or p.lo != q.lo or p.hi != q.hi:
            raise MetricError("histogram binning mismatch")
        return p.masses, q.masses, p.width
    pa = np.asarray(getattr(p, "masses", p), float)
    qa = np.asarray(getattr(q, "masses", q), float)
    if pa.shape != qa.shape or pa.ndim != 1:
        raise MetricError("histogram binning mismatch")
    width = p.width if isinstance(p, HUHistogram) else (q.width if isinstance(q, HUHistogram) else 1.0)
    return pa, qa, width


def histogram_intersection(p, q) -> float:
    """Sum of bin-wise minima of two normalised histograms.

    Evaluated as 1 - L1/2, which equals the sum of minima for unit-mass inputs
    and makes HI(p, p) exactly 1.
    """
    pa, qa, _ = _pair(p, q)
    for a in (pa, qa):
        if abs(a.sum() - 1.0) > 1e-9 or np.any(a < 0):
            raise MetricError("histogram intersection needs non-negative unit-mass histograms")
    return float(min(1.0, max(0.0, 1.0 - 0.5 * np.abs(pa - qa).sum())))


def kl_divergence(p, q) -> float:
    """KL(p || q).

    When q has an empty bin under p's support, q is smoothed by adding 1e-10
    per bin and renormalising; otherwise q is used as is, so KL(p, p) is 0.
    """
    pa, qa, _ = _pair(p, q)
    nz = pa > 0
    qs = qa
    if np.any(qa[nz] <= 0):
        qs = (qa + KL_EPS) / (qa + KL_EPS).sum()
    return float(max(0.0, np.sum(pa[nz] * np.log(pa[nz] / qs[nz]))))


def wasserstein1(p, q, bin_width: Optional[float] = None) -> float:
    """Earth mover's distance in HU between two histograms on the same bins."""
    pa, qa, width = _pair(p, q)
    if bin_width is not None:
        width = bin_width
    return float(np.abs(np.cumsum(pa) - np.cumsum(qa)).sum() * width)


# -- feature distances -----------------------------------------------------


@dataclass(frozen=True)
class FeatureSet:
    matrix: np.ndarray
    tags: Optional[tuple] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, float)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2 or m.shape[0] == 0:
            raise MetricError("feature set must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(m)):
            raise MetricError("feature set contains non-finite values")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _as_features(x) -> np.ndarray:
    return x.matrix if isinstance(x, FeatureSet) else FeatureSet(np.asarray(x, float)).matrix


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    try:
        w, v = np.linalg.eigh((m + m.T) / 2.0)
    except np.linalg.LinAlgError as e:
        raise MetricError(f"matrix square root did not converge: {e}") from None
    w = np.where(w < EIG_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^(1/2)).

    Tr((AB)^(1/2)) is taken as Tr((A^(1/2) B A^(1/2))^(1/2)), which has the
    same eigenvalues and stays symmetric.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise MetricError("feature dimension mismatch")
    ra = _psd_sqrt(cov_a)
    inner = ra @ cov_b @ ra
    try:
        w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    except np.linalg.LinAlgError as e:
        raise MetricError(f"matrix square root did not converge: {e}") from None
    tr_sqrt = float(np.sqrt(np.where(w < EIG_FLOOR, 0.0, w)).sum())
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt))


def frechet_distance(a, b) -> float:
    """FID between two feature sets (covariance with the n-1 estimator)."""
    x, y = _as_features(a), _as_features(b)
    if x.shape[1] != y.shape[1]:
        raise MetricError("feature dimension mismatch")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise MetricError("need at least 2 rows per feature set")
    return frechet_from_moments(x.mean(0), np.cov(x, rowvar=False, ddof=1),
                                y.mean(0), np.cov(y, rowvar=False, ddof=1))


def fid_avg(planes_a: Sequence, planes_b: Sequence) -> float:
    """Mean FID over per-plane feature sets (e.g. XY, YZ, ZX)."""
    if len(planes_a) != len(planes_b) or not planes_a:
        raise MetricError("plane lists must be non-empty and of equal length")
    return float(np.mean([frechet_distance(a, b) for a, b in zip(planes_a, planes_b)]))


def kid(a, b) -> float:
    """Unbiased MMD^2 with the cubic kernel k(x, y) = (x.y / dim + 1)^3."""
    x, y = _as_features(a), _as_features(b)
    if x.shape[1] != y.shape[1]:
        raise MetricError("feature dimension mismatch")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise MetricError("need at least 2 rows per feature set")
    d = x.shape[1]
    kxx = (x @ x.T / d + 1.0) ** 3
    kyy = (y @ y.T / d + 1.0) ** 3
    kxy = (x @ y.T / d + 1.0) ** 3
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


# -- ROI -------------------------------------------------------------------


def nodule_roi_stats(hu: HUVolume, composed: LabelVolume) -> tuple:
    """(mean, population sd, min, max) HU over label-23 voxels."""
    if hu.dims != composed.dims:
        raise MetricError("HU and label volumes differ in shape")
    roi = np.asarray(hu.voxels, float)[np.asarray(composed.voxels) == NODULE_LABEL]
    if roi.size == 0:
        raise MetricError("label 23 absent")
    return float(roi.mean()), float(roi.std(ddof=0)), float(roi.min()), float(roi.max())


# -- real-to-real baseline -------------------------------------------------


@dataclass(frozen=True)
class R2RTable:
    pairs: tuple  # ((tag_a, tag_b, fid), ...)
    median: float
    q1: float
    q3: float


def summarize_fids(values: Sequence[float]) -> tuple:
    """(median, Q1, Q3); quartiles use the (n + 1) p order-statistic rule."""
    v = np.asarray(values, float)
    if v.size == 0:
        raise MetricError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="weibull")
    return float(med), float(q1), float(q3)


def r2r_baseline(cohorts: Sequence[Tuple[str, object]], jobs: int = 1) -> R2RTable:
    """FID over all unordered pairs of tagged feature sets."""
    if len(cohorts) < 2:
        raise MetricError("need at least 2 cohorts")
    combos = list(itertools.combinations(range(len(cohorts)), 2))

    def one(ij):
        i, j = ij
        return frechet_distance(cohorts[i][1], cohorts[j][1])

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            fids = list(ex.map(one, combos))
    else:
        fids = [one(c) for c in combos]
    pairs = tuple((cohorts[i][0], cohorts[j][0], f) for (i, j), f in zip(combos, fids))
    med, q1, q3 = summarize_fids(fids)
    return R2RTable(pairs, med, q1, q3)


# -- quality rows ----------------------------------------------------------

QUALITY_COLUMNS = ("mode", "fid_avg", "hi_mean", "hi_sd", "kl_mean", "kl_sd", "w1_mean", "w1_sd",
                   "cohort_hi", "nodule_hu", "n_cases")


@dataclass(frozen=True)
class QualityRow:
    mode: str
    fid_avg: Optional[float]
    hi_mean: float
    hi_sd: float
    kl_mean: float
    kl_sd: float
    w1_mean: float
    w1_sd: float
    cohort_hi: float
    nodule_hu: float
    n_cases: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in QUALITY_COLUMNS}


def quality_row(mode: str, pairs: Sequence[tuple], fid: Optional[float] = None) -> QualityRow:
    """Aggregate per-case metrics over ``(host_hu, synth_hu, composed)`` triples.

    Per-case HI, KL(host || synth) and W1 use body-mode histograms; cohort HI
    pools all voxels of each side.
    """
    if not pairs:
        raise MetricError("no cases")
    his, kls, w1s, nod = [], [], [], []
    for host, synth, composed in pairs:
        p = hu_histogram(host, "body")
        q = hu_histogram(synth, "body")
        his.append(histogram_intersection(p, q))
        kls.append(kl_divergence(p, q))
        w1s.append(wasserstein1(p, q))
        if composed is not None and np.any(np.asarray(composed.voxels) == NODULE_LABEL):
            nod.append(nodule_roi_stats(synth, composed)[0])
    chi = histogram_intersection(cohort_histogram([h for h, _, _ in pairs]),
                                 cohort_histogram([s for _, s, _ in pairs]))
    return QualityRow(mode, fid, float(np.mean(his)), float(np.std(his)), float(np.mean(kls)),
                      float(np.std(kls)), float(np.mean(w1s)), float(np.std(w1s)), chi,
                      float(np.mean(nod)) if nod else float("nan"), len(pairs))


def histogram_features(volumes: Sequence, bins: int = 32) -> FeatureSet:
    """Body-mode HU histograms as feature vectors.

    A cheap stand-in when no learned features are available, so distribution
    distances can run end to end on phantoms.
    """
    rows = [hu_histogram(v, "body", bins=bins).masses for v in volumes]
    return FeatureSet(np.vstack(rows))


# -- feature files ---------------------------------------------------------


def read_features(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if data.startswith(FEATURE_MAGIC):
        return parse_itsf(data)
    return parse_feature_csv(data.decode("utf-8"))


def parse_feature_csv(text: str) -> FeatureSet:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise MetricError("empty feature file")

    def numeric(s):
        try:
            float(s)
            return True
        except ValueError:
            return False

    tagged = not numeric(rows[0][0])
    tags, mat = [], []
    for r in rows:
        vals = r[1:] if tagged else r
        if tagged:
            tags.append(r[0])
        try:
            mat.append([float(v) for v in vals])
        except ValueError:
            raise MetricError(f"non-numeric feature value in row {len(mat)}") from None
    if len({len(m) for m in mat}) != 1:
        raise MetricError("feature rows differ in dimension")
    return FeatureSet(np.array(mat), tuple(tags) if tagged else None)


def parse_itsf(data: bytes) -> FeatureSet:
    if not data.startswith(FEATURE_MAGIC):
        raise MetricError("bad ITSF magic")
    rest = data[len(FEATURE_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise MetricError("truncated ITSF header")
    try:
        fields = dict(kv.split("=") for kv in rest[:nl].decode("ascii").split(";"))
        rows, cols = int(fields["rows"]), int(fields["cols"])
    except (ValueError, KeyError):
        raise MetricError("malformed ITSF header") from None
    payload = rest[nl + 1:]
    if len(payload) != rows * cols * 4:
        raise MetricError(f"ITSF payload has {len(payload)} bytes, expected {rows * cols * 4}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(float)
    return FeatureSet(arr)


def to_itsf(fs: FeatureSet) -> bytes:
    header = f"rows={fs.n};cols={fs.dim}\n".encode("ascii")
    return FEATURE_MAGIC + header + np.ascontiguousarray(fs.matrix, dtype="<f4").tobytes()


def write_features(fs: FeatureSet, path, binary: bool = True) -> None:
    if binary:
        Path(path).write_bytes(to_itsf(fs))
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, row in enumerate(fs.matrix):
            vals = [repr(float(v)) for v in row]
            w.writerow(([fs.tags[i]] if fs.tags else []) + vals)


def write_quality(rows: Sequence[QualityRow], path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return "" if math.isnan(v) else repr(round(v, 6))
        return str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUALITY_COLUMNS)
        for r in rows:
            w.writerow([fmt(r.as_dict()[k]) for k in QUALITY_COLUMNS])


__all__ = [
    "HUHistogram", "FeatureSet", "QualityRow", "R2RTable", "hu_histogram", "cohort_histogram",
    "histogram_intersection", "kl_divergence", "wasserstein1", "frechet_distance", "frechet_from_moments",
    "fid_avg", "kid", "nodule_roi_stats", "r2r_baseline", "summarize_fids", "quality_row",
    "histogram_features", "read_features", "write_features", "parse_itsf", "to_itsf", "write_quality",
]
