"""Statistics over model prediction logs.

Accuracy cells, guidance lift, rank correlation between domains, paired
McNemar tests, percentile bootstrap intervals, host/donor spread
decomposition for twin-cross grids, and single-class (degenerate) detection.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import stats

from trialforge.errors import StatsError

TASK_CLASSES = {
    "presence": ("absent", "present"),
    "lobe": ("RUL", "RML", "RLL", "LUL", "LLL"),
    "size": ("<6", "6-10", "10-20", ">20"),
}
CONDITIONS = ("plain", "bbox", "contour", "bbox_contour")
GUIDED = CONDITIONS[1:]
DOMAINS = ("real", "synthetic")
CELL_KEY = ("model", "task", "condition", "domain")
EXACT_LIMIT = 25
DEGENERATE_RATE = 0.999
LOG_COLUMNS = ("model", "task", "condition", "domain", "mode", "sample_id", "host_dataset",
               "donor_dataset", "pred", "truth")


@dataclass(frozen=True)
class PredictionRecord:
    model: str
    task: str
    condition: str
    domain: str
    mode: str
    sample_id: str
    host_dataset: str
    donor_dataset: str
    pred: str
    truth: str

    def __post_init__(self):
        classes = TASK_CLASSES.get(self.task)
        if classes is None:
            raise StatsError(f"unknown task {self.task!r}")
        if self.condition not in CONDITIONS:
            raise StatsError(f"unknown condition {self.condition!r}")
        if self.domain not in DOMAINS:
            raise StatsError(f"unknown domain {self.domain!r}")
        if self.pred not in classes or self.truth not in classes:
            raise StatsError(f"{self.task} record {self.sample_id}: classes must be in {classes}")

    @property
    def correct(self) -> bool:
        return self.pred == self.truth


def read_predictions(path) -> List[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOG_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise StatsError(f"prediction log lacks columns {sorted(missing)}")
        return [PredictionRecord(**{k: row[k] for k in LOG_COLUMNS}) for row in reader]


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([getattr(r, k) for k in LOG_COLUMNS])


# -- accuracy cells --------------------------------------------------------


@dataclass(frozen=True)
class EvalCell:
    key: tuple
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


def accuracy_cells(records: Iterable[PredictionRecord], grouping: Sequence[str] = CELL_KEY) -> List[EvalCell]:
    counts: Dict[tuple, List[int]] = defaultdict(lambda: [0, 0])
    seen = False
    for r in records:
        seen = True
        c = counts[tuple(getattr(r, g) for g in grouping)]
        c[0] += 1
        c[1] += r.correct
    if not seen:
        raise StatsError("no records")
    return [EvalCell(k, n, k_ok) for k, (n, k_ok) in sorted(counts.items())]


# -- guidance lift ---------------------------------------------------------


@dataclass(frozen=True)
class Lift:
    best: str
    plain: float
    best_value: float
    delta: float


def guidance_lift(cells) -> Lift:
    """Best guided condition and its lift over plain.

    ``cells`` maps condition to accuracy (or is a list of EvalCell whose key
    holds the condition at position 2).  Ties go to the earlier of bbox,
    contour, bbox_contour.
    """
    if not isinstance(cells, Mapping):
        cells = {c.key[2]: c.accuracy for c in cells}
    if "plain" not in cells:
        raise StatsError("plain cell missing")
    guided = [c for c in GUIDED if c in cells]
    if not guided:
        raise StatsError("no guided cells")
    best = guided[0]
    for c in guided[1:]:
        if cells[c] > cells[best]:
            best = c
    return Lift(best, float(cells["plain"]), float(cells[best]), float(cells[best]) - float(cells["plain"]))


def lifts(cells: Sequence[EvalCell]) -> Dict[tuple, Lift]:
    """Guidance lift per (model, task, domain); groups lacking plain or any guided cell are skipped."""
    groups: Dict[tuple, Dict[str, float]] = defaultdict(dict)
    for c in cells:
        model, task, cond, domain = c.key
        groups[(model, task, domain)][cond] = c.accuracy
    return {k: guidance_lift(v) for k, v in sorted(groups.items())
            if "plain" in v and any(c in v for c in GUIDED)}


# -- rank correlation ------------------------------------------------------


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    a = np.asarray(x, float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Spearman rho with average ranks and a two-sided t-approximation p-value."""
    if len(x) != len(y):
        raise StatsError("vectors differ in length")
    n = len(x)
    if n < 3:
        raise StatsError("need at least 3 pairs")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatsError("constant vector: ranks carry no order")
    # one square root keeps identical rank vectors at exactly 1
    rho = max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


# -- McNemar ---------------------------------------------------------------


@dataclass(frozen=True)
class McNemar:
    b: int  # first correct, second wrong
    c: int  # first wrong, second correct
    statistic: float
    p: float
    p_corrected: float
    exact: bool


def mcnemar(pairs: Iterable[Tuple[bool, bool]], m: int = 1) -> McNemar:
    """Paired test on (correct_first, correct_second) outcomes.

    Exact two-sided binomial when b + c <= 25, otherwise chi-square with
    continuity correction.  The statistic is always the corrected chi-square.
    ``m`` is the Bonferroni multiplier.
    """
    if m < 1:
        raise StatsError("Bonferroni multiplier must be >= 1")
    b = c = 0
    for first, second in pairs:
        if first and not second:
            b += 1
        elif second and not first:
            c += 1
    return mcnemar_counts(b, c, m)


def mcnemar_counts(b: int, c: int, m: int = 1) -> McNemar:
    n = b + c
    if n == 0:
        return McNemar(0, 0, 0.0, 1.0, 1.0, True)
    stat = max(0.0, abs(b - c) - 1.0) ** 2 / n
    exact = n <= EXACT_LIMIT
    if exact:
        p = min(1.0, 2.0 * float(stats.binom.cdf(min(b, c), n, 0.5)))
    else:
        p = float(stats.chi2.sf(stat, 1))
    return McNemar(b, c, stat, p, bonferroni(p, m), exact)


def bonferroni(p: float, m: int) -> float:
    return min(1.0, p * m)


def paired_outcomes(records: Iterable[PredictionRecord], model: str, task: str, domain: str,
                    first: str, second: str) -> List[Tuple[bool, bool]]:
    """Outcome pairs matched on (mode, sample_id); unmatched samples are dropped."""
    a: Dict[tuple, bool] = {}
    b: Dict[tuple, bool] = {}
    for r in records:
        if (r.model, r.task, r.domain) != (model, task, domain):
            continue
        key = (r.mode, r.sample_id)
        if r.condition == first:
            a[key] = r.correct
        elif r.condition == second:
            b[key] = r.correct
    return [(a[k], b[k]) for k in sorted(a.keys() & b.keys())]


# -- bootstrap -------------------------------------------------------------


def bootstrap_ci(replicates: Sequence[float], level: float = 0.95) -> Tuple[float, float]:
    """Percentile interval with linear interpolation between order statistics."""
    r = np.asarray(replicates, float)
    if r.size < 2:
        raise StatsError("need at least 2 replicates")
    if not (0 < level < 1):
        raise StatsError("level must be in (0, 1)")
    a = (1.0 - level) / 2.0
    lo, hi = np.percentile(r, [100 * a, 100 * (1 - a)], method="linear")
    return float(lo), float(hi)


# -- host / donor decomposition --------------------------------------------


@dataclass(frozen=True)
class Decomposition:
    host_spread: float
    donor_spread: float
    ratio: float
    infinite: bool
    host_marginals: dict
    donor_marginals: dict


def host_donor_decomposition(grid: Mapping[Tuple[str, str], float]) -> Decomposition:
    """Spreads (max - min) of host- and donor-marginal mean accuracies."""
    hosts: Dict[str, List[float]] = defaultdict(list)
    donors: Dict[str, List[float]] = defaultdict(list)
    for (h, d), acc in grid.items():
        hosts[h].append(float(acc))
        donors[d].append(float(acc))
    if len(hosts) < 2 or len(donors) < 2:
        raise StatsError("need at least 2 hosts and 2 donors")
    hm = {h: float(np.mean(v)) for h, v in sorted(hosts.items())}
    dm = {d: float(np.mean(v)) for d, v in sorted(donors.items())}
    hs = max(hm.values()) - min(hm.values())
    ds = max(dm.values()) - min(dm.values())
    if ds == 0:
        return Decomposition(hs, ds, math.inf, True, hm, dm)
    return Decomposition(hs, ds, hs / ds, False, hm, dm)


def cross_grid(records: Iterable[PredictionRecord], model: str, task: str, condition: str = "plain") -> dict:
    """Accuracy (%) per (host_dataset, donor_dataset) over M13 records."""
    counts: Dict[tuple, List[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        if r.mode == "M13" and r.model == model and r.task == task and r.condition == condition:
            c = counts[(r.host_dataset, r.donor_dataset)]
            c[0] += 1
            c[1] += r.correct
    return {k: 100.0 * ok / n for k, (n, ok) in sorted(counts.items())}


# -- degeneracy ------------------------------------------------------------


@dataclass(frozen=True)
class Degeneracy:
    flagged: bool
    positive_rate: float
    dominant: str
    dominant_rate: float


def degenerate_detector(records: Iterable[PredictionRecord]) -> Degeneracy:
    """Flag presence logs where one predicted class exceeds 99.9% of cases."""
    preds = []
    for r in records:
        if r.task != "presence":
            raise StatsError("degeneracy detection applies to the presence task")
        preds.append(r.pred)
    if not preds:
        raise StatsError("no records")
    return degenerate_from_predictions(preds)


def degenerate_from_predictions(preds: Sequence[str]) -> Degeneracy:
    n = len(preds)
    pos = sum(p == "present" for p in preds) / n
    dominant, rate = ("present", pos) if pos >= 0.5 else ("absent", 1.0 - pos)
    return Degeneracy(rate > DEGENERATE_RATE, pos, dominant, rate)


# -- report tables ---------------------------------------------------------


def evaluate(records: Sequence[PredictionRecord]) -> dict:
    """Cells, lifts, plain-to-best McNemar tests (Bonferroni over all tests) and degeneracy flags."""
    cells = accuracy_cells(records)
    lift_map = lifts(cells)
    tests = {}
    m = max(1, len(lift_map))
    for (model, task, domain), lf in lift_map.items():
        pairs = paired_outcomes(records, model, task, domain, "plain", lf.best)
        tests[(model, task, domain)] = mcnemar(pairs, m)
    degenerate = {}
    by_model: Dict[tuple, List[str]] = defaultdict(list)
    for r in records:
        if r.task == "presence":
            by_model[(r.model, r.domain)].append(r.pred)
    for k, preds in sorted(by_model.items()):
        degenerate[k] = degenerate_from_predictions(preds)
    return {"cells": cells, "lifts": lift_map, "tests": tests, "degenerate": degenerate}


def write_cells(cells: Sequence[EvalCell], path, grouping: Sequence[str] = CELL_KEY) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(grouping) + ["n", "correct", "accuracy"])
        for c in cells:
            w.writerow(list(c.key) + [c.n, c.correct, repr(round(c.accuracy, 6))])


def write_lifts(lift_map: Mapping[tuple, Lift], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "task", "domain", "plain", "best_condition", "best", "delta"])
        for (model, task, domain), lf in lift_map.items():
            w.writerow([model, task, domain, repr(round(lf.plain, 6)), lf.best,
                        repr(round(lf.best_value, 6)), repr(round(lf.delta, 6))])


def write_tests(tests: Mapping[tuple, McNemar], path) -> None:
    cols = [f.name for f in fields(McNemar)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "task", "domain"] + cols)
        for key, t in tests.items():
            w.writerow(list(key) + [getattr(t, c) if not isinstance(getattr(t, c), float)
                                    else repr(round(getattr(t, c), 12)) for c in cols])


__all__ = [
    "PredictionRecord", "EvalCell", "Lift", "McNemar", "Decomposition", "Degeneracy", "accuracy_cells",
    "guidance_lift", "lifts", "spearman", "average_ranks", "mcnemar", "mcnemar_counts", "bonferroni",
    "paired_outcomes", "bootstrap_ci", "host_donor_decomposition", "cross_grid", "degenerate_detector",
    "degenerate_from_predictions", "evaluate", "read_predictions", "write_predictions", "write_cells",
    "write_lifts", "write_tests",
]
