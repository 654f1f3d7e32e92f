import csv
import math
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trialforge import evalstats as es
from trialforge.errors import StatsError

FIXTURES = Path(__file__).parent / "fixtures"


def gap_rows():
    with open(FIXTURES / "table_gap.csv") as fh:
        return list(csv.DictReader(fh))


def lift_rows():
    with open(FIXTURES / "guidance_lifts.csv") as fh:
        return list(csv.DictReader(fh))


def synth_log(rows, n=1000):
    """Prediction records whose per-cell accuracy equals the tabulated percentage."""
    out = []
    for r in rows:
        classes = es.TASK_CLASSES[r["task"]]
        for domain in ("real", "synthetic"):
            k = round(float(r[domain]) * n / 100.0)
            for i in range(n):
                truth = classes[i % len(classes)]
                pred = truth if i < k else classes[(classes.index(truth) + 1) % len(classes)]
                out.append(es.PredictionRecord(r["model"], r["task"], r["condition"], domain, "M1",
                                               f"s{i}", "DLCS24", "DLCS24", pred, truth))
    return out


def rec(pred, truth="present", task="presence", cond="plain", sid="0", model="m", domain="real"):
    return es.PredictionRecord(model, task, cond, domain, "M1", sid, "A", "B", pred, truth)


# -- cells -----------------------------------------------------------------


def test_all_correct_cell():
    (c,) = es.accuracy_cells([rec("present", sid=str(i)) for i in range(7)])
    assert c.accuracy == 1.0 and c.n == 7


@pytest.fixture(scope="module")
def log():
    return synth_log(gap_rows())


def test_cells_reproduce_gap_table(log):
    cells = {c.key: c.accuracy for c in es.accuracy_cells(log)}
    assert len(cells) == 72
    for r in gap_rows():
        for domain in ("real", "synthetic"):
            assert round(100 * cells[(r["model"], r["task"], r["condition"], domain)], 1) == float(r[domain])


def test_cells_order_independent_and_additive(log):
    shuffled = list(log)
    random.Random(0).shuffle(shuffled)
    assert es.accuracy_cells(shuffled) == es.accuracy_cells(log)
    half = len(log) // 2
    a = {c.key: c for c in es.accuracy_cells(log[:half])}
    b = {c.key: c for c in es.accuracy_cells(log[half:])}
    for c in es.accuracy_cells(log):
        parts = [x for x in (a.get(c.key), b.get(c.key)) if x]
        assert c.n == sum(p.n for p in parts) and c.correct == sum(p.correct for p in parts)


def test_bad_records():
    with pytest.raises(StatsError):
        rec("maybe")
    with pytest.raises(StatsError):
        rec("present", cond="arrow")
    with pytest.raises(StatsError):
        es.accuracy_cells([])


def test_prediction_log_round_trip(tmp_path):
    rs = [rec("present", sid="1"), rec("absent", sid="2")]
    es.write_predictions(rs, tmp_path / "p.csv")
    assert es.read_predictions(tmp_path / "p.csv") == rs
    (tmp_path / "bad.csv").write_text("model,task\nm,presence\n")
    with pytest.raises(StatsError):
        es.read_predictions(tmp_path / "bad.csv")


# -- guidance lift ---------------------------------------------------------

CONSISTENT_LIFTS = [r for r in lift_rows()
                    if not (r["domain"] == "synthetic" and r["model"] == "LLaVA-Med" and r["task"] == "presence")]


def lift_from_gap(domain, model, task):
    return es.guidance_lift({r["condition"]: float(r[domain]) for r in gap_rows()
                             if r["model"] == model and r["task"] == task})


@pytest.mark.parametrize("row", CONSISTENT_LIFTS, ids=lambda r: f"{r['domain']}-{r['model']}-{r['task']}")
def test_lift_matches_table(row):
    lf = lift_from_gap(row["domain"], row["model"], row["task"])
    assert lf.best == row["best_condition"]
    assert (lf.plain, lf.best_value) == (float(row["plain"]), float(row["best"]))
    assert round(lf.delta, 1) == float(row["delta"])


def test_lift_best_and_plain_columns_for_degenerate_row():
    # the printed delta of this row (0.0) is not its best-minus-plain (0.1); see the acceptance suite
    lf = lift_from_gap("synthetic", "LLaVA-Med", "presence")
    assert (lf.best, lf.plain, lf.best_value) == ("bbox", 99.9, 100.0)


def test_lift_examples():
    lf = es.guidance_lift({"plain": 22.2, "bbox": 92.1, "contour": 91.9, "bbox_contour": 94.8})
    assert lf.best == "bbox_contour" and round(lf.delta, 1) == 72.6
    tie = es.guidance_lift({c: 40.0 for c in es.CONDITIONS})
    assert (tie.best, tie.delta) == ("bbox", 0.0)
    neg = es.guidance_lift({"plain": 22.1, "bbox": 11.4, "contour": 8.0, "bbox_contour": 7.8})
    assert neg.best == "bbox" and round(neg.delta, 1) == -10.7
    with pytest.raises(StatsError):
        es.guidance_lift({"plain": 1.0})
    with pytest.raises(StatsError):
        es.guidance_lift({"bbox": 1.0})


def test_lifts_from_cells(log):
    lm = es.lifts(es.accuracy_cells(log))
    assert len(lm) == 18
    assert lm[("MedGemma", "presence", "real")].best == "bbox_contour"


# -- Spearman --------------------------------------------------------------


def test_spearman_trivial():
    assert es.spearman([1, 2, 3, 4], [1, 2, 3, 4])[0] == 1.0
    assert es.spearman([1, 2, 3, 4], [4, 3, 2, 1])[0] == -1.0
    with pytest.raises(StatsError):
        es.spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatsError):
        es.spearman([1, 2], [1, 2])


def test_spearman_gap_table_matches_scipy():
    rows = gap_rows()
    x = [float(r["synthetic"]) for r in rows]
    y = [float(r["real"]) for r in rows]
    rho, p = es.spearman(x, y)
    ref = stats.spearmanr(x, y)
    assert rho == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)
    assert p < 1e-15


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=3, max_size=40))
@settings(max_examples=100, deadline=None)
def test_spearman_vs_scipy_and_monotone(pairs):
    x = [float(a) for a, _ in pairs]
    y = [float(b) for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    rho, _ = es.spearman(x, y)
    assert rho == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-9)
    rho2, _ = es.spearman([math.exp(v / 10) for v in x], [v ** 3 for v in y])
    assert rho2 == pytest.approx(rho, abs=1e-12)


# -- McNemar ---------------------------------------------------------------


def test_mcnemar_examples():
    t = es.mcnemar_counts(5, 5)
    assert t.statistic == 0.0 and t.p == 1.0 and t.exact
    t = es.mcnemar_counts(10, 0)
    assert t.p == pytest.approx(2 * 0.5 ** 10, abs=1e-15)
    assert round(t.p, 5) == 0.00195
    assert es.bonferroni(0.01, 9) == pytest.approx(0.09)
    assert es.bonferroni(0.2, 9) == 1.0
    assert es.mcnemar_counts(0, 0).p == 1.0


def test_mcnemar_exact_matches_binomial_oracle():
    for n in range(1, 26):
        for b in range(n + 1):
            t = es.mcnemar_counts(b, n - b)
            tail = sum(math.comb(n, k) for k in range(min(b, n - b) + 1)) / 2 ** n
            assert t.p == pytest.approx(min(1.0, 2 * tail), abs=1e-12)


def test_mcnemar_asymptotic_switch():
    t = es.mcnemar_counts(20, 6)
    assert not t.exact
    assert t.statistic == (14 - 1) ** 2 / 26
    assert t.p == pytest.approx(stats.chi2.sf(t.statistic, 1))


def test_mcnemar_from_pairs():
    pairs = [(True, False)] * 3 + [(False, True)] * 7 + [(True, True)] * 20
    t = es.mcnemar(pairs, m=9)
    assert (t.b, t.c) == (3, 7)
    assert t.p_corrected == min(1.0, 9 * t.p)


def test_paired_outcomes_match_by_sample():
    rs = [rec("present", sid="1", cond="plain"), rec("absent", sid="1", cond="bbox"),
          rec("present", sid="2", cond="plain")]
    assert es.paired_outcomes(rs, "m", "presence", "real", "plain", "bbox") == [(True, False)]


# -- bootstrap -------------------------------------------------------------


def test_bootstrap_examples():
    assert es.bootstrap_ci(range(1, 21)) == pytest.approx((1.475, 19.525), abs=1e-12)
    assert es.bootstrap_ci([3.0] * 10) == (3.0, 3.0)
    with pytest.raises(StatsError):
        es.bootstrap_ci([1.0])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=50), st.floats(0.5, 0.99))
@settings(max_examples=100, deadline=None)
def test_bootstrap_properties(xs, level):
    lo, hi = es.bootstrap_ci(xs, level)
    assert lo <= float(np.median(xs)) + 1e-9 and float(np.median(xs)) <= hi + 1e-9
    assert es.bootstrap_ci(list(reversed(xs)), level) == (lo, hi)


# -- host / donor ----------------------------------------------------------


def fixture_grid():
    hosts = {"H1": 10.0, "H2": 39.3, "H3": 15.65}
    donors = {"D1": 20.0, "D2": 23.3}
    return {(h, d): hv + dv - 21.65 for h, hv in hosts.items() for d, dv in donors.items()}


def test_decomposition_fixture():
    dec = es.host_donor_decomposition(fixture_grid())
    assert dec.host_spread == pytest.approx(29.3)
    assert dec.donor_spread == pytest.approx(3.3)
    assert abs(dec.ratio - 8.9) <= 0.1


def test_decomposition_row_only_and_transpose():
    grid = {(h, d): 10.0 * i for i, h in enumerate(("A", "B")) for d in ("X", "Y")}
    dec = es.host_donor_decomposition(grid)
    assert dec.infinite and dec.donor_spread == 0.0 and math.isinf(dec.ratio)
    g = fixture_grid()
    t = es.host_donor_decomposition({(d, h): v for (h, d), v in g.items()})
    dec = es.host_donor_decomposition(g)
    assert (t.host_spread, t.donor_spread) == pytest.approx((dec.donor_spread, dec.host_spread))
    with pytest.raises(StatsError):
        es.host_donor_decomposition({("A", "X"): 1.0, ("A", "Y"): 2.0})


def test_cross_grid_from_records():
    rs = [es.PredictionRecord("m", "presence", "plain", "synthetic", "M13", str(i), h, d,
                              "present" if i % 2 or h == "A" else "absent", "present")
          for i, (h, d) in enumerate([("A", "X"), ("A", "X"), ("B", "X"), ("B", "X")])]
    g = es.cross_grid(rs, "m", "presence")
    assert g == {("A", "X"): 100.0, ("B", "X"): 50.0}


# -- degeneracy ------------------------------------------------------------


def test_degeneracy():
    assert es.degenerate_from_predictions(["present"] * 100) == es.Degeneracy(True, 1.0, "present", 1.0)
    assert not es.degenerate_from_predictions(["present", "absent"] * 50).flagged
    d = es.degenerate_from_predictions(["present"] * 19990 + ["absent"] * 10)
    assert d.flagged and d.positive_rate == 0.9995
    assert not es.degenerate_from_predictions(["present"] * 998 + ["absent"] * 2).flagged
    with pytest.raises(StatsError):
        es.degenerate_detector([rec("RUL", truth="RUL", task="lobe")])


def test_evaluate_and_tables(tmp_path, log):
    out = es.evaluate(log)
    assert len(out["lifts"]) == 18 and len(out["tests"]) == 18
    assert not out["degenerate"][("MedGemma", "real")].flagged
    always = [rec("present", truth=("absent", "present")[i % 2], sid=str(i), model="LLaVA-Med")
              for i in range(2000)]
    assert es.evaluate(always)["degenerate"][("LLaVA-Med", "real")].flagged
    es.write_cells(out["cells"], tmp_path / "c.csv")
    es.write_lifts(out["lifts"], tmp_path / "l.csv")
    es.write_tests(out["tests"], tmp_path / "t.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 73
