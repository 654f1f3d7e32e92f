import contextlib
import csv
import io
import json
from pathlib import Path

import pytest

from trialforge import evalstats as es
from trialforge.cli import main


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def summary(text):
    return dict(line.split(",", 1) for line in text.strip().splitlines() if "," in line)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert run("phantom", "--workspace", root, "--n", 10, "--seed", 0)[0] == 0
    assert run("profile", "--workspace", root)[0] == 0
    return root


def test_build_twice_same_digest(ws, tmp_path):
    digests = []
    for name in ("a.csv", "b.csv"):
        code, out, _ = run("build", "--workspace", ws, "--mode", "M1", "--n", 100, "--seed", 0,
                           "--out", tmp_path / name)
        assert code == 0
        digests.append(summary(out)["digest"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_verify_pass_and_fail(ws, tmp_path):
    m = tmp_path / "M1.csv"
    assert run("build", "--workspace", ws, "--mode", "M1", "--n", 100, "--seed", 0, "--out", m)[0] == 0
    code, out, _ = run("verify", "--workspace", ws, "--manifest", m)
    assert code == 0 and "verify: PASS" in out

    lines = m.read_text().splitlines(keepends=True)
    edited = tmp_path / "edited.csv"
    cols = lines[1].split(",")
    cols[7] = "absent" if cols[7] != "absent" else "present"
    edited.write_text(lines[0] + ",".join(cols) + "".join(lines[2:]))
    edited.with_name("edited.csv.build.json").write_text(Path(str(m) + ".build.json").read_text())
    code, out, _ = run("verify", "--workspace", ws, "--manifest", edited)
    assert code == 1 and "verify: FAIL" in out and "rebuilt" in out

    record = json.loads(Path(str(m) + ".build.json").read_text())
    record["seed"] = 1
    record["config"]["sigma"] = 1
    other = tmp_path / "seed1.json"
    other.write_text(json.dumps(record))
    code, out, _ = run("verify", "--workspace", ws, "--manifest", m, "--spec", other)
    assert code == 1 and "mismatch" in out


def test_verify_with_trial_spec(ws, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n": 30, "pi": 0.1, "sigma": 5}))
    m = tmp_path / "s.csv"
    assert run("build", "--workspace", ws, "--spec", spec, "--out", m)[0] == 0
    assert run("verify", "--workspace", ws, "--manifest", m, "--spec", spec)[0] == 0
    spec.write_text(json.dumps({"n": 30, "pi": 0.1, "sigma": 6}))
    assert run("verify", "--workspace", ws, "--manifest", m, "--spec", spec)[0] == 1


def test_m12_insert_reports_groups(ws, tmp_path):
    assert run("build", "--workspace", ws, "--mode", "M12")[0] == 0
    code, out, _ = run("insert", "--workspace", ws, "--mode", "M12", "--out", tmp_path / "ins")
    assert code == 0
    assert int(summary(out)["composed_groups"]) >= 1
    report = json.loads((tmp_path / "ins" / "report.json").read_text())
    assert report["mode"] == "M12"
    assert all(r["overlap_permitted"] for r in report["reports"])
    assert sum(r["composed_groups"] for r in report["reports"]) >= 1
    with open(tmp_path / "ins" / "composed.csv") as fh:
        assert any(";" in e["rows"] for e in csv.DictReader(fh))


def test_exit_codes(ws, tmp_path):
    assert run("nosuch")[0] == 2
    assert run("build", "--workspace", ws)[0] == 2  # neither --mode nor --spec
    code, _, err = run("insert", "--workspace", tmp_path / "empty", "--mode", "M1")
    assert code == 1 and err.startswith("error: kind=")
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"version": 99}))
    assert run("build", "--workspace", ws, "--mode", "M1", "--config", bad)[0] == 2


def test_config_file_threads_seed(ws, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"version": 1, "seed": 4, "mode_config": {"n": 50}}))
    _, a, _ = run("build", "--workspace", ws, "--mode", "M1", "--config", cfg, "--out", tmp_path / "a.csv")
    _, b, _ = run("build", "--workspace", ws, "--mode", "M1", "--n", 50, "--seed", 4, "--out", tmp_path / "b.csv")
    assert summary(a)["digest"] == summary(b)["digest"]


def test_workspace_env(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("TRIALFORGE_WORKSPACE", str(ws))
    code, out, _ = run("build", "--mode", "M1", "--n", 20, "--out", tmp_path / "m.csv", "--format", "json")
    assert code == 0 and json.loads(out)["rows"] == 20


def test_pipeline_idempotent(ws, tmp_path):
    """insert, render and metrics rewrite byte-identical outputs on a second run."""
    assert run("build", "--workspace", ws, "--mode", "M1", "--n", 6, "--seed", 2)[0] == 0
    snapshots = []
    for _ in range(2):
        assert run("insert", "--workspace", ws, "--mode", "M1", "--jobs", 2)[0] == 0
        assert run("render", "--workspace", ws, "--mode", "M1")[0] == 0
        assert run("metrics", "--workspace", ws, "--mode", "M1", "--histogram-features")[0] == 0
        files = sorted(p for d in ("insert", "render", "metrics") for p in (ws / d).rglob("*") if p.is_file())
        snapshots.append({p.relative_to(ws): p.read_bytes() for p in files})
    assert snapshots[0] == snapshots[1]
    assert any(k.suffix == ".pgm" for k in snapshots[0])


def test_evalstats_command(tmp_path):
    rows = []
    for i in range(40):
        for dom in ("real", "synthetic"):
            for cond in ("plain", "bbox"):
                truth = "present" if i % 2 else "absent"
                pred = truth if (i % 5 or cond == "bbox") else ("absent" if truth == "present" else "present")
                rows.append(es.PredictionRecord("m", "presence", cond, dom, "M13", f"s{i}",
                                                f"H{i % 2}", f"D{i % 4 // 2}", pred, truth))
    log = tmp_path / "log.csv"
    es.write_predictions(rows, log)
    code, out, _ = run("evalstats", "--log", log, "--out", tmp_path / "ev", "--cross", "m", "presence")
    assert code == 0
    s = summary(out)
    assert s["cells"] == "4" and s["lifts"] == "2"
    for name in ("cells.csv", "lifts.csv", "tests.csv", "degenerate.csv", "decomposition.json"):
        assert (tmp_path / "ev" / name).exists()
