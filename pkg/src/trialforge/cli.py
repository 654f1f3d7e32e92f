"""Command-line entry point: one subcommand per pipeline stage.

Workspace layout (``--workspace`` or ``$TRIALFORGE_WORKSPACE``)::

    phantoms/            anatomy + nodule masks (ITSV) and cohort.json
    profiles.csv         nodule profiles
    hosts.csv            host table
    manifests/<M>.csv    manifest rows, .digest sidecar, .build.json record
    insert/<M>/          composed volumes, diagnostics.csv, report.json, composed.csv
    render/<M>/          HU volumes, host references, slices/
    metrics/<M>.csv      quality row
    eval/                evalstats outputs

Exit codes: 0 success, 1 domain failure, 2 usage error.  Failures print one
``error: kind=<kind> message=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from trialforge import evalstats, insertion, metrics, phantom, profiler, renderer, trialengine, voxgrid
from trialforge.errors import TrialForgeError

CONFIG_VERSION = 1
DEFAULT_WORKSPACE = "trialforge_ws"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    workspace: Path
    seed: int = 0
    template: str = "NLST"
    jobs: int = 1
    mode_config: dict = field(default_factory=dict)
    constraints: dict = field(default_factory=dict)
    fmt: str = "csv"

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        data = {}
        if getattr(args, "config", None):
            try:
                data = json.loads(Path(args.config).read_text())
            except json.JSONDecodeError as e:
                raise UsageError(f"config {args.config}: {e}") from None
            if data.get("version") != CONFIG_VERSION:
                raise UsageError(f"config version must be {CONFIG_VERSION}")
            unknown = set(data) - {"version", "seed", "template", "mode_config", "constraints", "workspace"}
            if unknown:
                raise UsageError(f"unknown config keys {sorted(unknown)}")
        ws = args.workspace or data.get("workspace") or os.environ.get("TRIALFORGE_WORKSPACE") or DEFAULT_WORKSPACE
        seed = args.seed if args.seed is not None else int(data.get("seed", 0))
        return cls(Path(ws), seed, data.get("template", "NLST"), max(1, args.jobs),
                   dict(data.get("mode_config", {})), dict(data.get("constraints", {})), args.format)

    def path(self, *parts) -> Path:
        return self.workspace.joinpath(*parts)


def _out(cfg: RunConfig, payload: dict) -> None:
    if cfg.fmt == "json":
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        for k in sorted(payload):
            print(f"{k},{payload[k]}")


def _need(path: Path) -> Path:
    if not path.exists():
        raise TrialForgeError(f"missing upstream artifact {path}")
    return path


# -- stages ----------------------------------------------------------------


def cmd_phantom(args, cfg: RunConfig) -> int:
    dims = tuple(int(v) for v in args.dims.split(","))
    config = phantom.CohortConfig(template=cfg.template, dims=dims, spacing=args.spacing,
                                  max_nodules=args.max_nodules)
    patients = phantom.phantom_cohort(cfg.seed, args.n, config, jobs=cfg.jobs)
    out = Path(args.out) if args.out else cfg.path("phantoms")
    phantom.save_cohort(patients, out)
    rows = phantom.truth_rows(patients)
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=phantom.TRUTH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _out(cfg, {"patients": len(patients), "nodules": len(rows), "out": out})
    return 0


def cmd_profile(args, cfg: RunConfig) -> int:
    src = Path(args.cohort) if args.cohort else cfg.path("phantoms")
    patients = phantom.load_cohort(_need(src))
    profiles = profiler.profile_cohort(patients)
    hosts = [profiler.host_record(p) for p in patients]
    out = Path(args.out) if args.out else cfg.workspace
    out.mkdir(parents=True, exist_ok=True)
    profiler.write_profiles(profiles, out / "profiles.csv")
    profiler.write_hosts(hosts, out / "hosts.csv")
    _out(cfg, {"profiles": len(profiles), "hosts": len(hosts), "out": out})
    return 0


def _inputs(args, cfg: RunConfig) -> tuple:
    pp = Path(args.profiles) if getattr(args, "profiles", None) else cfg.path("profiles.csv")
    hp = Path(args.hosts) if getattr(args, "hosts", None) else cfg.path("hosts.csv")
    return pp.resolve(), hp.resolve(), profiler.read_profiles(_need(pp)), profiler.read_hosts(_need(hp))


def _rebuild(record: dict, profiles, hosts, jobs: int = 1) -> List[trialengine.Manifest]:
    if record.get("spec") is not None:
        return [trialengine.build(trialengine.TrialSpec.from_json(record["spec"]), profiles, hosts)]
    return trialengine.build_mode(record["mode"], profiles, hosts, record["seed"], record["config"], jobs)


def cmd_build(args, cfg: RunConfig) -> int:
    pp, hp, profiles, hosts = _inputs(args, cfg)
    if args.spec:
        spec = trialengine.load_spec(args.spec)
        record = {"version": CONFIG_VERSION, "spec": spec.to_json(), "mode": spec.mode}
    else:
        if not args.mode:
            raise UsageError("build needs --mode or --spec")
        config = dict(cfg.mode_config)
        if args.n is not None:
            config["n"] = args.n
        if cfg.template != "NLST":
            config.setdefault("template", cfg.template)
        record = {"version": CONFIG_VERSION, "mode": args.mode, "seed": cfg.seed, "config": config,
                  "spec": None}
    record.update(profiles=str(pp), hosts=str(hp))
    manifests = _rebuild(record, profiles, hosts, cfg.jobs)
    out = Path(args.out) if args.out else cfg.path("manifests", f"{record['mode']}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    combined = trialengine.write_manifests(manifests, out)
    Path(str(out) + ".build.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    _out(cfg, {"mode": record["mode"], "subcohorts": len(manifests),
               "rows": sum(len(m) for m in manifests), "digest": combined, "out": out})
    return 0


def _file_manifests(path: Path, rebuilt: List[trialengine.Manifest]) -> Dict[str, trialengine.Manifest]:
    rows = trialengine.read_manifest_rows(path)
    by_sub: Dict[str, list] = {}
    for r in rows:
        by_sub.setdefault(r.subcohort, []).append(r)
    ref = {m.subcohort: m for m in rebuilt}
    out = {}
    for sub, rs in by_sub.items():
        m = ref.get(sub)
        out[sub] = trialengine.Manifest(rs[0].mode, sub, rs, m.spec if m else None, m.meta if m else {})
    return out


def cmd_verify(args, cfg: RunConfig) -> int:
    """Rebuild from the spec (or build record) and compare with the manifest file."""
    manifest = _need(Path(args.manifest))
    spec_path = Path(args.spec) if args.spec else Path(str(manifest) + ".build.json")
    data = json.loads(_need(spec_path).read_text())
    if "mode" in data and "version" in data and ("config" in data or "spec" in data):
        record = data
    else:
        record = {"spec": trialengine.load_spec(spec_path).to_json()}
    if args.profiles or args.hosts or "profiles" not in record:
        _, _, profiles, hosts = _inputs(args, cfg)
    else:
        profiles = profiler.read_profiles(_need(Path(record["profiles"])))
        hosts = profiler.read_hosts(_need(Path(record["hosts"])))
    rebuilt = _rebuild(record, profiles, hosts, cfg.jobs)
    found = _file_manifests(manifest, rebuilt)
    problems = []
    for m in rebuilt:
        f = found.pop(m.subcohort, None)
        got = f.digest if f is not None else "missing"
        if got != m.digest:
            problems.append(f"{m.subcohort}: file {got} rebuilt {m.digest}")
    for sub in sorted(found):
        problems.append(f"{sub}: file {found[sub].digest} rebuilt missing")
    sidecar = Path(str(manifest) + ".digest")
    if sidecar.exists():
        ok, extra = trialengine.verify(rebuilt, sidecar)
        problems.extend(f"sidecar {p}" for p in extra)
    if problems:
        for p in problems:
            print(f"mismatch: {p}")
        print("verify: FAIL")
        return 1
    print("verify: PASS")
    return 0


def _manifests_from_file(path: Path) -> List[trialengine.Manifest]:
    rows = trialengine.read_manifest_rows(path)
    by_sub: Dict[str, list] = {}
    for r in rows:
        by_sub.setdefault(r.subcohort, []).append(r)
    return [trialengine.Manifest(rs[0].mode, sub, rs) for sub, rs in by_sub.items()]


def _constraints(cfg: RunConfig) -> insertion.InsertionConstraints:
    try:
        return insertion.InsertionConstraints(**cfg.constraints)
    except TypeError as e:
        raise UsageError(f"bad constraints: {e}") from None


def cmd_insert(args, cfg: RunConfig) -> int:
    mpath = Path(args.manifest) if args.manifest else cfg.path("manifests", f"{args.mode}.csv")
    manifests = _manifests_from_file(_need(mpath))
    mode = manifests[0].mode if manifests else (args.mode or "M?")
    src = Path(args.cohort) if args.cohort else cfg.path("phantoms")
    patients = phantom.load_cohort(_need(src))
    profiles = profiler.read_profiles(_need(Path(args.profiles) if args.profiles else cfg.path("profiles.csv")))
    assets = insertion.CohortAssets(patients, profiles)
    out = Path(args.out) if args.out else cfg.path("insert", mode)
    out.mkdir(parents=True, exist_ok=True)
    constraints = _constraints(cfg)
    all_results, reports, index = [], [], []

    for m in manifests:
        def sink(group, volume, m=m):
            name = f"{m.subcohort}_g{group[0].row_index:05d}.itsv"
            voxgrid.write_volume(volume, out / name)
            index.append({"file": name, "subcohort": m.subcohort, "host_patient": group[0].host_patient,
                          "rows": ";".join(str(r.row_index) for r in group)})

        results, report = insertion.insert_batch(m, assets, constraints, cfg.seed, cfg.jobs, sink=sink)
        reports.append(report)
        hosts = {row.row_index: row.host_patient for row in m.rows}
        for r in results:
            all_results.append((m.subcohort, r, hosts[r.row_index]))

    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("subcohort",) + insertion.DIAGNOSTIC_COLUMNS + ("cx", "cy", "cz"),
                           lineterminator="\n")
        w.writeheader()
        for sub, r, host in all_results:
            c = (r.nodule_voxels.mean(axis=0) * assets.patients[host].spacing.as_array()
                 if r.nodule_voxels is not None else (float("nan"),) * 3)
            w.writerow({"subcohort": sub, **r.diagnostics(),
                        "cx": repr(round(float(c[0]), 6)), "cy": repr(round(float(c[1]), 6)),
                        "cz": repr(round(float(c[2]), 6))})
    with open(out / "composed.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("file", "subcohort", "host_patient", "rows"), lineterminator="\n")
        w.writeheader()
        w.writerows(index)
    payload = {"mode": mode, "reports": [json.loads(r.to_json()) for r in reports]}
    (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    n = sum(r.n_rows for r in reports)
    acc = sum(r.n_accepted for r in reports)
    _out(cfg, {"mode": mode, "rows": n, "accepted": acc, "success_rate": acc / n if n else 0.0,
               "composed_groups": sum(r.composed_groups for r in reports),
               "overlap_voxels": sum(r.overlap_voxels for r in reports), "out": out})
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    src = Path(args.inserted) if args.inserted else cfg.path("insert", args.mode)
    out = Path(args.out) if args.out else cfg.path("render", args.mode)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    cohort = {p.patient_id: p for p in phantom.load_cohort(_need(Path(args.cohort) if args.cohort
                                                                      else cfg.path("phantoms")))}
    params = renderer.RenderParams(seed=cfg.seed)
    with open(_need(src / "composed.csv"), newline="") as fh:
        index = list(csv.DictReader(fh))
    with open(_need(src / "diagnostics.csv"), newline="") as fh:
        diag = {(d["subcohort"], d["row_index"]): d for d in csv.DictReader(fh)}
    rendered, rejected, hosts_done = 0, 0, set()
    qc_rows = []
    for e in index:
        composed = voxgrid.read_volume(src / e["file"])
        qc = renderer.qc_check(composed)
        qc_rows.append({"file": e["file"], "accepted": qc.accepted, "reason": qc.reason})
        if not qc:
            rejected += 1
            continue
        hu = renderer.render(composed, params)
        voxgrid.write_volume(hu, out / e["file"])
        host = e["host_patient"]
        if host not in hosts_done:
            voxgrid.write_volume(renderer.render(cohort[host].anatomy, params), out / f"host_{host}.itsv")
            hosts_done.add(host)
        for ri in e["rows"].split(";"):
            d = diag[(e["subcohort"], ri)]
            if d["status"] != "accepted":
                continue
            pack = renderer.extract_slices(hu, (float(d["cx"]), float(d["cy"]), float(d["cz"])))
            renderer.write_slices(pack, out / "slices", f"{e['subcohort']}_{ri}")
        rendered += 1
    with open(out / "qc.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("file", "accepted", "reason"), lineterminator="\n")
        w.writeheader()
        w.writerows(qc_rows)
    _out(cfg, {"rendered": rendered, "qc_rejected": rejected, "out": out})
    return 0


def cmd_metrics(args, cfg: RunConfig) -> int:
    if args.r2r:
        cohorts = []
        for item in args.r2r:
            tag, _, path = item.partition("=")
            if not path:
                raise UsageError("--r2r expects TAG=PATH")
            cohorts.append((tag, metrics.read_features(_need(Path(path)))))
        table = metrics.r2r_baseline(cohorts, cfg.jobs)
        for a, b, f in table.pairs:
            print(f"{a},{b},{f!r}")
        _out(cfg, {"median": table.median, "q1": table.q1, "q3": table.q3, "pairs": len(table.pairs)})
        return 0
    if not args.mode:
        raise UsageError("metrics needs --mode or --r2r")
    rdir = Path(args.rendered) if args.rendered else cfg.path("render", args.mode)
    idir = Path(args.inserted) if args.inserted else cfg.path("insert", args.mode)
    with open(_need(idir / "composed.csv"), newline="") as fh:
        index = list(csv.DictReader(fh))
    triples = []
    for e in index:
        synth_path = rdir / e["file"]
        if not synth_path.exists():
            continue  # QC-rejected
        triples.append((voxgrid.read_volume(_need(rdir / f"host_{e['host_patient']}.itsv")),
                        voxgrid.read_volume(synth_path), voxgrid.read_volume(idir / e["file"])))
    if not triples:
        raise TrialForgeError("no rendered cases")
    fid = None
    if args.features_a and args.features_b:
        fid = metrics.fid_avg([metrics.read_features(_need(Path(p))) for p in args.features_a],
                              [metrics.read_features(_need(Path(p))) for p in args.features_b])
    elif args.histogram_features and len(triples) >= 2:
        fid = metrics.frechet_distance(metrics.histogram_features([t[0] for t in triples]),
                                       metrics.histogram_features([t[1] for t in triples]))
    row = metrics.quality_row(args.mode, triples, fid)
    out = Path(args.out) if args.out else cfg.path("metrics", f"{args.mode}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_quality([row], out)
    _out(cfg, {**row.as_dict(), "out": out})
    return 0


def cmd_evalstats(args, cfg: RunConfig) -> int:
    records = evalstats.read_predictions(_need(Path(args.log)))
    out = Path(args.out) if args.out else cfg.path("eval")
    out.mkdir(parents=True, exist_ok=True)
    res = evalstats.evaluate(records)
    evalstats.write_cells(res["cells"], out / "cells.csv")
    evalstats.write_lifts(res["lifts"], out / "lifts.csv")
    evalstats.write_tests(res["tests"], out / "tests.csv")
    with open(out / "degenerate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "domain", "flagged", "positive_rate"])
        for (model, domain), d in res["degenerate"].items():
            w.writerow([model, domain, str(d.flagged).lower(), repr(round(d.positive_rate, 6))])
    payload = {"cells": len(res["cells"]), "lifts": len(res["lifts"]), "out": out}
    real = {c.key[:3]: c.accuracy for c in res["cells"] if c.key[3] == "real"}
    syn = {c.key[:3]: c.accuracy for c in res["cells"] if c.key[3] == "synthetic"}
    common = sorted(real.keys() & syn.keys())
    if len(common) >= 3:
        try:
            rho, p = evalstats.spearman([real[k] for k in common], [syn[k] for k in common])
            payload.update(spearman_rho=rho, spearman_p=p, spearman_n=len(common))
        except TrialForgeError as e:
            payload["spearman_error"] = str(e)
    if args.cross:
        model, task = args.cross
        dec = evalstats.host_donor_decomposition(evalstats.cross_grid(records, model, task))
        payload.update(host_spread=dec.host_spread, donor_spread=dec.donor_spread,
                       ratio="inf" if dec.infinite else dec.ratio)
        (out / "decomposition.json").write_text(json.dumps(asdict(dec), indent=1, sort_keys=True, default=str))
    _out(cfg, payload)
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help="workspace directory (default $TRIALFORGE_WORKSPACE)")
    common.add_argument("--config", help="JSON run config with a version field")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for batch stages")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="summary format on stdout")
    common.add_argument("--out", help="output path")

    p = argparse.ArgumentParser(prog="trialforge", description="In-silico lesion trial pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom cohort")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--dims", default=",".join(map(str, phantom.DEFAULT_DIMS)))
    s.add_argument("--spacing", type=float, default=phantom.DEFAULT_SPACING)
    s.add_argument("--max-nodules", type=int, default=4)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("profile", parents=[common], help="profile nodules and hosts")
    s.add_argument("--cohort")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("build", parents=[common], help="build manifests for a mode or a spec")
    s.add_argument("--mode", choices=trialengine.MODES)
    s.add_argument("--spec")
    s.add_argument("--n", type=int)
    s.add_argument("--profiles")
    s.add_argument("--hosts")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("verify", parents=[common], help="rebuild and compare manifest digests")
    s.add_argument("--manifest", required=True)
    s.add_argument("--spec", help="trial spec JSON or build record (default <manifest>.build.json)")
    s.add_argument("--profiles")
    s.add_argument("--hosts")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("insert", parents=[common], help="insert manifest rows into host anatomy")
    s.add_argument("--mode", choices=trialengine.MODES)
    s.add_argument("--manifest")
    s.add_argument("--cohort")
    s.add_argument("--profiles")
    s.set_defaults(func=cmd_insert)

    s = sub.add_parser("render", parents=[common], help="render composed volumes to HU")
    s.add_argument("--mode", choices=trialengine.MODES, required=True)
    s.add_argument("--inserted")
    s.add_argument("--cohort")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("metrics", parents=[common], help="quality metrics or real-to-real baseline")
    s.add_argument("--mode", choices=trialengine.MODES)
    s.add_argument("--rendered")
    s.add_argument("--inserted")
    s.add_argument("--features-a", nargs="+")
    s.add_argument("--features-b", nargs="+")
    s.add_argument("--histogram-features", action="store_true",
                   help="use body HU histograms as stand-in features for FID")
    s.add_argument("--r2r", nargs="+", metavar="TAG=PATH")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("evalstats", parents=[common], help="statistics over a prediction log")
    s.add_argument("--log", required=True)
    s.add_argument("--cross", nargs=2, metavar=("MODEL", "TASK"))
    s.set_defaults(func=cmd_evalstats)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = RunConfig.from_args(args)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"error: kind=usage message={e}", file=sys.stderr)
        return 2
    except TrialForgeError as e:
        print(f"error: kind={e.kind} message={e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: kind=io message={type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
