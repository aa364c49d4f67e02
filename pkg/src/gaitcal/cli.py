"""Command-line entry point.

Subcommands: run (full pipeline), sweep (calibration-weight sweep),
simulate (emit synthetic data only), calibrate (re-run analysis on a
finished fit directory). Exit codes: 0 ok, 2 config error, 3 fit failure,
4 analysis failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (EXIT_ANALYSIS, EXIT_CONFIG, EXIT_OK, ExperimentSpec,
                          SpecError, run_experiment, sweep_lambda_ece)


def _build_spec(args) -> ExperimentSpec:
    if args.spec:
        spec = ExperimentSpec.from_file(args.spec)
        doc = spec.to_dict()
    elif args.scenario:
        doc = {"scenario": args.scenario, "out_dir": args.out or "gaitcal-out"}
    else:
        raise SpecError("need --spec or --scenario")
    if args.out:
        doc["out_dir"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    return ExperimentSpec.from_dict(doc)


def _cmd_run(args) -> int:
    spec = _build_spec(args)
    code, manifest = run_experiment(spec)
    if code != EXIT_OK:
        print(manifest.get("error", "failed"), file=sys.stderr)
    else:
        print(f"ok: {len(manifest['files'])} artifacts in {spec.out_dir}")
    return code


def _cmd_sweep(args) -> int:
    spec = _build_spec(args)
    values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    table = sweep_lambda_ece(spec, values)
    bad = [r for r in table["rows"] if "error" in r]
    for r in table["rows"]:
        if "error" in r:
            print(f"lambda={r['lambda_ece']}: {r['error']}", file=sys.stderr)
        else:
            print(f"lambda={r['lambda_ece']:g} internal={r['internal_ece']:.4f} "
                  f"external={r['external_kinematic_ece']:.4f} "
                  f"sigma_med={r['sigma_median_rad']:.5f}rad")
    return EXIT_OK if not bad else 3


def _cmd_simulate(args) -> int:
    from .cameras import save_observations
    from .kinematics import chain_to_dict
    from .synth import generate_trajectory, render_observations

    spec = _build_spec(args)
    scenario = spec.resolve_scenario()
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = generate_trajectory(scenario)
    obs, rig = render_observations(bundle)
    scenario.save(out / "scenario.json")
    bundle.save(out / "truth.json")
    save_observations(obs, out / "observations.jsonl")
    from .cameras import rig_to_dict
    doc = {"schema_version": 1, "seed": scenario.seed, "chain": chain_to_dict(bundle.chain),
           "rig": rig_to_dict(rig)}
    with open(out / "setup.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"ok: synthetic trial in {out}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    """Re-run the analysis stage against the artifacts of a finished run."""
    from . import experiments
    from .inference import FitReport
    from .kinematics import SiteOffsets
    from .synth import GaitScenario, generate_trajectory
    from .trajectory import VariationalTrajectory
    import numpy as np

    src = Path(args.fit_dir or args.out or ".")
    needed = ["scenario.json", "trajectory.json", "offsets.json"]
    missing = [n for n in needed if not (src / n).exists()]
    if missing:
        print(f"config: {src} is missing {missing}", file=sys.stderr)
        return EXIT_CONFIG
    spec_doc = {"scenario": str(src / "scenario.json"),
                "out_dir": str(Path(args.out) if args.out else src)}
    if args.spec:
        spec_doc.update({k: v for k, v in json.loads(Path(args.spec).read_text()).items()
                         if k not in ("scenario", "out_dir")})
    spec = ExperimentSpec.from_dict(spec_doc)
    scenario = GaitScenario.from_dict(json.loads((src / "scenario.json").read_text()))
    bundle = generate_trajectory(scenario)
    traj = VariationalTrajectory.load(src / "trajectory.json")
    offsets = SiteOffsets(np.asarray(json.loads((src / "offsets.json").read_text())["values"]))
    report = FitReport(final_loss=float("nan"), breakdown={}, trace=[],
                       internal_ece_trace=[], gradient_check_result=float("nan"),
                       wall_time=0.0, seed=scenario.seed)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        files = experiments._analyze(spec, scenario, bundle, traj, offsets, report,
                                     out, spec.spec_hash())
    except Exception as exc:
        print(f"analysis: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    print(f"ok: {len(files)} artifacts in {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gaitcal")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", _cmd_run), ("sweep", _cmd_sweep),
                     ("simulate", _cmd_simulate), ("calibrate", _cmd_calibrate)):
        p = sub.add_parser(name)
        p.add_argument("--spec", help="experiment spec JSON")
        p.add_argument("--scenario", help="bundled fixture name or scenario JSON path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
        if name == "sweep":
            p.add_argument("--values", default="0.0,0.25,0.5,0.75,1.0",
                           help="comma-separated lambda values")
        if name == "calibrate":
            p.add_argument("--fit-dir", help="directory with fitted artifacts")
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SpecError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
