"""Reproducible experiment runner.

Wires the simulator, the fitter, calibration scoring, and gait metrics into
a single staged pipeline that leaves a directory of hashed artifacts behind.
Stages are config -> fit -> analysis; a failure in any stage writes a FAILED
marker naming the stage and keeps whatever artifacts already exist.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (NOMINAL_LEVELS, CalibrationReport, PitSet,
                          coverage_at_nominal, ece_from_pit, kinematic_pit)
from .cameras import save_observations
from .gait import (metric_posterior, save_metrics_csv, save_strata_json,
                   stratify_by_uncertainty)
from .inference import FitConfig, FitFailure, LossWeights, fit
from .kinematics import chain_to_dict
from .synth import (MONITORED_JOINTS, JOINT_NAMES, GaitScenario, ScenarioError,
                    fixture_names, generate_trajectory, load_fixture,
                    render_observations)
from .trajectory import evaluate
from . import svgplots

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3
EXIT_ANALYSIS = 4


class SpecError(ValueError):
    """The experiment spec itself is unusable (missing file, bad field)."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to rerun an experiment bit-for-bit."""

    scenario: str  # bundled fixture name or path to a scenario JSON
    out_dir: str
    seed: int | None = None  # overrides the scenario's seed when set
    weights: dict = field(default_factory=dict)
    fit: dict = field(default_factory=lambda: {"basis_spacing": 0.1})
    draws: int = 1000  # posterior draws per stance event
    stride_mode: str = "lengthwise"
    n_bins: int = 5
    levels: tuple = tuple(NOMINAL_LEVELS)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["levels"] = [float(v) for v in self.levels]
        doc["schema_version"] = SCHEMA_VERSION
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(ExperimentSpec)}
        doc = {k: v for k, v in doc.items() if k in known}
        missing = {"scenario", "out_dir"} - doc.keys()
        if missing:
            raise SpecError(f"spec is missing required fields: {sorted(missing)}")
        if "levels" in doc:
            doc["levels"] = tuple(float(v) for v in doc["levels"])
        try:
            return ExperimentSpec(**doc)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc

    @staticmethod
    def from_file(path) -> "ExperimentSpec":
        p = Path(path)
        if not p.exists():
            raise SpecError(f"spec file not found: {p}")
        try:
            return ExperimentSpec.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec file is not valid JSON: {exc}") from exc

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def resolve_scenario(self) -> GaitScenario:
        if self.scenario in fixture_names():
            scn = load_fixture(self.scenario)
        else:
            p = Path(self.scenario)
            if not p.exists():
                raise SpecError(
                    f"scenario {self.scenario!r} is neither a bundled fixture "
                    f"{sorted(fixture_names())} nor an existing file"
                )
            try:
                scn = GaitScenario.from_dict(json.loads(p.read_text()))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise SpecError(f"bad scenario file {p}: {exc}") from exc
        if self.seed is not None:
            scn = GaitScenario.from_dict({**scn.to_dict(), "seed": int(self.seed)})
        return scn

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(**self.weights)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad loss weights: {exc}") from exc

    def fit_config(self) -> FitConfig:
        try:
            return FitConfig(**self.fit)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad fit config: {exc}") from exc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, doc: dict, seed: int, spec_hash: str) -> None:
    doc = {**doc, "schema_version": SCHEMA_VERSION, "seed": seed, "spec_hash": spec_hash}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, default=float)
        fh.write("\n")


def _stamp_csv(path: Path, seed: int, spec_hash: str) -> None:
    # provenance comment line; readers in this package skip '#' lines
    body = path.read_text()
    path.write_text(f"# schema_version={SCHEMA_VERSION} seed={seed} spec_hash={spec_hash}\n" + body)


def _fail(out: Path, stage: str, exc: BaseException) -> None:
    msg = f"stage={stage}\n{type(exc).__name__}: {exc}\n"
    try:
        (out / "FAILED").write_text(msg + traceback.format_exc())
    except OSError:
        pass


def run_experiment(spec: ExperimentSpec | str | Path) -> tuple[int, dict]:
    """Run the full pipeline for one spec.

    Returns (exit_code, manifest). Exit codes: 0 ok, 2 config error,
    3 fit failure, 4 analysis failure. Artifacts written so far stay on disk
    alongside a FAILED marker when a stage dies.
    """
    # -- config stage ------------------------------------------------------
    try:
        if not isinstance(spec, ExperimentSpec):
            spec = ExperimentSpec.from_file(spec)
        scenario = spec.resolve_scenario()
        weights = spec.loss_weights()
        fit_cfg = spec.fit_config()
        if spec.draws < 2:
            raise SpecError("draws must be >= 2")
        if spec.stride_mode not in ("lengthwise", "euclidean"):
            raise SpecError(f"unknown stride mode {spec.stride_mode!r}")
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
    except (SpecError, ScenarioError, OSError) as exc:
        return EXIT_CONFIG, {"error": f"config: {exc}"}

    seed = scenario.seed
    sh = spec.spec_hash()
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()

    # -- fit stage ----------------------------------------------------------
    try:
        _write_json(out / "spec.json", spec.to_dict(), seed, sh)
        _write_json(out / "scenario.json", scenario.to_dict(), seed, sh)
        bundle = generate_trajectory(scenario)
        obs, rig = render_observations(bundle)
        bundle.save(out / "truth.json")
        save_observations(obs, out / "observations.jsonl")
        _write_json(out / "chain.json", chain_to_dict(bundle.chain), seed, sh)
        traj, offsets, noise, report = fit(
            obs, bundle.chain, rig, weights=weights, config=fit_cfg, seed=seed
        )
        _write_json(out / "trajectory.json", traj.to_dict(), seed, sh)
        _write_json(out / "offsets.json",
                    {"values": offsets.values.tolist()}, seed, sh)
        _write_json(out / "noise.json",
                    {"a": noise.a, "b": noise.b, "c": noise.c}, seed, sh)
        rep = report.to_dict()
        rep["trace"] = rep["trace"][:: max(1, len(rep["trace"]) // 240)]
        _write_json(out / "fit_report.json", rep, seed, sh)
    except (FitFailure, ScenarioError, ValueError, RuntimeError) as exc:
        _fail(out, "fit", exc)
        return EXIT_FIT, {"error": f"fit: {exc}"}

    # -- analysis stage -----------------------------------------------------
    try:
        manifest_files = _analyze(spec, scenario, bundle, traj, offsets, report, out, sh)
    except Exception as exc:  # any analysis failure gets tagged, not swallowed
        _fail(out, "analysis", exc)
        return EXIT_ANALYSIS, {"error": f"analysis: {exc}"}

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "spec_hash": sh,
        "status": "ok",
        "files": manifest_files,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return EXIT_OK, manifest


def _analyze(spec, scenario, bundle, traj, offsets, report, out: Path, sh: str) -> dict:
    seed = scenario.seed
    names = list(JOINT_NAMES)
    moments = [evaluate(traj, float(t)) for t in bundle.times]
    mean = np.stack([m.mean for m in moments])
    sig = np.stack([m.sigma for m in moments])

    # external kinematic calibration per monitored joint, plus pooled
    curve_csvs: dict[str, Path] = {}
    kin_summary = {}
    pooled_err, pooled_sig = [], []
    for jn in MONITORED_JOINTS:
        j = 6 + names.index(jn)
        err = np.abs(mean[:, j] - bundle.q[:, j])
        pit = kinematic_pit(err, sig[:, j], label=jn)
        rep = CalibrationReport.from_pit(
            pit, coverage_at_nominal(err, sig[:, j], spec.levels))
        _write_json(out / f"calibration_{jn}.json", rep.to_dict(), seed, sh)
        curve = out / f"curve_{jn}.csv"
        rep.save_curve_csv(curve)
        _stamp_csv(curve, seed, sh)
        curve_csvs[jn] = curve
        kin_summary[jn] = {"ece": rep.ece, "sigma_median_rad": float(np.median(sig[:, j]))}
        pooled_err.append(err)
        pooled_sig.append(sig[:, j])

    err_all = np.concatenate(pooled_err)
    sig_all = np.concatenate(pooled_sig)
    pooled = CalibrationReport.from_pit(
        kinematic_pit(err_all, sig_all, label="kinematic_pooled"),
        coverage_at_nominal(err_all, sig_all, spec.levels))
    _write_json(out / "calibration_kinematic_pooled.json", pooled.to_dict(), seed, sh)
    pooled_curve = out / "curve_kinematic_pooled.csv"
    pooled.save_curve_csv(pooled_curve)
    _stamp_csv(pooled_curve, seed, sh)

    with open(out / "coverage.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "empirical"])
        for lv in spec.levels:
            w.writerow([f"{lv:.10g}", f"{pooled.coverage[lv]:.10g}"])
    _stamp_csv(out / "coverage.csv", seed, sh)

    # spatial gait metrics from the posterior
    samples, diag = metric_posterior(
        traj, bundle.chain, offsets, bundle.stances,
        reference_heels=bundle.stance_ref_heels,
        draws=spec.draws, seed=seed, walkway=bundle.walkway,
        stride_mode=spec.stride_mode,
    )
    save_metrics_csv(samples, out / "metrics.csv")
    _stamp_csv(out / "metrics.csv", seed, sh)

    spatial_summary = {"n_events": len(samples), "skipped": diag["skipped_events"]}
    if samples:
        sp_pit = PitSet(values=np.array([s.pit for s in samples]), label="spatial")
        sp_rep = CalibrationReport.from_pit(sp_pit)
        _write_json(out / "calibration_spatial.json", sp_rep.to_dict(), seed, sh)
        sp_curve = out / "curve_spatial.csv"
        sp_rep.save_curve_csv(sp_curve)
        _stamp_csv(sp_curve, seed, sh)
        spatial_summary["ece"] = sp_rep.ece

    strata = None
    if len([s for s in samples if np.isfinite(s.error)]) >= 10:
        strata = stratify_by_uncertainty(samples, n_bins=spec.n_bins, seed=seed)
        save_strata_json(strata, out / "strata.json", seed=seed, spec_hash=sh)
        with open(out / "strata_bins.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "n", "uncertainty_median", "mae", "mae_ci_low", "mae_ci_high"])
            for b in strata["bins"]:
                w.writerow([b["bin"], b["n"],
                            f"{b['uncertainty_median']:.10g}", f"{b['mae']:.10g}",
                            f"{b['mae_ci_low']:.10g}", f"{b['mae_ci_high']:.10g}"])
        _stamp_csv(out / "strata_bins.csv", seed, sh)

    _write_json(out / "summary.json", {
        "kinematic": kin_summary,
        "kinematic_pooled_ece": pooled.ece,
        "coverage": {f"{k:.2f}": v for k, v in pooled.coverage.items()},
        "spatial": spatial_summary,
        "internal_ece": report.internal_ece_trace[-1][1] if report.internal_ece_trace else None,
    }, seed, sh)

    # plots, strictly from the CSVs above
    svgplots.pp_curve_plot({jn: p for jn, p in curve_csvs.items()},
                           out / "pp_kinematic.svg", title="kinematic calibration")
    if samples:
        svgplots.pp_curve_plot({"steps+strides": out / "curve_spatial.csv"},
                               out / "pp_spatial.svg", title="spatial calibration")
    svgplots.coverage_bar_plot(out / "coverage.csv", out / "coverage.svg",
                               title="pooled kinematic coverage")
    if strata is not None:
        svgplots.binned_error_plot(out / "strata_bins.csv",
                                   out / "error_vs_uncertainty.svg")

    return {p.name: _sha256(p) for p in sorted(out.iterdir())
            if p.is_file() and p.name != "manifest.json"}


def sweep_lambda_ece(spec: ExperimentSpec, values) -> dict:
    """Refit one scenario under several calibration-term weights.

    Emits a comparative table of (lambda, internal ECE, external pooled
    kinematic ECE, median posterior sigma). Per-run failures land in the
    row instead of aborting the sweep.
    """
    values = [float(v) for v in values]
    if not values:
        raise SpecError("sweep needs at least one lambda value")
    scenario = spec.resolve_scenario()
    weights = spec.loss_weights()
    fit_cfg = spec.fit_config()
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = scenario.seed
    sh = spec.spec_hash()

    bundle = generate_trajectory(scenario)
    obs, rig = render_observations(bundle)
    names = list(JOINT_NAMES)
    j_idx = [6 + names.index(jn) for jn in MONITORED_JOINTS]

    rows = []
    for lam in values:
        w = dataclasses.replace(weights, ece_full=lam)
        row: dict = {"lambda_ece": lam}
        try:
            traj, offsets, noise, report = fit(
                obs, bundle.chain, rig, weights=w, config=fit_cfg, seed=seed)
            moments = [evaluate(traj, float(t)) for t in bundle.times]
            mean = np.stack([m.mean for m in moments])
            sig = np.stack([m.sigma for m in moments])
            err = np.abs(mean[:, j_idx] - bundle.q[:, j_idx]).ravel()
            scl = sig[:, j_idx].ravel()
            row["internal_ece"] = (report.internal_ece_trace[-1][1]
                                   if report.internal_ece_trace else float("nan"))
            row["external_kinematic_ece"] = ece_from_pit(kinematic_pit(err, scl))
            row["sigma_median_rad"] = float(np.median(scl))
        except (FitFailure, ValueError, RuntimeError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    table = {"rows": rows, "scenario": scenario.name}
    _write_json(out / "sweep_lambda_ece.json", table, seed, sh)
    cols = ["lambda_ece", "internal_ece", "external_kinematic_ece", "sigma_median_rad", "error"]
    with open(out / "sweep_lambda_ece.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row.get(c, "") for c in cols])
    _stamp_csv(out / "sweep_lambda_ece.csv", seed, sh)
    return table
