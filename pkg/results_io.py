"""Run manifests and result CSVs.

Every CSV carries a schema_version column; readers reject files written under
another version. Rates are bits per slot (tau included), energies joules, CRBs
radians squared.
"""

import json
import os
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from isac_errors import StructuralError
from pipeline_log import PipelineLogger, ts_print
from scenario import ScenarioConfig, TrajectorySet, scenario_hash

# --- CONFIGURABLE CONSTANTS ---
RESULTS_DIR = os.environ.get("ISAC_RESULTS_DIR", "results")
ARTIFACT_VERSION = "1.0.0"
CSV_SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"
ITERATIONS_FILE = "iterations.csv"
METRICS_FILE = "metrics.csv"
TRAJECTORY_FILE = "trajectory.csv"
TRAINING_CURVE_FILE = "training_curve.csv"
INFEASIBILITY_FILE = "infeasibility.json"
TREND_FILE = "trend.csv"
PLOT_TRAJECTORIES_FILE = "trajectories.csv"
PLOT_CONVERGENCE_FILE = "convergence.csv"

TRAJECTORY_COLUMNS = ["slot", "uav", "x", "y", "H"]
ITERATION_COLUMNS = [
    "iteration",
    "sum_rate_bits",
    "min_crb_margin",
    "min_energy_margin_j",
    "alg1_iterations",
    "alg2_iterations",
    "ddpg_episodes",
    "trajectory_updated",
]
CURVE_COLUMNS = ["episode", "mean_reward", "violations"]


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()
    return datetime.now(timezone.utc).isoformat()


def build_manifest(command, scenario_path, seed, overrides=None, solver=None, ddpg=None, **extra) -> dict:
    manifest = {
        "command": command,
        "scenario_path": str(scenario_path),
        "scenario_hash": scenario_hash(scenario_path),
        "seed": seed,
        "overrides": overrides or {},
        "solver": solver or {},
        "ddpg": ddpg or {},
        "created_at": _timestamp(),
        "artifact_version": ARTIFACT_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
    }
    manifest.update(extra)
    return manifest


def write_json(payload: dict, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def write_manifest(manifest: dict, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, MANIFEST_FILE)
    write_json(manifest, path)
    return path


def read_manifest(results_dir) -> dict:
    path = os.path.join(results_dir, MANIFEST_FILE)
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _versioned(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    out["schema_version"] = CSV_SCHEMA_VERSION
    return out


def write_csv(df: pd.DataFrame, path):
    _versioned(df).to_csv(path, index=False, encoding="utf-8")


def upsert_csv(df: pd.DataFrame, path, key):
    """Merge rows into an existing CSV, new rows winning on `key`; falls back to a plain append."""
    new_df = _versioned(df)
    try:
        if os.path.exists(path):
            existing = read_csv_checked(path)
            existing["schema_version"] = CSV_SCHEMA_VERSION
            final_df = pd.concat([new_df, existing], ignore_index=True, sort=False)
            final_df = final_df.drop_duplicates(subset=key, keep="first").sort_values(key)
        else:
            final_df = new_df
        final_df.to_csv(path, index=False, encoding="utf-8")
    except Exception as e:
        PipelineLogger.log_event("SAVE_ERROR", {"file": str(path), "error": str(e)})
        ts_print(f"⚠️ Saving error: {e}. Attempting fallback append to {path}.", level="WARNING")
        try:
            if os.path.exists(path):
                new_df.to_csv(path, mode="a", index=False, header=False, encoding="utf-8")
            else:
                new_df.to_csv(path, index=False, encoding="utf-8")
            ts_print(f"💾 Appended {len(new_df)} rows to {path} (fallback).")
        except Exception as e2:
            PipelineLogger.log_event("SAVE_ERROR", {"file": str(path), "error": str(e2), "stage": "fallback"})
            ts_print(f"❌ Failed fallback save: {e2}", level="ERROR")


def read_csv_checked(path, columns=None) -> pd.DataFrame:
    df = pd.read_csv(path)
    if "schema_version" not in df.columns:
        raise StructuralError(f"{path}: no schema_version column")
    versions = set(df["schema_version"].dropna().astype(int).tolist())
    if versions and versions != {CSV_SCHEMA_VERSION}:
        raise StructuralError(f"{path}: schema version {sorted(versions)} does not match {CSV_SCHEMA_VERSION}")
    missing = [c for c in (columns or []) if c not in df.columns]
    if missing:
        raise StructuralError(f"{path}: missing columns {missing}")
    return df.drop(columns=["schema_version"])


def trajectory_frame(traj: TrajectorySet) -> pd.DataFrame:
    rows = []
    for u in range(traj.uav_count):
        for n in range(traj.slot_count + 1):
            x, y, h = traj.positions[u, n]
            rows.append([n, u, float(x), float(y), float(h)])
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def load_trajectory_csv(path, cfg: ScenarioConfig) -> TrajectorySet:
    df = read_csv_checked(path, TRAJECTORY_COLUMNS)
    U, N = cfg.uav_count, cfg.slot_count
    if len(df) != U * (N + 1):
        raise StructuralError(f"{path}: expected {U * (N + 1)} rows, got {len(df)}")
    positions = np.zeros((U, N + 1, 3))
    for row in df.itertuples(index=False):
        positions[int(row.uav), int(row.slot)] = (row.x, row.y, row.H)
    return TrajectorySet.from_positions(positions, cfg.tau)


def metrics_frame(report) -> pd.DataFrame:
    """Long-form (slot, uav, node, metric, value) rows for rates, CRBs and energy."""
    frames = [report.rates.to_frame(), report.crb.to_frame(), report.energy.to_frame()]
    return pd.concat(frames, ignore_index=True)


def write_run_results(report, out_dir) -> list:
    """Per-iteration table, long-form metrics, trajectory dump and (when trained) the DDPG curve."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    iterations = pd.DataFrame(report.iterations).reindex(columns=ITERATION_COLUMNS)
    for name, df in (
        (ITERATIONS_FILE, iterations),
        (METRICS_FILE, metrics_frame(report)),
        (TRAJECTORY_FILE, trajectory_frame(report.trajectory)),
    ):
        path = os.path.join(out_dir, name)
        write_csv(df, path)
        written.append(path)
    if not report.training_curve.empty:
        path = os.path.join(out_dir, TRAINING_CURVE_FILE)
        extra = [c for c in report.training_curve.columns if c not in CURVE_COLUMNS]
        write_csv(report.training_curve[CURVE_COLUMNS + extra], path)
        written.append(path)
    summary = {
        "mode": report.mode,
        "sum_rate_bits": report.sum_rate,
        "min_crb_rad2": report.min_crb,
        "min_crb_margin": report.min_crb_margin,
        "min_energy_margin_j": report.energy.min_margin,
        "residuals": report.residuals,
        "stop_reason": report.stop_reason,
        "best_iteration": report.best_iteration,
    }
    path = os.path.join(out_dir, "summary.json")
    write_json(summary, path)
    written.append(path)
    return written


def write_infeasibility(error, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, INFEASIBILITY_FILE)
    payload = error.to_dict() if hasattr(error, "to_dict") else {"error": str(error)}
    payload["kind"] = type(error).__name__
    write_json(payload, path)
    return path


def write_trend(table: pd.DataFrame, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, TREND_FILE)
    upsert_csv(table, path, key=["axis_value"])
    return path


def plot_data(results_dir):
    """Emit trajectories.csv and convergence.csv from a finished run; returns their paths and any warnings."""
    manifest = read_manifest(results_dir)
    warnings = []
    scenario_path = manifest.get("scenario_path", "")
    if not os.path.exists(scenario_path):
        warnings.append(f"scenario file {scenario_path} no longer exists; hash not checked")
    elif scenario_hash(scenario_path) != manifest.get("scenario_hash"):
        warnings.append(f"scenario file {scenario_path} changed since the run (hash mismatch)")
    traj = read_csv_checked(os.path.join(results_dir, TRAJECTORY_FILE), TRAJECTORY_COLUMNS)
    iterations = read_csv_checked(os.path.join(results_dir, ITERATIONS_FILE), ["iteration", "sum_rate_bits"])
    traj_path = os.path.join(results_dir, PLOT_TRAJECTORIES_FILE)
    conv_path = os.path.join(results_dir, PLOT_CONVERGENCE_FILE)
    write_csv(traj.sort_values(["uav", "slot"]), traj_path)
    write_csv(iterations[["iteration", "sum_rate_bits"]], conv_path)
    return [traj_path, conv_path], warnings
