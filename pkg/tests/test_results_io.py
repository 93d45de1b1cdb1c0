import json
import os
import shutil
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pandas as pd
import pytest

import pipeline_log
from conftest import scenario_path
from isac_errors import StructuralError, SubproblemInfeasibleError
from orchestrator import run_bcd
from results_io import (
    ITERATION_COLUMNS,
    build_manifest,
    load_trajectory_csv,
    plot_data,
    read_csv_checked,
    read_manifest,
    trajectory_frame,
    upsert_csv,
    write_csv,
    write_infeasibility,
    write_manifest,
    write_run_results,
)
from scenario import initial_trajectory


def make_row(value, rate, status="ok"):
    return {"axis_value": value, "sum_rate_bits": rate, "min_crb": 1e-6, "status": status}


@pytest.fixture(scope="module")
def report(desk_cfg):
    return run_bcd(desk_cfg, bcd_iters=1, mode="beamforming_only", alg_iters=3)


def test_upsert_and_save_normal(tmp_path):
    out = tmp_path / "trend.csv"
    write_csv(pd.DataFrame([make_row(1e-5, 10.0)]), out)

    upsert_csv(pd.DataFrame([make_row(1e-4, 12.0)]), out, key=["axis_value"])

    df = read_csv_checked(out)
    assert sorted(df["axis_value"].tolist()) == [1e-5, 1e-4]


def test_dedupe_prioritizes_new(tmp_path):
    out = tmp_path / "trend.csv"
    write_csv(pd.DataFrame([make_row(1e-5, 10.0, status="infeasible")]), out)

    upsert_csv(pd.DataFrame([make_row(1e-5, 11.0)]), out, key=["axis_value"])

    df = read_csv_checked(out)
    assert df.shape[0] == 1
    assert df.loc[0, "status"] == "ok"
    assert df.loc[0, "sum_rate_bits"] == pytest.approx(11.0)


def test_upsert_fallback_on_concat_error(tmp_path, monkeypatch):
    out = tmp_path / "trend.csv"
    write_csv(pd.DataFrame([make_row(1e-5, 10.0)]), out)

    def fake_concat(*args, **kwargs):
        raise RuntimeError("forced concat error")

    monkeypatch.setattr(pd, "concat", fake_concat)

    # should not raise; the rows are appended instead
    upsert_csv(pd.DataFrame([make_row(1e-4, 12.0)]), out, key=["axis_value"])

    df = pd.read_csv(out)
    assert df["axis_value"].tolist() == [1e-5, 1e-4]
    with open(pipeline_log.LOG_FILE, "r", encoding="utf-8") as f:
        assert "SAVE_ERROR" in f.read()


def test_read_csv_checked_rejects_other_versions(tmp_path):
    bare = tmp_path / "bare.csv"
    pd.DataFrame([make_row(1.0, 1.0)]).to_csv(bare, index=False)
    with pytest.raises(StructuralError):
        read_csv_checked(bare)

    old = tmp_path / "old.csv"
    pd.DataFrame([{**make_row(1.0, 1.0), "schema_version": 0}]).to_csv(old, index=False)
    with pytest.raises(StructuralError):
        read_csv_checked(old)

    ok = tmp_path / "ok.csv"
    write_csv(pd.DataFrame([make_row(1.0, 1.0)]), ok)
    with pytest.raises(StructuralError):
        read_csv_checked(ok, ["axis_value", "wall_time_s"])


def test_trajectory_csv_round_trip(tmp_path, desk_cfg):
    traj = initial_trajectory(desk_cfg)
    frame = trajectory_frame(traj)
    assert len(frame) == desk_cfg.uav_count * (desk_cfg.slot_count + 1)
    assert frame["slot"].tolist() == list(range(desk_cfg.slot_count + 1))
    path = tmp_path / "trajectory.csv"
    write_csv(frame, path)
    loaded = load_trajectory_csv(path, desk_cfg)
    assert (loaded.positions == traj.positions).all()


def test_trajectory_csv_wrong_length(tmp_path, desk_cfg):
    path = tmp_path / "trajectory.csv"
    write_csv(trajectory_frame(initial_trajectory(desk_cfg)).iloc[:-1], path)
    with pytest.raises(StructuralError):
        load_trajectory_csv(path, desk_cfg)


def test_manifest_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    first = build_manifest("run", scenario_path("desk"), 7, overrides={"rng_seed": 7})
    second = build_manifest("run", scenario_path("desk"), 7, overrides={"rng_seed": 7})
    assert first == second
    assert first["created_at"].startswith("2023-11-14")
    assert len(first["scenario_hash"]) == 64
    write_manifest(first, tmp_path)
    assert read_manifest(tmp_path) == json.loads(json.dumps(first))


def test_write_run_results(tmp_path, report):
    written = write_run_results(report, tmp_path)
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["iterations.csv", "metrics.csv", "summary.json", "trajectory.csv"]
    iterations = pd.read_csv(tmp_path / "iterations.csv")
    assert list(iterations.columns) == ITERATION_COLUMNS + ["schema_version"]
    metrics = read_csv_checked(tmp_path / "metrics.csv", ["slot", "uav", "node", "metric", "value"])
    assert {"rate_bits", "crb_rad2", "cs_energy_j", "flight_energy_j"} <= set(metrics["metric"])
    with open(tmp_path / "summary.json", "r", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["sum_rate_bits"] == pytest.approx(report.sum_rate)
    assert summary["stop_reason"] == report.stop_reason


def test_write_infeasibility(tmp_path):
    error = SubproblemInfeasibleError("no room", binding=["crb[u=0,k=0,n=1]"], iterate=0)
    path = write_infeasibility(error, tmp_path)
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    assert payload == {
        "binding_constraints": ["crb[u=0,k=0,n=1]"],
        "error": "no room",
        "iterate": 0,
        "kind": "SubproblemInfeasibleError",
    }


def test_plot_data_and_hash_warning(tmp_path, report):
    scenario_copy = tmp_path / "desk.json"
    shutil.copy(scenario_path("desk"), scenario_copy)
    out = tmp_path / "results"
    write_manifest(build_manifest("run", scenario_copy, 7), out)
    write_run_results(report, out)

    paths, warnings = plot_data(out)
    assert warnings == []
    assert [os.path.basename(p) for p in paths] == ["trajectories.csv", "convergence.csv"]
    convergence = read_csv_checked(paths[1])
    assert list(convergence.columns) == ["iteration", "sum_rate_bits"]

    scenario_copy.write_text(scenario_copy.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    _, warnings = plot_data(out)
    assert len(warnings) == 1 and "hash mismatch" in warnings[0]


def test_plot_data_needs_a_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        plot_data(tmp_path)
