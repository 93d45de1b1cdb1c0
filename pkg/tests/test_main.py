import json
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

import main
from conftest import scenario_path
from results_io import trajectory_frame, write_csv
from scenario import TrajectorySet, initial_trajectory


def write_scenario(tmp_path, name="desk", **changes):
    with open(scenario_path(name), "r", encoding="utf-8") as f:
        data = json.load(f)
    data.update(changes)
    path = tmp_path / f"{name}-edited.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_no_command_is_usage_error():
    assert main.main([]) == main.EXIT_USAGE


def test_missing_scenario_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main.main(["run", "--out", str(tmp_path)])
    assert e.value.code == main.EXIT_USAGE


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main.main(["run", "--warp-speed"])
    assert e.value.code == main.EXIT_USAGE


def test_missing_scenario_file(tmp_path):
    code = main.main(["validate", "--scenario", str(tmp_path / "nope.json")])
    assert code == main.EXIT_NO_INPUT


def test_schema_error_is_data_error(tmp_path):
    path = write_scenario(tmp_path, schema_version=99)
    assert main.main(["validate", "--scenario", path]) == main.EXIT_DATA


def test_validate_scenario_and_trajectory(tmp_path, desk_cfg):
    good = tmp_path / "good.csv"
    write_csv(trajectory_frame(initial_trajectory(desk_cfg)), good)
    assert main.main(["validate", "--scenario", scenario_path("desk"), "--trajectory", str(good)]) == main.EXIT_OK

    positions = initial_trajectory(desk_cfg).positions.copy()
    positions[0, 2, 2] = 260.0
    bad = tmp_path / "bad.csv"
    write_csv(trajectory_frame(TrajectorySet.from_positions(positions, desk_cfg.tau)), bad)
    assert main.main(["validate", "--scenario", scenario_path("desk"), "--trajectory", str(bad)]) == main.EXIT_DATA

    missing = str(tmp_path / "missing.csv")
    assert main.main(["validate", "--scenario", scenario_path("desk"), "--trajectory", missing]) == main.EXIT_NO_INPUT


def test_unreachable_crb_exits_infeasible(tmp_path):
    path = write_scenario(tmp_path, crb_threshold_rad2=1e-30)
    out = tmp_path / "out"
    code = main.main(["run", "--scenario", path, "--out", str(out), "--mode", "beamforming_only", "--bcd-iters", "1"])
    assert code == main.EXIT_INFEASIBLE
    with open(out / "infeasibility.json", "r", encoding="utf-8") as f:
        payload = json.load(f)
    assert payload["kind"] == "SubproblemInfeasibleError"
    assert payload["iterate"] == 0
    assert payload["binding_constraints"]
    assert (out / "manifest.json").exists()


def test_run_is_byte_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["run", "--scenario", scenario_path("desk"), "--out", str(out), "--mode", "beamforming_only", "--bcd-iters", "1"]
        assert main.main(argv) == main.EXIT_OK
        outputs.append(out)
    for name in ("manifest.json", "iterations.csv", "trajectory.csv", "metrics.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()

    assert main.main(["plotdata", "--out", str(outputs[0])]) == main.EXIT_OK
    assert (outputs[0] / "trajectories.csv").exists()
    assert (outputs[0] / "convergence.csv").exists()


def test_plotdata_without_results(tmp_path):
    assert main.main(["plotdata", "--out", str(tmp_path)]) == main.EXIT_NO_INPUT


def test_sweep_values_must_ascend(tmp_path):
    argv = ["sweep", "--scenario", scenario_path("desk"), "--out", str(tmp_path), "--axis", "crb", "--values", "1e-4", "1e-5"]
    with pytest.raises(SystemExit) as e:
        main.main(argv)
    assert e.value.code == main.EXIT_USAGE


def test_sweep_without_values(tmp_path):
    argv = ["sweep", "--scenario", scenario_path("desk"), "--out", str(tmp_path), "--axis", "pmax"]
    with pytest.raises(SystemExit) as e:
        main.main(argv)
    assert e.value.code == main.EXIT_USAGE
