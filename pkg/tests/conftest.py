import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

import pipeline_log
from scenario import load_scenario

SCENARIO_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scenarios"))


@pytest.fixture(autouse=True)
def isolated_event_log(tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline_log, "LOG_FILE", str(tmp_path / "events.log"))
    monkeypatch.setattr(pipeline_log.PipelineLogger, "_initialized", False)


def scenario_path(name):
    return os.path.join(SCENARIO_DIR, f"{name}.json")


@pytest.fixture(scope="session")
def desk_cfg():
    return load_scenario(scenario_path("desk"))


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_scenario(scenario_path("tiny"))


@pytest.fixture(scope="session")
def default_cfg():
    return load_scenario(scenario_path("default"))
