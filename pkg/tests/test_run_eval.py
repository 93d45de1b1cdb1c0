import asyncio
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pandas as pd
import pytest

import run_eval
from scenario import with_overrides


def test_dominance_flags_each_baseline():
    table = pd.DataFrame(
        [
            {"seed": 0, "proposed": 10.0, "TWOBF": 8.0, "BFWOT": 9.0, "status": "ok"},
            {"seed": 1, "proposed": 10.0, "TWOBF": 8.0, "BFWOT": 10.5, "status": "ok"},
            {"seed": 2, "status": "infeasible"},
        ]
    )
    scored = run_eval.dominance(table)
    assert scored["seed"].tolist() == [0, 1]
    assert scored["beats_TWOBF"].tolist() == [True, True]
    assert scored["beats_BFWOT"].tolist() == [True, False]


def test_dominance_tolerates_solver_noise():
    table = pd.DataFrame([{"seed": 0, "proposed": 10.0, "TWOBF": 10.0 + 1e-7, "BFWOT": 10.0, "status": "ok"}])
    assert run_eval.dominance(table)["beats_TWOBF"].all()


def test_missing_template_exits(tmp_path):
    with pytest.raises(SystemExit) as e:
        run_eval.load_template(str(tmp_path / "nope.json"))
    assert e.value.code == 1


def test_infeasible_seeds_are_reported(desk_cfg):
    starved = with_overrides(desk_cfg, crb_threshold_rad2=1e-30)
    rows = asyncio.run(run_eval.run_evaluation(starved, range(2), False, 1, 1, 2))
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(r["status"] == "infeasible" for r in rows)
