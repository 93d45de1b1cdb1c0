"""Long-running end-to-end checks; set ISAC_ACCEPTANCE=1 to run them."""

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from channel import ChannelSampler
from comm_beamforming import run_alg1
from metrics import BeamformerSet, budget_residuals, compute_rates, uniform_beams
from orchestrator import BaselineSpec, run_baseline, run_bcd, sweep
from scenario import generate_random_scenario, initial_trajectory, validate_kinematics
from sensing_beamforming import initial_I, sensing_feasibility
from trajectory_rl import DdpgConfig, IsacTrajectoryEnv, evaluate_policy, random_policy, rollout, train

pytestmark = pytest.mark.skipif(os.environ.get("ISAC_ACCEPTANCE") != "1", reason="set ISAC_ACCEPTANCE=1")

TREND_TOL = 1e-3


def test_beamforming_only_converges_within_ten_iterations(desk_cfg):
    report = run_bcd(desk_cfg, bcd_iters=10, eps_outer=1e-3, mode="beamforming_only")
    assert report.stop_reason == "converged"
    assert len(report.iterations) <= 10
    assert report.crb.violations() == []
    quality = report.beams.comm_quality[desk_cfg.comm_mask()]
    assert quality.min() >= 0.99


def test_sum_rate_grows_with_crb_threshold(desk_cfg):
    values = np.geomspace(1e-6, 1e-4, 5)
    table, _ = sweep(desk_cfg, "crb", values, bcd_iters=3, mode="beamforming_only")
    rates = table.loc[table["status"] == "ok", "sum_rate_bits"].to_numpy()
    assert len(rates) >= 2
    assert np.all(np.diff(rates) >= -TREND_TOL * np.abs(rates[:-1]))


def test_sum_rate_grows_with_power(desk_cfg):
    table, _ = sweep(desk_cfg, "pmax", [0.5, 1.0, 2.0], bcd_iters=3, mode="beamforming_only")
    rates = table["sum_rate_bits"].to_numpy()
    assert list(table["status"]) == ["ok", "ok", "ok"]
    assert np.all(np.diff(rates) >= -TREND_TOL * np.abs(rates[:-1]))


def test_comm_design_is_monotone_on_random_desks(desk_cfg):
    checked, seed = 0, 0
    while checked < 10 and seed < 100:
        cfg = generate_random_scenario(seed, desk_cfg)
        seed += 1
        traj = initial_trajectory(cfg)
        chans = ChannelSampler(cfg).sample(traj)
        beams = BeamformerSet.zeros(cfg)
        beams.I = initial_I(beams, chans, cfg)
        # far targets can need more than the whole power budget
        if sensing_feasibility(chans, cfg) or budget_residuals(beams, traj, cfg)["power"] > 0:
            continue
        _, state = run_alg1(beams, chans, cfg, max_iters=50, traj=traj)
        trace = np.asarray(state.objective_trace)
        assert np.all(np.diff(trace) >= -1e-6), seed - 1
        # a rejected step means the solver could not improve any further
        assert state.stop_reason in ("converged", "rejected-step"), seed - 1
        assert len(trace) <= 51
        checked += 1
    assert checked == 10


@pytest.mark.parametrize("seed", range(10))
def test_proposed_dominates_baselines(desk_cfg, seed):
    cfg = generate_random_scenario(seed, desk_cfg)
    ddpg = DdpgConfig(episodes=100, finetune_episodes=20)
    proposed = run_bcd(cfg, bcd_iters=3, ddpg=ddpg, seed=seed)
    twobf = run_baseline(BaselineSpec("TWOBF", seed=seed), cfg, bcd_iters=3, ddpg=ddpg)
    bfwot = run_baseline(BaselineSpec("BFWOT", seed=seed), cfg, bcd_iters=3, ddpg=ddpg)
    assert proposed.sum_rate >= twobf.sum_rate * (1 - 1e-6)
    assert proposed.sum_rate >= bfwot.sum_rate * (1 - 1e-6)


def test_ddpg_beats_random_policy(tiny_cfg):
    chans = ChannelSampler(tiny_cfg).sample(initial_trajectory(tiny_cfg))
    beams = uniform_beams(chans, tiny_cfg)
    env = IsacTrajectoryEnv(tiny_cfg, beams, ddpg=DdpgConfig(episodes=300))
    agent, _ = train(env, seed=0)
    greedy = evaluate_policy(agent, env, episodes=1).mean()
    baseline = evaluate_policy(random_policy(tiny_cfg, seed=0), env, episodes=1000).mean()
    # rewards can be negative under penalties; compare against the margin above random
    assert greedy >= baseline + 0.2 * abs(baseline)
    assert validate_kinematics(rollout(agent, env), tiny_cfg).feasible()


def test_zero_beams_give_zero_rate(desk_cfg):
    # sanity anchor for the trend checks above
    chans = ChannelSampler(desk_cfg).sample(initial_trajectory(desk_cfg))
    assert compute_rates(BeamformerSet.zeros(desk_cfg), chans, desk_cfg).sum_rate == 0.0
