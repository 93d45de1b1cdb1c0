import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest
import torch

from channel import ChannelSampler
from isac_errors import StructuralError, TrainingDivergedError
from metrics import compute_energy_ledger, compute_rates, uniform_beams
from scenario import initial_trajectory, validate_kinematics
from trajectory_rl import (
    Critic,
    DdpgAgent,
    DdpgConfig,
    IsacTrajectoryEnv,
    ReplayBuffer,
    Transition,
    ViolationReport,
    critic_target,
    evaluate_policy,
    load_checkpoint,
    move,
    random_policy,
    reward_fn,
    rollout,
    save_checkpoint,
    soft_update,
    squash_to_box,
    step_environment,
    train,
    with_overrides,
    zero_policy,
)

SMALL = DdpgConfig(episodes=3, finetune_episodes=1, batch_size=8, buffer_capacity=64, warmup=8, hidden=(16, 16))


@pytest.fixture(scope="module")
def frozen(desk_cfg):
    chans = ChannelSampler(desk_cfg).sample(initial_trajectory(desk_cfg))
    return uniform_beams(chans, desk_cfg)


@pytest.fixture
def env(desk_cfg, frozen):
    return IsacTrajectoryEnv(desk_cfg, frozen, ddpg=SMALL)


def straight_policy(_state):
    # full speed, heading along +x, mid altitude
    return np.array([1.0, 0.0, 0.0])


def test_config_validation():
    with pytest.raises(ValueError):
        DdpgConfig(gamma=1.0)
    with pytest.raises(ValueError):
        DdpgConfig(tau_soft=0.0)
    with pytest.raises(ValueError):
        DdpgConfig(batch_size=100, buffer_capacity=10)
    with pytest.raises(ValueError):
        DdpgConfig(activation="swish")
    assert DdpgConfig(hidden=[8, 8]).as_dict()["hidden"] == [8, 8]
    assert with_overrides(SMALL, gamma=0.5, penalty=None).gamma == 0.5


def test_replay_buffer_overwrites_oldest():
    buffer = ReplayBuffer(3, state_dim=1, action_dim=1, seed=0)
    for i in range(5):
        buffer.push(Transition(np.array([i]), np.array([0.0]), float(i), np.array([i + 1]), False))
    assert len(buffer) == 3
    assert sorted(buffer.states[:, 0].tolist()) == [2.0, 3.0, 4.0]
    states, actions, rewards, next_states, dones = buffer.sample(10)
    assert states.shape == (10, 1) and rewards.shape == (10, 1) and dones.shape == (10, 1)
    assert set(rewards[:, 0].tolist()) <= {2.0, 3.0, 4.0}


def test_critic_target_formula():
    assert critic_target(1.0, 0.9, 2.0) == pytest.approx(2.8)
    assert critic_target(1.0, 0.9, 2.0, done=True) == pytest.approx(1.0)


def test_soft_update_blends_parameters():
    target = [torch.zeros(2, 2)]
    online = [torch.ones(2, 2)]
    soft_update(target, online, 0.25)
    np.testing.assert_allclose(target[0].numpy(), 0.25)
    soft_update(target, online, 1.0)
    np.testing.assert_allclose(target[0].numpy(), 1.0)
    with pytest.raises(StructuralError):
        soft_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(StructuralError):
        soft_update([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)], 0.5)


def test_squash_to_box_maps_corners_and_middle(desk_cfg):
    box = squash_to_box(np.zeros(3), desk_cfg)
    np.testing.assert_allclose(box[0], [15.0, 0.0, 175.0])
    low = squash_to_box(-np.ones(3), desk_cfg)[0]
    high = squash_to_box(5 * np.ones(3), desk_cfg)[0]
    np.testing.assert_allclose(low, [10.0, -desk_cfg.heading_limit_rad, 150.0])
    np.testing.assert_allclose(high, [20.0, desk_cfg.heading_limit_rad, 200.0])


def test_move_kinematics():
    new = move(np.array([10.0, 20.0, 150.0]), (5.0, np.pi / 2, 180.0, 2.0))
    np.testing.assert_allclose(new, [10.0, 30.0, 180.0], atol=1e-12)


def test_reward_fn_penalises_once():
    rates = np.array([[1.0, 2.0]])
    clean = ViolationReport()
    assert reward_fn(rates, clean, 10.0) == pytest.approx(3.0)
    broken = ViolationReport(step=[0], altitude=[0])
    assert reward_fn(rates, broken, 10.0) == pytest.approx(-7.0)
    crb_only = ViolationReport(crb=[(0, 0)])
    assert reward_fn(rates, crb_only, 10.0) == pytest.approx(3.0)
    assert reward_fn(rates, crb_only, 10.0, include_crb=True) == pytest.approx(-7.0)
    assert broken.labels() == ["step", "altitude"]


def test_step_cancels_too_long_move(desk_cfg, frozen):
    sampler = ChannelSampler(desk_cfg)
    start = np.array([desk_cfg.start_position])
    result = step_environment(start, 1, np.array([[40.0, 0.0, 175.0]]), frozen, sampler, desk_cfg, penalty=5.0)
    assert result.violations.step == [0]
    np.testing.assert_allclose(result.positions, start)
    assert result.reward == pytest.approx(result.rates.sum() - 5.0)


def test_step_cancels_altitude_breach(desk_cfg, frozen):
    sampler = ChannelSampler(desk_cfg)
    start = np.array([desk_cfg.start_position])
    result = step_environment(start, 1, np.array([[10.0, 0.0, 230.0]]), frozen, sampler, desk_cfg, penalty=5.0)
    assert result.violations.altitude == [0]
    np.testing.assert_allclose(result.positions, start)


def test_last_slot_lands_on_finish(desk_cfg, frozen):
    sampler = ChannelSampler(desk_cfg)
    N = desk_cfg.slot_count
    near = np.array([[150.0, 250.0, 175.0]])
    result = step_environment(near, N, np.array([[10.0, 1.0, 160.0]]), frozen, sampler, desk_cfg, penalty=5.0)
    np.testing.assert_allclose(result.positions[0], desk_cfg.finish_position)
    assert result.violations.endpoint == []

    far = np.array([[0.0, 250.0, 175.0]])
    result = step_environment(far, N, np.zeros((1, 3)), frozen, sampler, desk_cfg, penalty=5.0, terminal_weight=2.0)
    excess = 200.0 - desk_cfg.max_speed_mps * desk_cfg.tau
    assert result.violations.endpoint == [0]
    assert result.violations.endpoint_excess == pytest.approx(excess)
    expected = result.rates.sum() - 5.0 - 2.0 * 5.0 * excess / (desk_cfg.max_speed_mps * desk_cfg.tau)
    assert result.reward == pytest.approx(expected)


def test_step_flags_energy_overrun(desk_cfg, frozen):
    sampler = ChannelSampler(desk_cfg)
    start = np.array([desk_cfg.start_position])
    used = np.array([desk_cfg.energy_threshold_j[0]])
    result = step_environment(start, 1, np.array([[15.0, 0.0, 175.0]]), frozen, sampler, desk_cfg, penalty=5.0, energy_used=used)
    assert result.violations.energy == [0]


def test_separation_cancel_repeats_until_clear(default_cfg):
    frozen3 = uniform_beams(ChannelSampler(default_cfg).sample(initial_trajectory(default_cfg)), default_cfg)
    sampler = ChannelSampler(default_cfg)
    d = 10.0 * default_cfg.tau
    start = np.array(
        [
            [100.0 + d, 253.0 + d, 175.0],
            [100.0, 250.0, 175.0],
            [100.0 - d, 245.0, 175.0],
        ]
    )
    # 0 and 1 collide after the move; holding 1 back leaves it next to where 2 arrives
    actions = np.array(
        [
            [10.0, -np.pi / 2, 175.0],
            [10.0, 0.0, 175.0],
            [10.0, 0.0, 175.0],
        ]
    )
    result = step_environment(start, 1, actions, frozen3, sampler, default_cfg, penalty=5.0)
    assert result.violations.separation == [(0, 1), (1, 2)]
    np.testing.assert_allclose(result.positions, start)
    assert result.reward == pytest.approx(result.rates.sum() - 5.0)


def test_env_observation_and_penalty(env, desk_cfg):
    obs = env.reset()
    assert obs.shape == (env.state_dim,)
    assert np.all(np.abs(obs) <= 1.0)
    assert env.action_dim == 3
    assert env.penalty == pytest.approx(SMALL.penalty_factor * env.reward_scale)
    fixed = IsacTrajectoryEnv(desk_cfg, env.beams, ddpg=with_overrides(SMALL, penalty=3.0))
    assert fixed.penalty == 3.0


def test_straight_rollout_is_clean(env, desk_cfg, frozen):
    traj = rollout(straight_policy, env)
    assert env.violation_count == 0
    np.testing.assert_allclose(traj.positions, initial_trajectory(desk_cfg).positions, atol=1e-9)
    assert validate_kinematics(traj, desk_cfg).feasible()
    chans = ChannelSampler(desk_cfg).sample(traj)
    assert env.episode_reward == pytest.approx(compute_rates(frozen, chans, desk_cfg).sum_rate, rel=1e-9)
    assert env.episode_reward == pytest.approx(desk_cfg.slot_count * env.reward_scale, rel=1e-9)
    ledger = compute_energy_ledger(frozen, traj, desk_cfg)
    np.testing.assert_allclose(env.energy_used, ledger.totals, rtol=1e-9)


def test_zero_policy_misses_the_finish(env, desk_cfg):
    traj = rollout(zero_policy(desk_cfg), env)
    assert env.violation_count == 1
    np.testing.assert_allclose(traj.positions[0, -1], desk_cfg.finish_position)
    assert traj.positions.shape == (1, desk_cfg.slot_count + 1, 3)


def test_random_policy_is_seeded(desk_cfg):
    a, b = random_policy(desk_cfg, seed=3), random_policy(desk_cfg, seed=3)
    np.testing.assert_array_equal(a(None), b(None))
    assert np.all(np.abs(a(None)) <= 1.0)


def test_evaluate_policy_repeats(env):
    rewards = evaluate_policy(straight_policy, env, episodes=2)
    assert rewards.shape == (2,)
    assert rewards[0] == pytest.approx(rewards[1])


def test_agent_actions_in_unit_box(env):
    agent = DdpgAgent(env.state_dim, env.action_dim, SMALL, seed=0)
    action = agent(env.reset())
    assert action.shape == (env.action_dim,)
    assert np.all(np.abs(action) <= 1.0)


def test_train_returns_curve_and_is_deterministic(env, desk_cfg, frozen):
    agent, curve = train(env, SMALL, seed=1)
    assert list(curve.columns) == ["episode", "total_reward", "mean_reward", "violations"]
    assert len(curve) == SMALL.episodes
    np.testing.assert_allclose(curve["mean_reward"], curve["total_reward"] / desk_cfg.slot_count)

    again = IsacTrajectoryEnv(desk_cfg, frozen, ddpg=SMALL)
    _, curve2 = train(again, SMALL, seed=1)
    np.testing.assert_allclose(curve["total_reward"], curve2["total_reward"])

    _, tuned = train(env, SMALL, seed=2, agent=agent, episodes=1)
    assert len(tuned) == 1


def test_divergence_guard(env):
    cfg = with_overrides(SMALL, loss_cap=-1.0, divergence_patience=2)
    agent = DdpgAgent(env.state_dim, env.action_dim, cfg, seed=0)
    buffer = ReplayBuffer(16, env.state_dim, env.action_dim, seed=0)
    state = env.reset()
    for _ in range(8):
        buffer.push(Transition(state, np.zeros(env.action_dim, dtype=np.float32), 1.0, state, False))
    agent.update(buffer.sample(4))
    with pytest.raises(TrainingDivergedError):
        agent.update(buffer.sample(4))


def test_checkpoint_round_trip(tmp_path, env):
    agent = DdpgAgent(env.state_dim, env.action_dim, SMALL, seed=4)
    path = tmp_path / "policy.pt"
    save_checkpoint(agent, path)
    loaded = load_checkpoint(path)
    state = env.reset()
    np.testing.assert_allclose(loaded(state), agent(state), atol=1e-7)
    assert loaded.cfg == agent.cfg


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "old.pt"
    torch.save({"version": 0}, path)
    with pytest.raises(StructuralError):
        load_checkpoint(path)


def test_critic_action_gradient_matches_finite_differences():
    torch.manual_seed(0)
    critic = Critic(4, 2, hidden=(5, 5), activation="tanh").double()
    states = torch.randn(3, 4, dtype=torch.float64)
    actions = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a: critic(states, a), (actions,), eps=1e-6, atol=1e-6)


def test_actor_loss_gradient_matches_finite_differences():
    agent = DdpgAgent(4, 2, with_overrides(SMALL, hidden=(5,), activation="tanh"), seed=0)
    actor, critic = agent.actor.double(), agent.critic.double()
    states = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    names = [name for name, _ in actor.named_parameters()]
    weights = tuple(p.detach().clone().requires_grad_(True) for p in actor.parameters())

    def actor_loss(*w):
        out = torch.func.functional_call(actor, dict(zip(names, w)), (states,))
        return -critic(states, out).mean()

    assert torch.autograd.gradcheck(actor_loss, weights, eps=1e-6, atol=1e-6)

    # the same gradient through the chain rule: dQ/da pushed back through the actor
    actor.zero_grad()
    (-critic(states, actor(states)).mean()).backward()
    direct = [p.grad.clone() for p in actor.parameters()]
    actor.zero_grad()
    mu = actor(states)
    a = mu.detach().requires_grad_(True)
    dq_da = torch.autograd.grad(critic(states, a).sum(), a)[0]
    mu.backward(-dq_da / len(states))
    for d, p in zip(direct, actor.parameters()):
        torch.testing.assert_close(d, p.grad)
