"""DDPG trajectory agent.

One centralized actor outputs (speed, heading, altitude) for every UAV at each
slot. The environment keeps the beams frozen, resamples channels at the new
positions and pays the slot sum rate minus a flat penalty when a constraint
breaks. Moves that break the step or separation limit are cancelled (the UAV
holds its position). The final slot always lands on the finish point; if it
is out of reach the excess distance is penalised.
"""

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from channel import ChannelSampler
from isac_errors import StructuralError, TrainingDivergedError
from metrics import BeamformerSet, compute_flight_energy, crb_value, slot_rates
from pipeline_log import PipelineLogger, ts_print
from scenario import (
    ScenarioConfig,
    TrajectorySet,
    UavState,
    initial_trajectory,
    separation_shortfall,
    step_excess,
)

# --- CONFIGURABLE CONSTANTS ---
CHECKPOINT_VERSION = 1
ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "elu": nn.ELU, "leaky_relu": nn.LeakyReLU}
KINEMATIC_TOL = 1e-9


@dataclass
class DdpgConfig:
    gamma: float = 0.9
    tau_soft: float = 0.01
    penalty: Optional[float] = None  # None: auto-calibrate from the straight line
    penalty_factor: float = 10.0
    terminal_weight: float = 1.0
    penalize_crb: bool = False
    episodes: int = 300
    finetune_episodes: int = 50
    batch_size: int = 32
    buffer_capacity: int = 1600
    warmup: int = 32
    hidden: Tuple[int, ...] = (128, 128)
    activation: str = "relu"
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    noise: str = "ou"
    noise_sigma: float = 0.2
    noise_theta: float = 0.15
    noise_decay: float = 0.995
    noise_floor: float = 0.02
    loss_cap: float = 1e8
    divergence_patience: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"discount gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau_soft <= 1.0:
            raise ValueError(f"soft-update rate must lie in (0, 1], got {self.tau_soft}")
        if self.penalty is not None and self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch size cannot exceed the replay capacity")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.noise not in ("ou", "gaussian"):
            raise ValueError(f"unknown exploration noise {self.noise!r}")

    def as_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring; the oldest transition is overwritten first."""

    def __init__(self, capacity, state_dim, action_dim, seed=0):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros((self.capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(self.capacity, dtype=np.float32)
        self.next_states = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.dones = np.zeros(self.capacity, dtype=np.float32)
        self.rng = np.random.default_rng(seed)
        self.position = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        i = self.position
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = float(t.done)
        self.position = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size):
        idx = self.rng.integers(0, self.size, size=batch_size)
        return (
            torch.as_tensor(self.states[idx]),
            torch.as_tensor(self.actions[idx]),
            torch.as_tensor(self.rewards[idx]).unsqueeze(1),
            torch.as_tensor(self.next_states[idx]),
            torch.as_tensor(self.dones[idx]).unsqueeze(1),
        )


class OUNoise:
    def __init__(self, size, theta, sigma, rng):
        self.size, self.theta, self.sigma, self.rng = size, theta, sigma, rng
        self.reset()

    def reset(self):
        self.state = np.zeros(self.size)

    def __call__(self):
        self.state = self.state - self.theta * self.state + self.sigma * self.rng.standard_normal(self.size)
        return self.state


class GaussianNoise:
    def __init__(self, size, sigma, rng):
        self.size, self.sigma, self.rng = size, sigma, rng

    def reset(self):
        pass

    def __call__(self):
        return self.sigma * self.rng.standard_normal(self.size)


def _mlp(in_dim, out_dim, hidden, activation):
    layers, width = [], in_dim
    for h in hidden:
        layers += [nn.Linear(width, h), ACTIVATIONS[activation]()]
        width = h
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


class Actor(nn.Module):
    """Outputs pre-box actions squashed into [-1, 1]."""

    def __init__(self, state_dim, action_dim, hidden=(128, 128), activation="relu"):
        super().__init__()
        self.net = _mlp(state_dim, action_dim, hidden, activation)

    def forward(self, state):
        return torch.tanh(self.net(state))


class Critic(nn.Module):
    def __init__(self, state_dim, action_dim, hidden=(128, 128), activation="relu"):
        super().__init__()
        self.net = _mlp(state_dim + action_dim, 1, hidden, activation)

    def forward(self, state, action):
        return self.net(torch.cat([state, action], dim=-1))


def critic_target(r, gamma, q_next, done=False):
    """y = r + gamma * q_next, with q_next dropped on terminal transitions."""
    return r + gamma * (1.0 - done) * q_next


def _params(obj):
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    return list(obj)


def soft_update(target_params, online_params, delta):
    """In-place target <- delta * online + (1 - delta) * target; returns the target."""
    targets, onlines = _params(target_params), _params(online_params)
    if len(targets) != len(onlines):
        raise StructuralError(f"parameter count mismatch: {len(targets)} vs {len(onlines)}")
    with torch.no_grad():
        for t, o in zip(targets, onlines):
            if t.shape != o.shape:
                raise StructuralError(f"parameter shape mismatch: {tuple(t.shape)} vs {tuple(o.shape)}")
            t.mul_(1.0 - delta).add_(o, alpha=delta)
    return target_params


@dataclass
class ViolationReport:
    step: List[int] = field(default_factory=list)
    separation: List[Tuple[int, int]] = field(default_factory=list)
    altitude: List[int] = field(default_factory=list)
    energy: List[int] = field(default_factory=list)
    endpoint: List[int] = field(default_factory=list)
    crb: List[Tuple[int, int]] = field(default_factory=list)
    endpoint_excess: float = 0.0

    def labels(self):
        return [name for name in ("crb", "energy", "step", "endpoint", "altitude", "separation") if getattr(self, name)]

    def penalized(self, include_crb=False):
        flags = [self.step, self.separation, self.altitude, self.energy, self.endpoint]
        if include_crb:
            flags.append(self.crb)
        return any(bool(f) for f in flags)


@dataclass
class StepResult:
    positions: np.ndarray  # (U, 3) after the slot
    reward: float
    violations: ViolationReport
    rates: np.ndarray  # (U, V)
    slot_energy: np.ndarray  # (U,) flight plus radiated energy of this slot


def action_box(cfg: ScenarioConfig):
    """Lower/upper bounds for one UAV's (speed, heading, altitude)."""
    low = np.array([cfg.speed_range_mps[0], -cfg.heading_limit_rad, cfg.min_altitude_m])
    high = np.array([cfg.speed_range_mps[1], cfg.heading_limit_rad, cfg.max_altitude_m])
    return low, high


def squash_to_box(raw, cfg: ScenarioConfig) -> np.ndarray:
    """Map [-1, 1]^(3U) to per-UAV (a_h, theta, H); zero maps to the middle of the box."""
    low, high = action_box(cfg)
    raw = np.clip(np.asarray(raw, dtype=float).reshape(cfg.uav_count, 3), -1.0, 1.0)
    return low + 0.5 * (raw + 1.0) * (high - low)


def reward_fn(rates, violations: ViolationReport, penalty, include_crb=False) -> float:
    """Slot sum rate minus penalty once if any constraint broke."""
    value = float(np.sum(rates))
    if violations.penalized(include_crb):
        value -= penalty
    return value


def move(position, action):
    """Kinematics of one slot: horizontal displacement tau*a_h along theta, altitude set directly."""
    a_h, theta, altitude, tau = action
    return np.array([position[0] + tau * a_h * np.cos(theta), position[1] + tau * a_h * np.sin(theta), altitude])


def step_environment(
    positions,
    slot,
    box_action,
    frozen_beams: BeamformerSet,
    sampler: ChannelSampler,
    cfg: ScenarioConfig,
    penalty: float,
    energy_used=None,
    terminal_weight: float = 1.0,
    include_crb: bool = False,
) -> StepResult:
    """Fly slot `slot` (1-based) from positions (U, 3) under box actions (U, 3)."""
    U, N, tau = cfg.uav_count, cfg.slot_count, cfg.tau
    positions = np.asarray(positions, dtype=float)
    report = ViolationReport()
    finish = np.asarray(cfg.finish_position, dtype=float)
    if slot == N:
        # the last slot lands on the finish point; only its reachability is judged
        candidate = np.tile(finish, (U, 1))
        excess = step_excess(positions, candidate, cfg)
        report.endpoint = [int(u) for u in np.nonzero(excess > KINEMATIC_TOL)[0]]
        report.endpoint_excess = float(excess.sum())
        new = candidate
    else:
        candidate = np.stack([move(positions[u], (*box_action[u], tau)) for u in range(U)])
        excess = step_excess(positions, candidate, cfg)
        report.step = [int(u) for u in np.nonzero(excess > KINEMATIC_TOL)[0]]
        altitude = candidate[:, 2]
        report.altitude = [
            int(u) for u in np.nonzero((altitude < cfg.min_altitude_m - KINEMATIC_TOL) | (altitude > cfg.max_altitude_m + KINEMATIC_TOL))[0]
        ]
        new = candidate.copy()
        for u in set(report.step) | set(report.altitude):
            new[u] = positions[u]
        # holding a pair back can put it too close to a third UAV; repeat until no new pair appears
        while True:
            fresh = [
                (a, b)
                for a in range(U)
                for b in range(a + 1, U)
                if (a, b) not in report.separation
                and separation_shortfall(new[[a, b]], cfg.min_separation_m) > KINEMATIC_TOL
            ]
            if not fresh:
                break
            for a, b in fresh:
                report.separation.append((a, b))
                new[a], new[b] = positions[a], positions[b]

    s = slot - 1
    chans = sampler.sample_slot(new, s, with_echo=True)
    rates = slot_rates(frozen_beams.G[:, :, s], frozen_beams.I[:, :, s], chans["comm"], cfg)

    gamma = cfg.gamma_array()
    for u, targets in enumerate(cfg.targets_per_uav):
        for k in targets:
            if np.isfinite(gamma[u, k, s]):
                crb = crb_value(chans["abar_gram"][u, k], chans["echo_gain"][u, k], cfg.noise_power_w, frozen_beams.I[u, k, s])
                if crb > gamma[u, k, s] * (1.0 + 1e-6):
                    report.crb.append((u, k))

    delta = new - positions
    flight = np.array(
        [
            compute_flight_energy(
                UavState(new[u], float(np.hypot(delta[u, 0], delta[u, 1]) / tau), 0.0, float(abs(delta[u, 2]) / tau)),
                cfg.flight,
                tau,
            )
            for u in range(U)
        ]
    )
    slot_energy = flight + tau * frozen_beams.transmit_power()[:, s]
    if energy_used is not None:
        total = np.asarray(energy_used) + slot_energy
        report.energy = [int(u) for u in np.nonzero(total > np.asarray(cfg.energy_threshold_j))[0]]

    reward = reward_fn(rates, report, penalty, include_crb)
    if slot == N and report.endpoint_excess > 0:
        reward -= terminal_weight * penalty * report.endpoint_excess / (cfg.max_speed_mps * tau)
    return StepResult(new, reward, report, rates, slot_energy)


class IsacTrajectoryEnv:
    def __init__(self, cfg: ScenarioConfig, beams: BeamformerSet, sampler: ChannelSampler = None, ddpg: DdpgConfig = None):
        self.cfg = cfg
        self.beams = beams
        self.sampler = sampler or ChannelSampler(cfg)
        self.ddpg = ddpg or DdpgConfig()
        self.box_low, self.box_high = action_box(cfg)
        self.action_dim = 3 * cfg.uav_count
        self.reward_scale = self._straight_line_slot_rate()
        self.penalty = self.ddpg.penalty if self.ddpg.penalty is not None else self.ddpg.penalty_factor * self.reward_scale
        self.reset()
        self.state_dim = len(self.observe())

    def _straight_line_slot_rate(self):
        traj = initial_trajectory(self.cfg)
        totals = []
        for s in range(self.cfg.slot_count):
            comm = self.sampler.sample_slot(traj.positions[:, s + 1], s, with_echo=False)["comm"]
            totals.append(slot_rates(self.beams.G[:, :, s], self.beams.I[:, :, s], comm, self.cfg).sum())
        return max(float(np.mean(totals)), 1e-9)

    def set_beams(self, beams: BeamformerSet):
        self.beams = beams

    def reset(self):
        cfg = self.cfg
        self.slot = 1
        self.positions = np.tile(np.asarray(cfg.start_position, dtype=float), (cfg.uav_count, 1))
        self.history = [self.positions.copy()]
        self.energy_used = np.zeros(cfg.uav_count)
        self.episode_reward = 0.0
        self.violation_count = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        """Served-link beam powers, node and UAV positions and slot index, all scaled to [-1, 1]."""
        cfg = self.cfg
        s = min(self.slot, cfg.slot_count) - 1
        area = cfg.area_size_m
        p_max = np.asarray(cfg.max_power_w, dtype=float)
        comm = self.beams.comm_power()[:, :, s]
        sense = self.beams.sense_power()[:, :, s]
        feats = []
        for u, users in enumerate(cfg.users_per_uav):
            feats += [2.0 * comm[u, v] / p_max[u] - 1.0 for v in users]
        for u, targets in enumerate(cfg.targets_per_uav):
            feats += [2.0 * sense[u, k] / p_max[u] - 1.0 for k in targets]
        for p in cfg.user_positions:
            feats += [2.0 * p[0] / area - 1.0, 2.0 * p[1] / area - 1.0]
        for k in range(cfg.target_count):
            p = cfg.target_position(k, s)
            feats += [2.0 * p[0] / area - 1.0, 2.0 * p[1] / area - 1.0]
        span = max(cfg.max_altitude_m - cfg.min_altitude_m, 1e-9)
        for pos in self.positions:
            feats += [2.0 * pos[0] / area - 1.0, 2.0 * pos[1] / area - 1.0, 2.0 * (pos[2] - cfg.min_altitude_m) / span - 1.0]
        feats.append(2.0 * (self.slot - 1) / cfg.slot_count - 1.0)
        return np.clip(np.asarray(feats, dtype=np.float32), -1.0, 1.0)

    def step(self, raw_action):
        box = squash_to_box(raw_action, self.cfg)
        result = step_environment(
            self.positions,
            self.slot,
            box,
            self.beams,
            self.sampler,
            self.cfg,
            self.penalty,
            energy_used=self.energy_used,
            terminal_weight=self.ddpg.terminal_weight,
            include_crb=self.ddpg.penalize_crb,
        )
        self.energy_used = self.energy_used + result.slot_energy
        self.positions = result.positions
        self.history.append(self.positions.copy())
        self.episode_reward += result.reward
        if result.violations.penalized(self.ddpg.penalize_crb):
            self.violation_count += 1
        done = self.slot == self.cfg.slot_count
        self.slot += 1
        return self.observe(), result.reward, done, result

    def trajectory(self) -> TrajectorySet:
        return TrajectorySet.from_positions(np.stack(self.history, axis=1), self.cfg.tau)


class DdpgAgent:
    def __init__(self, state_dim, action_dim, cfg: DdpgConfig, seed=0):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        self.actor = Actor(state_dim, action_dim, cfg.hidden, cfg.activation)
        self.critic = Critic(state_dim, action_dim, cfg.hidden, cfg.activation)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        self.actor_optimizer = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_optimizer = torch.optim.Adam(self.critic.parameters(), lr=cfg.critic_lr)
        self._over_cap = 0

    def __call__(self, state) -> np.ndarray:
        """Greedy action in [-1, 1]."""
        with torch.no_grad():
            out = self.actor(torch.as_tensor(np.asarray(state, dtype=np.float32)).unsqueeze(0))
        return out.squeeze(0).numpy().astype(float)

    def update(self, batch):
        states, actions, rewards, next_states, dones = batch
        with torch.no_grad():
            q_next = self.critic_target(next_states, self.actor_target(next_states))
            y = critic_target(rewards, self.cfg.gamma, q_next, dones)
        critic_loss = nn.functional.mse_loss(self.critic(states, actions), y)
        self.critic_optimizer.zero_grad()
        critic_loss.backward()
        self.critic_optimizer.step()

        actor_loss = -self.critic(states, self.actor(states)).mean()
        self.actor_optimizer.zero_grad()
        actor_loss.backward()
        self.actor_optimizer.step()

        soft_update(self.critic_target, self.critic, self.cfg.tau_soft)
        soft_update(self.actor_target, self.actor, self.cfg.tau_soft)

        loss = float(critic_loss.item())
        if not np.isfinite(loss) or loss > self.cfg.loss_cap:
            self._over_cap += 1
            if self._over_cap >= self.cfg.divergence_patience:
                raise TrainingDivergedError(
                    f"critic loss above {self.cfg.loss_cap:g} for {self._over_cap} consecutive updates"
                )
        else:
            self._over_cap = 0
        return loss, float(actor_loss.item())


def _make_noise(cfg: DdpgConfig, size, rng):
    if cfg.noise == "gaussian":
        return GaussianNoise(size, cfg.noise_sigma, rng)
    return OUNoise(size, cfg.noise_theta, cfg.noise_sigma, rng)


def train(env: IsacTrajectoryEnv, cfg: DdpgConfig = None, seed: int = 0, agent: DdpgAgent = None, episodes: int = None):
    """Run DDPG for `episodes` (default cfg.episodes); pass `agent` to fine-tune.

    Returns the agent and a per-episode curve (episode, total_reward, mean_reward, violations).
    """
    cfg = cfg or env.ddpg
    episodes = cfg.episodes if episodes is None else episodes
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    agent = agent or DdpgAgent(env.state_dim, env.action_dim, cfg, seed=seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim, seed=seed)
    noise = _make_noise(cfg, env.action_dim, rng)
    scale = 1.0 / env.reward_scale
    curve = []
    ts_print(f"🚀 DDPG: {episodes} episodes, penalty {env.penalty:.4f}, state dim {env.state_dim}")
    for episode in range(episodes):
        state = env.reset()
        noise.reset()
        noise.sigma = max(cfg.noise_floor, cfg.noise_sigma * cfg.noise_decay**episode)
        done = False
        while not done:
            action = np.clip(agent(state) + noise(), -1.0, 1.0)
            next_state, reward, done, _ = env.step(action)
            buffer.push(Transition(state, action.astype(np.float32), reward * scale, next_state, done))
            state = next_state
            if len(buffer) >= max(cfg.warmup, cfg.batch_size):
                agent.update(buffer.sample(cfg.batch_size))
        row = {
            "episode": episode,
            "total_reward": env.episode_reward,
            "mean_reward": env.episode_reward / env.cfg.slot_count,
            "violations": env.violation_count,
        }
        curve.append(row)
        PipelineLogger.log_event("DDPG_EPISODE", row)
        if episode % 50 == 0 or episode == episodes - 1:
            ts_print(f"   DDPG episode {episode}: reward {row['total_reward']:.3f}, violations {row['violations']}", level="DEBUG")
    return agent, pd.DataFrame(curve, columns=["episode", "total_reward", "mean_reward", "violations"])


def rollout(policy: Callable, env: IsacTrajectoryEnv) -> TrajectorySet:
    """Noise-free episode; the episode reward is left on env.episode_reward."""
    state = env.reset()
    done = False
    while not done:
        state, _, done, _ = env.step(policy(state))
    return env.trajectory()


def random_policy(cfg: ScenarioConfig, seed: int = 0) -> Callable:
    rng = np.random.default_rng(seed)
    size = 3 * cfg.uav_count

    def policy(_state):
        return rng.uniform(-1.0, 1.0, size=size)

    return policy


def zero_policy(cfg: ScenarioConfig) -> Callable:
    """Middle of the action box at every slot."""
    size = 3 * cfg.uav_count
    return lambda _state: np.zeros(size)


def evaluate_policy(policy: Callable, env: IsacTrajectoryEnv, episodes: int = 1) -> np.ndarray:
    rewards = []
    for _ in range(episodes):
        rollout(policy, env)
        rewards.append(env.episode_reward)
    return np.asarray(rewards)


def save_checkpoint(agent: DdpgAgent, path):
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": json.dumps(agent.cfg.as_dict()),
            "state_dim": agent.state_dim,
            "action_dim": agent.action_dim,
            "actor": agent.actor.state_dict(),
            "critic": agent.critic.state_dict(),
            "actor_target": agent.actor_target.state_dict(),
            "critic_target": agent.critic_target.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> DdpgAgent:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = DdpgConfig(**json.loads(payload["config"]))
    agent = DdpgAgent(payload["state_dim"], payload["action_dim"], cfg)
    agent.actor.load_state_dict(payload["actor"])
    agent.critic.load_state_dict(payload["critic"])
    agent.actor_target.load_state_dict(payload["actor_target"])
    agent.critic_target.load_state_dict(payload["critic_target"])
    return agent


def with_overrides(cfg: DdpgConfig, **updates) -> DdpgConfig:
    return replace(cfg, **{k: v for k, v in updates.items() if v is not None})
