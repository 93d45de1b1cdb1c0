"""Outer block-coordinate loop, baselines and parameter sweeps."""

import asyncio
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from channel import ChannelRealization, ChannelSampler
from comm_beamforming import run_alg1
from conic_kernel import SolverSettings
from isac_errors import InitializationError, SubproblemInfeasibleError
from metrics import (
    BeamformerSet,
    CrbReport,
    EnergyLedger,
    RateReport,
    budget_residuals,
    compute_crb,
    compute_energy_ledger,
    compute_rates,
    extract_all,
    uniform_beams,
)
from pipeline_log import PipelineLogger, ts_print
from scenario import ScenarioConfig, TrajectorySet, initial_trajectory, validate_kinematics, with_overrides
from sensing_beamforming import ALG2_MAX_ITERS, initial_I, run_alg2, sensing_feasibility
from trajectory_rl import DdpgAgent, DdpgConfig, IsacTrajectoryEnv, random_policy, rollout, train

# --- CONFIGURABLE CONSTANTS ---
BCD_MAX_ITERS = 10
BCD_EPSILON = 1e-3
ALG_MAX_ITERS = 50
RESIDUAL_TOL = 1e-6
SWEEP_CONCURRENCY = int(os.environ.get("ISAC_SWEEP_CONCURRENCY", "1"))
MODES = ("proposed", "beamforming_only")
BASELINES = ("TWOBF", "BFWOT", "RANDOM_POLICY")
SWEEP_AXES = {"crb": "crb_threshold_rad2", "pmax": "max_power_w"}
TREND_COLUMNS = ["axis_value", "sum_rate_bits", "min_crb", "status"]


@dataclass
class BaselineSpec:
    """TWOBF freezes the beams to uniform MRT/steering, BFWOT freezes the straight-line
    trajectory, RANDOM_POLICY flies a uniform random policy and redesigns the beams on it."""

    kind: str
    seed: Optional[int] = None

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in BASELINES:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {BASELINES}")


@dataclass
class BcdReport:
    mode: str
    iterations: List[dict]
    trajectory: TrajectorySet
    beams: BeamformerSet
    channels: ChannelRealization
    rates: RateReport
    crb: CrbReport
    energy: EnergyLedger
    residuals: dict
    stop_reason: str
    best_iteration: int = 0
    training_curve: pd.DataFrame = field(default_factory=pd.DataFrame)
    agent: Optional[DdpgAgent] = None

    @property
    def sum_rate(self) -> float:
        return self.rates.sum_rate

    @property
    def min_crb(self) -> float:
        served = self.crb.crb[self.crb.mask]
        return float(served.min()) if served.size else float("nan")

    @property
    def min_crb_margin(self) -> float:
        return self.crb.min_margin

    def feasible(self, tol=RESIDUAL_TOL) -> bool:
        return max(self.residuals.values(), default=0.0) <= tol

    def iterations_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.iterations)


def solution_residuals(beams: BeamformerSet, traj: TrajectorySet, chans: ChannelRealization, cfg: ScenarioConfig) -> dict:
    """Relative residuals of every problem constraint on one solution (0 means satisfied)."""
    kin = validate_kinematics(traj, cfg).as_dict()
    scale = cfg.max_speed_mps * cfg.tau
    out = {name: value / scale for name, value in kin.items() if name in ("step", "endpoint")}
    out["altitude"] = kin["altitude"] / max(cfg.max_altitude_m, 1.0)
    out["separation"] = kin["separation"] / max(cfg.min_separation_m, 1.0)
    out.update(budget_residuals(beams, traj, cfg))
    out["crb"] = max(0.0, compute_crb(beams, chans, cfg).max_ratio() - 1.0)
    return out


def _design_beams(beams, chans, cfg, traj, settings, alg_iters):
    """Communication then sensing design, starting from sensing covariances that already meet the CRB here."""
    I = initial_I(beams, chans, cfg)
    i, quality = extract_all(I)
    beams = BeamformerSet(g=beams.g, i=i, G=beams.G, I=I, comm_quality=beams.comm_quality, sense_quality=quality)
    beams, fp = run_alg1(beams, chans, cfg, max_iters=alg_iters, traj=traj, settings=settings)
    beams, sca = run_alg2(beams, chans, cfg, max_iters=min(alg_iters, ALG2_MAX_ITERS), traj=traj, settings=settings)
    return beams, fp, sca


def _fail_fast(chans: ChannelRealization, cfg: ScenarioConfig):
    bad = sensing_feasibility(chans, cfg)
    if bad:
        raise SubproblemInfeasibleError(
            f"CRB threshold unreachable within the power budget for {len(bad)} target slot(s)",
            binding=[f"crb[u={u},k={k},n={n}]" for u, k, n in bad],
            iterate=0,
        )


def _flight_fits(traj: TrajectorySet, cfg: ScenarioConfig) -> bool:
    ledger = compute_energy_ledger(BeamformerSet.zeros(cfg), traj, cfg)
    return bool(np.all(ledger.margin > 0))


def _finish(mode, rows, traj, beams, chans, cfg, stop_reason, best, curve=None, agent=None) -> BcdReport:
    report = BcdReport(
        mode=mode,
        iterations=rows,
        trajectory=traj,
        beams=beams,
        channels=chans,
        rates=compute_rates(beams, chans, cfg),
        crb=compute_crb(beams, chans, cfg),
        energy=compute_energy_ledger(beams, traj, cfg),
        residuals=solution_residuals(beams, traj, chans, cfg),
        stop_reason=stop_reason,
        best_iteration=best,
        training_curve=curve if curve is not None else pd.DataFrame(),
        agent=agent,
    )
    worst = max(report.residuals, key=report.residuals.get)
    if report.residuals[worst] > RESIDUAL_TOL:
        ts_print(f"⚠️ Final solution breaks {worst} by {report.residuals[worst]:.3e} (relative)", level="WARNING")
    return report


def run_bcd(
    cfg: ScenarioConfig,
    bcd_iters: int = BCD_MAX_ITERS,
    eps_outer: float = BCD_EPSILON,
    mode: str = "proposed",
    ddpg: DdpgConfig = None,
    settings: SolverSettings = None,
    seed: Optional[int] = None,
    replay: ChannelRealization = None,
    alg_iters: int = ALG_MAX_ITERS,
) -> BcdReport:
    """Alternate communication beams, sensing beams and (in proposed mode) the trajectory.

    Stops when the relative change of the extracted sum rate falls below eps_outer
    (an infinite eps_outer runs exactly one iteration). The returned solution is the
    best outer iterate; every iterate pairs a trajectory with beams designed on it.
    """
    if mode not in MODES:
        raise ValueError(f"unknown BCD mode {mode!r}; expected one of {MODES}")
    ddpg = ddpg or DdpgConfig()
    settings = settings or SolverSettings()
    seed = cfg.rng_seed if seed is None else seed
    sampler = ChannelSampler(cfg, replay=replay)

    traj = initial_trajectory(cfg)
    chans = sampler.sample(traj)
    _fail_fast(chans, cfg)
    beams = BeamformerSet.zeros(cfg)
    ts_print(f"🚀 BCD ({mode}): up to {bcd_iters} outer iterations, eps {eps_outer:g}")

    rows, curves = [], []
    agent = None
    previous = 0.0
    best = None
    stop_reason = "max-iters"
    for t in range(1, bcd_iters + 1):
        started = time.perf_counter()
        try:
            beams, fp, sca = _design_beams(beams, chans, cfg, traj, settings, alg_iters)
        except (SubproblemInfeasibleError, InitializationError) as e:
            if best is None:
                if isinstance(e, SubproblemInfeasibleError) and e.iterate is None:
                    e.iterate = t
                raise
            ts_print(f"⚠️ BCD iteration {t}: beam design failed ({e}); keeping iteration {best[0]}", level="WARNING")
            stop_reason = "design-failed"
            break

        rates = compute_rates(beams, chans, cfg)
        crb = compute_crb(beams, chans, cfg)
        ledger = compute_energy_ledger(beams, traj, cfg)
        sum_rate = rates.sum_rate
        row = {
            "iteration": t,
            "sum_rate_bits": sum_rate,
            "min_crb_margin": crb.min_margin,
            "min_energy_margin_j": ledger.min_margin,
            "alg1_iterations": fp.iteration,
            "alg2_iterations": sca.iteration,
            "ddpg_episodes": 0,
            "trajectory_updated": False,
            "wall_time_s": 0.0,
        }
        if best is None or sum_rate > best[1]:
            best = (t, sum_rate, traj, beams, chans)

        change = abs(sum_rate - previous) / max(abs(previous), 1e-12)
        previous = sum_rate
        converged = change < eps_outer
        if not converged and t < bcd_iters and mode == "proposed":
            env = IsacTrajectoryEnv(cfg, beams, sampler=sampler, ddpg=ddpg)
            episodes = ddpg.episodes if agent is None else ddpg.finetune_episodes
            agent, curve = train(env, ddpg, seed=seed + t - 1, agent=agent, episodes=episodes)
            curves.append(curve.assign(bcd_iteration=t))
            row["ddpg_episodes"] = episodes
            candidate = rollout(agent, env)
            if not validate_kinematics(candidate, cfg).feasible():
                ts_print(f"⚠️ BCD iteration {t}: learned trajectory breaks the kinematic limits; keeping the current one", level="WARNING")
            elif not _flight_fits(candidate, cfg):
                ts_print(f"⚠️ BCD iteration {t}: learned trajectory exhausts the energy budget; keeping the current one", level="WARNING")
            else:
                traj = candidate
                chans = sampler.sample(traj)
                row["trajectory_updated"] = True

        row["wall_time_s"] = time.perf_counter() - started
        rows.append(row)
        PipelineLogger.log_event("BCD_ITERATION", row)
        ts_print(f"   BCD iteration {t}: sum rate {sum_rate:.4f} bits, relative change {change:.3e}")
        if converged:
            stop_reason = "converged"
            break

    best_t, _, traj, beams, chans = best
    curve = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()
    report = _finish(mode, rows, traj, beams, chans, cfg, stop_reason, best_t, curve, agent)
    ts_print(f"✅ BCD finished ({stop_reason}) after {len(rows)} iterations: sum rate {report.sum_rate:.4f} bits")
    return report


def _uniform_fit(chans: ChannelRealization, traj: TrajectorySet, cfg: ScenarioConfig) -> BeamformerSet:
    """Uniform beams, shrunk evenly over the slots when the full budget would overrun the energy limit."""
    beams = uniform_beams(chans, cfg)
    ledger = compute_energy_ledger(beams, traj, cfg)
    scale = np.ones((cfg.uav_count, cfg.slot_count))
    for u in range(cfg.uav_count):
        cs = ledger.cs[u].sum()
        room = ledger.threshold[u] - ledger.flight[u].sum()
        if cs > room:
            scale[u] = max(room, 0.0) / cs
    if np.all(scale == 1.0):
        return beams
    return uniform_beams(chans, cfg, power_scale=scale)


def run_baseline(
    spec: BaselineSpec,
    cfg: ScenarioConfig,
    bcd_iters: int = BCD_MAX_ITERS,
    eps_outer: float = BCD_EPSILON,
    ddpg: DdpgConfig = None,
    settings: SolverSettings = None,
    replay: ChannelRealization = None,
    alg_iters: int = ALG_MAX_ITERS,
) -> BcdReport:
    ddpg = ddpg or DdpgConfig()
    settings = settings or SolverSettings()
    seed = cfg.rng_seed if spec.seed is None else spec.seed
    ts_print(f"🚀 Baseline {spec.kind} (seed {seed})")

    if spec.kind == "BFWOT":
        report = run_bcd(
            cfg, bcd_iters, eps_outer, mode="beamforming_only", settings=settings, seed=seed, replay=replay, alg_iters=alg_iters
        )
        report.mode = spec.kind
        return report

    sampler = ChannelSampler(cfg, replay=replay)
    straight = initial_trajectory(cfg)
    chans = sampler.sample(straight)
    started = time.perf_counter()

    if spec.kind == "TWOBF":
        beams = _uniform_fit(chans, straight, cfg)
        env = IsacTrajectoryEnv(cfg, beams, sampler=sampler, ddpg=ddpg)
        agent, curve = train(env, ddpg, seed=seed)
        traj = rollout(agent, env)
        if not validate_kinematics(traj, cfg).feasible() or not _flight_fits(traj, cfg):
            ts_print("⚠️ TWOBF: learned trajectory infeasible; falling back to the straight line", level="WARNING")
            traj = straight
        chans = sampler.sample(traj)
        beams = _uniform_fit(chans, traj, cfg)
        episodes = ddpg.episodes
    else:
        _fail_fast(chans, cfg)
        beams, _, _ = _design_beams(BeamformerSet.zeros(cfg), chans, cfg, straight, settings, alg_iters)
        env = IsacTrajectoryEnv(cfg, beams, sampler=sampler, ddpg=ddpg)
        traj = rollout(random_policy(cfg, seed), env)
        chans = sampler.sample(traj)
        beams, _, _ = _design_beams(beams, chans, cfg, traj, settings, alg_iters)
        agent, curve, episodes = None, pd.DataFrame(), 0

    rates = compute_rates(beams, chans, cfg)
    row = {
        "iteration": 1,
        "sum_rate_bits": rates.sum_rate,
        "min_crb_margin": compute_crb(beams, chans, cfg).min_margin,
        "min_energy_margin_j": compute_energy_ledger(beams, traj, cfg).min_margin,
        "alg1_iterations": 0,
        "alg2_iterations": 0,
        "ddpg_episodes": episodes,
        "trajectory_updated": True,
        "wall_time_s": time.perf_counter() - started,
    }
    PipelineLogger.log_event("BCD_ITERATION", {"baseline": spec.kind, **row})
    report = _finish(spec.kind, [row], traj, beams, chans, cfg, "baseline", 1, curve, agent)
    ts_print(f"✅ Baseline {spec.kind}: sum rate {report.sum_rate:.4f} bits")
    return report


def _axis_override(cfg: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    if axis == "crb":
        return with_overrides(cfg, crb_threshold_rad2=float(value))
    return with_overrides(cfg, max_power_w=[float(value)] * cfg.uav_count)


def _sweep_point(cfg, axis, value, run_kwargs):
    try:
        point = _axis_override(cfg, axis, value)
        report = run_bcd(point, **run_kwargs)
    except (SubproblemInfeasibleError, InitializationError) as e:
        ts_print(f"⚠️ Sweep {axis}={value:g}: infeasible ({e})", level="WARNING")
        return {"axis_value": value, "sum_rate_bits": float("nan"), "min_crb": float("nan"), "status": "infeasible"}, None
    return {"axis_value": value, "sum_rate_bits": report.sum_rate, "min_crb": report.min_crb, "status": "ok"}, report


async def _sweep_async(cfg, axis, values, run_kwargs, concurrency):
    semaphore = asyncio.Semaphore(max(1, concurrency))

    async def one(value):
        async with semaphore:
            return await asyncio.to_thread(_sweep_point, cfg, axis, value, run_kwargs)

    return await asyncio.gather(*(one(v) for v in values))


def sweep(cfg: ScenarioConfig, axis: str, values, concurrency: int = SWEEP_CONCURRENCY, **run_kwargs):
    """One run_bcd per value with the scenario's common seed.

    Returns the trend table and the per-value reports (None where infeasible).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {tuple(SWEEP_AXES)}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    if values != sorted(values):
        raise ValueError("sweep values must be sorted ascending")
    ts_print(f"🚀 Sweep over {axis}: {len(values)} point(s), concurrency {concurrency}")
    results = asyncio.run(_sweep_async(cfg, axis, values, run_kwargs, concurrency))
    table = pd.DataFrame([row for row, _ in results], columns=TREND_COLUMNS)
    reports = [report for _, report in results]
    ts_print(f"🏁 Sweep done: {int((table['status'] == 'ok').sum())}/{len(values)} feasible")
    return table, reports
