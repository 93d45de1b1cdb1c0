"""Sensing beam design by successive convex approximation.

Each served link gets a lower bound iota on its SINR. The bilinear condition
iota * Theta(I) <= Tr(H G) is replaced by the convex surrogate
Theta^2 / (2 Omega) + iota^2 Omega / 2 <= Tr(H G), tight at Omega = Theta / iota,
and the sum of tau * log2(1 + iota) is maximised subject to the CRB, power and
energy limits. Channels are noise-normalised as in comm_beamforming.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from channel import ChannelRealization
from comm_beamforming import _received, normalised_grams
from conic_kernel import (
    INFEASIBLE,
    ConicProblem,
    Constraint,
    LinearTrace,
    ObjectiveTerm,
    QuadraticConstraint,
    SolverSettings,
    maybe_dump,
    solve,
)
from isac_errors import InitializationError, NumericalError, SubproblemInfeasibleError
from metrics import (
    BeamformerSet,
    budget_residuals,
    compute_crb,
    crb_value,
    extract_all,
    flight_energy_matrix,
    minimal_sensing_covariance,
    sensing_power_floor,
)
from pipeline_log import PipelineLogger, ts_print
from scenario import ScenarioConfig, TrajectorySet, initial_trajectory

# --- CONFIGURABLE CONSTANTS ---
ALG2_MAX_ITERS = 100
ALG2_EPSILON = 1e-4
IOTA_FLOOR = 1e-8
MONOTONE_TOL = 1e-6
CRB_REL_TOL = 1e-6


@dataclass
class ScaState:
    iota: np.ndarray  # (U, V, N)
    omega: np.ndarray
    I: np.ndarray  # (U, K, N, M, M), relaxed
    active: np.ndarray  # served links with nonzero signal
    iteration: int = 0
    objective_trace: List[float] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    stop_reason: str = ""


def surrogate(theta, iota, omega):
    """Convex upper bound of iota * theta; equal to it at omega = theta / iota."""
    return theta**2 / (2.0 * omega) + iota**2 * omega / 2.0


def crb_bound(beta, noise_power, gamma):
    """Right-hand side of the CRB constraint written as Tr(Abar^H Abar I) >= bound."""
    return noise_power / (2.0 * gamma * abs(beta) ** 2)


def sca_objective(iota, active, tau) -> float:
    return float(tau * np.log2(1.0 + np.where(active, iota, 0.0)).sum())


def update_omega(state: ScaState, beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig) -> ScaState:
    Hn = normalised_grams(chans, cfg)
    signal, total = _received(beams.G, state.I, Hn, cfg)
    theta = total - signal
    iota = np.maximum(state.iota, IOTA_FLOOR)
    state.omega = np.where(state.active, theta / iota, 1.0)
    return state


def _served_targets(cfg: ScenarioConfig):
    return [(u, k, s) for u, targets in enumerate(cfg.targets_per_uav) for k in targets for s in range(cfg.slot_count)]


def build_I_problem(state: ScaState, beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig, traj: TrajectorySet):
    Hn = normalised_grams(chans, cfg)
    M = cfg.array.antenna_count
    targets = _served_targets(cfg)
    var_of = {key: j for j, key in enumerate(targets)}
    links = [tuple(int(x) for x in idx) for idx in zip(*np.nonzero(state.active))]
    scalar_of = {key: i for i, key in enumerate(links)}
    problem = ConicProblem(matrix_count=len(targets), dimension=M, scalar_count=len(links), name="sense_I")
    gamma = cfg.gamma_array()
    eye = np.eye(M)

    for (u, v, s), i in scalar_of.items():
        problem.objective.append(ObjectiveTerm("log2", LinearTrace().add_scalar(i, 1.0), cfg.tau))

    for (u, k, s), j in var_of.items():
        if np.isfinite(gamma[u, k, s]):
            bound = crb_bound(chans.echo_gain[u, k, s], cfg.noise_power_w, gamma[u, k, s])
            expr = LinearTrace().add_matrix(j, chans.abar_gram[u, k, s])
            problem.constraints.append(Constraint(expr, ">=", float(bound), f"crb[u={u},k={k},n={s + 1}]"))

    comm = beams.comm_power().sum(axis=1)  # (U, N)
    flight = flight_energy_matrix(traj, cfg).sum(axis=1)
    for u, served in enumerate(cfg.targets_per_uav):
        if not served:
            continue
        energy = LinearTrace()
        for s in range(cfg.slot_count):
            expr = LinearTrace()
            for k in served:
                expr.add_matrix(var_of[(u, k, s)], eye)
                energy.add_matrix(var_of[(u, k, s)], cfg.tau * eye)
            room = cfg.max_power_w[u] - comm[u, s]
            problem.constraints.append(Constraint(expr, "<=", float(room), f"power[u={u},n={s + 1}]"))
        room = cfg.energy_threshold_j[u] - flight[u] - cfg.tau * comm[u].sum()
        problem.constraints.append(Constraint(energy, "<=", float(room), f"energy[u={u}]"))

    comm_cov = beams.G.sum(axis=1)  # (U, N, M, M)
    for (u, v, s), i in scalar_of.items():
        signal = float(np.real(np.trace(Hn[u, v, s] @ beams.G[u, v, s])))
        theta = LinearTrace()
        fixed = 1.0 - signal
        for up in range(cfg.uav_count):
            fixed += float(np.real(np.trace(Hn[up, v, s] @ comm_cov[up, s])))
            for k in cfg.targets_per_uav[up]:
                theta.add_matrix(var_of[(up, k, s)], Hn[up, v, s])
        theta.constant = fixed
        omega = float(state.omega[u, v, s])
        problem.quadratic.append(
            QuadraticConstraint(
                terms=[(1.0 / (2.0 * omega), theta), (omega / 2.0, LinearTrace().add_scalar(i, 1.0))],
                rhs=LinearTrace(constant=signal),
                label=f"sinr_bound[u={u},v={v},n={s + 1}]",
            )
        )
    return problem, targets, links


def solve_I_iota(
    state: ScaState,
    beams: BeamformerSet,
    chans: ChannelRealization,
    cfg: ScenarioConfig,
    traj: TrajectorySet = None,
    settings: SolverSettings = None,
) -> ScaState:
    settings = settings or SolverSettings()
    traj = traj if traj is not None else initial_trajectory(cfg)
    problem, targets, links = build_I_problem(state, beams, chans, cfg, traj)
    maybe_dump(problem, settings, f"alg2_iter{state.iteration:03d}")
    solution = solve(problem, settings)
    if solution.status == INFEASIBLE:
        raise SubproblemInfeasibleError(
            f"sensing subproblem infeasible at iteration {state.iteration}",
            binding=solution.binding,
            iterate=state.iteration,
        )
    if not solution.ok:
        raise NumericalError(f"sensing subproblem failed: {solution.message}")
    I = np.zeros_like(state.I)
    for j, idx in enumerate(targets):
        I[idx] = solution.matrices[j]
    iota = np.zeros_like(state.iota)
    for i, idx in enumerate(links):
        iota[idx] = solution.scalars[i]
    state.I, state.iota = I, iota
    return state


def sensing_feasibility(chans: ChannelRealization, cfg: ScenarioConfig):
    """(u, k, n) triples whose CRB cannot be met within P_max, alone or together with the UAV's other targets."""
    gamma = cfg.gamma_array()
    bad = []
    for u, served in enumerate(cfg.targets_per_uav):
        for s in range(cfg.slot_count):
            floors = {
                k: sensing_power_floor(chans.abar_gram[u, k, s], chans.echo_gain[u, k, s], cfg.noise_power_w, gamma[u, k, s])
                for k in served
                if np.isfinite(gamma[u, k, s])
            }
            total = sum(floors.values())
            for k, floor in floors.items():
                if floor > cfg.max_power_w[u] or total > cfg.max_power_w[u]:
                    bad.append((u, k, s + 1))
    return bad


def initial_I(beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig) -> np.ndarray:
    """Keep CRB-feasible covariances; replace the rest by the least-power CRB dyad."""
    gamma = cfg.gamma_array()
    I = beams.I.copy()
    for (u, k, s) in _served_targets(cfg):
        if not np.isfinite(gamma[u, k, s]):
            continue
        current = crb_value(chans.abar_gram[u, k, s], chans.echo_gain[u, k, s], cfg.noise_power_w, I[u, k, s])
        if current > gamma[u, k, s] * (1.0 + CRB_REL_TOL):
            I[u, k, s] = minimal_sensing_covariance(
                chans.abar_gram[u, k, s], chans.echo_gain[u, k, s], cfg.noise_power_w, gamma[u, k, s]
            )
    return I


def _repair_extracted(i_vec, chans, cfg, u, k, s, gamma, budget):
    """Make an extracted sensing vector meet the CRB again without exceeding the relaxed power."""
    gram, beta = chans.abar_gram[u, k, s], chans.echo_gain[u, k, s]
    X = np.outer(i_vec, i_vec.conj())
    if crb_value(gram, beta, cfg.noise_power_w, X) <= gamma * (1.0 + CRB_REL_TOL):
        return i_vec
    need = crb_bound(beta, cfg.noise_power_w, gamma)
    have = float(np.real(np.trace(gram @ X)))
    if have > 0:
        scaled = i_vec * np.sqrt(need / have)
        if np.real(np.vdot(scaled, scaled)) <= budget:
            return scaled
    Xmin = minimal_sensing_covariance(gram, beta, cfg.noise_power_w, gamma)
    vec, _ = extract_all(Xmin[None])
    return vec[0]


def _extract(state: ScaState, beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig):
    i_vec, quality = extract_all(state.I)
    gamma = cfg.gamma_array()
    for (u, k, s) in _served_targets(cfg):
        if np.isfinite(gamma[u, k, s]):
            budget = float(np.real(np.trace(state.I[u, k, s])))
            i_vec[u, k, s] = _repair_extracted(i_vec[u, k, s], chans, cfg, u, k, s, gamma[u, k, s], budget)
    result = BeamformerSet.from_vectors(beams.g, i_vec)
    result.G = beams.G.copy()
    result.comm_quality = beams.comm_quality
    result.sense_quality = quality
    return result


def run_alg2(
    beams: BeamformerSet,
    chans: ChannelRealization,
    cfg: ScenarioConfig,
    max_iters: int = ALG2_MAX_ITERS,
    eps: float = ALG2_EPSILON,
    traj: TrajectorySet = None,
    settings: SolverSettings = None,
):
    """Alternate Omega and (I, iota) updates; returns rank-one beams (comm side untouched) and the ScaState."""
    settings = settings or SolverSettings()
    traj = traj if traj is not None else initial_trajectory(cfg)
    beams.check_shapes(cfg)

    I0 = initial_I(beams, chans, cfg)
    trial = BeamformerSet(g=beams.g, i=beams.i, G=beams.G, I=I0)
    residual = budget_residuals(trial, traj, cfg)
    if residual["power"] > CRB_REL_TOL or residual["energy"] > CRB_REL_TOL:
        binding = [name for name, value in residual.items() if value > CRB_REL_TOL]
        raise InitializationError(f"least-power CRB-feasible sensing covariances violate the {' and '.join(binding)} limit")

    Hn = normalised_grams(chans, cfg)
    signal, total = _received(beams.G, I0, Hn, cfg)
    active = cfg.comm_mask()[:, :, None] & (signal > 0)
    theta = total - signal
    iota0 = np.where(active, signal / theta, 0.0)
    state = ScaState(iota=iota0, omega=np.ones_like(iota0), I=I0, active=active)

    current = sca_objective(state.iota, active, cfg.tau)
    state.objective_trace.append(current)
    ts_print(f"🚀 Sensing beams: initial SINR-bound objective {current:.4f} bits")
    for t in range(1, max_iters + 1):
        state.iteration = t
        previous = (state.I, state.iota)
        update_omega(state, beams, chans, cfg)
        solve_I_iota(state, beams, chans, cfg, traj=traj, settings=settings)
        new = sca_objective(state.iota, active, cfg.tau)
        if new < current - MONOTONE_TOL * max(1.0, abs(current)):
            ts_print(f"⚠️ Sensing beams: rejected update at iteration {t} ({new:.6f} < {current:.6f})", level="WARNING")
            state.I, state.iota = previous
            state.stop_reason = "rejected-step"
            break
        state.objective_trace.append(new)
        crb = compute_crb(BeamformerSet(g=beams.g, i=beams.i, G=beams.G, I=state.I), chans, cfg)
        res = budget_residuals(BeamformerSet(g=beams.g, i=beams.i, G=beams.G, I=state.I), traj, cfg)
        row = {"iter": t, "objective": new, "min_crb_margin": crb.min_margin, "max_residual": max(res.values())}
        state.history.append(row)
        PipelineLogger.log_event("ALG2_ITERATION", row)
        ts_print(f"   Sensing beams iter {t}: objective {new:.6f}", level="DEBUG")
        change = abs(new - current) / max(abs(current), 1e-12)
        current = new
        if change < eps:
            state.stop_reason = "converged"
            break
    else:
        state.stop_reason = "max-iters"

    result = _extract(state, beams, chans, cfg)
    crb = compute_crb(result, chans, cfg)
    violations = crb.violations(CRB_REL_TOL)
    if violations:
        raise SubproblemInfeasibleError(
            f"extracted sensing beams violate the CRB on {violations[:5]}",
            binding=[f"crb[u={u},k={k},n={s + 1}]" for u, k, s in violations],
            iterate=state.iteration,
        )
    ts_print(
        f"✅ Sensing beams finished after {state.iteration} iterations ({state.stop_reason}): "
        f"objective {current:.4f}, max CRB/threshold {crb.max_ratio():.4f}"
    )
    return result, state
