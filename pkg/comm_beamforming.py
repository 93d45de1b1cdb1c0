"""Communication beam design by fractional programming.

The sum rate is lifted to covariances G and optimised by alternating three
exact coordinate updates: the SINR auxiliaries chi, the quadratic-transform
multipliers psi and a joint conic solve over every G. Channels are divided by
the noise power inside the subproblem, so the noise term is 1.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from channel import ChannelRealization
from conic_kernel import (
    INFEASIBLE,
    ConicProblem,
    Constraint,
    LinearTrace,
    ObjectiveTerm,
    SolverSettings,
    maybe_dump,
    solve,
)
from isac_errors import DegenerateDenominatorError, InitializationError, NumericalError, SubproblemInfeasibleError
from metrics import BeamformerSet, budget_residuals, compute_rates, extract_all, flight_energy_matrix
from pipeline_log import PipelineLogger, ts_print
from scenario import ScenarioConfig, TrajectorySet, initial_trajectory

# --- CONFIGURABLE CONSTANTS ---
ALG1_MAX_ITERS = 100
ALG1_EPSILON = 1e-4
MONOTONE_TOL = 1e-6
INIT_POWER_SHARE = 0.5
HEADROOM_TOL = 1e-9
FILL_MARGIN = 1e-9
LN2 = np.log(2.0)


@dataclass
class FpState:
    chi: np.ndarray  # (U, V, N)
    psi: np.ndarray
    G: np.ndarray  # (U, V, N, M, M), relaxed
    signal: np.ndarray  # Tr(H G) / sigma^2
    total: np.ndarray  # signal + interference/sigma^2 + 1
    iteration: int = 0
    objective_trace: List[float] = field(default_factory=list)
    step_trace: List[float] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    relaxed_objective: float = float("nan")
    extracted_objective: float = float("nan")
    stop_reason: str = ""


def psi_star(O, P):
    O = np.asarray(O, dtype=float)
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        raise DegenerateDenominatorError("quadratic-transform denominator must be positive")
    return np.sqrt(np.clip(O, 0.0, None)) / P


def quadratic_transform(psi, O, P):
    """2 psi sqrt(O) - psi^2 P; equals O / P at psi = psi_star(O, P)."""
    return 2.0 * psi * np.sqrt(np.clip(O, 0.0, None)) - psi**2 * P


def dual_term(chi, sinr):
    """ln(1+chi) - chi + (1+chi) sinr/(1+sinr), in nats; equals ln(1+sinr) at chi = sinr."""
    return np.log1p(chi) - chi + (1.0 + chi) * sinr / (1.0 + sinr)


def normalised_grams(chans: ChannelRealization, cfg: ScenarioConfig):
    return chans.channel_grams() / cfg.noise_power_w


def _received(G, I, Hn, cfg: ScenarioConfig):
    """Noise-normalised signal and total received power (signal + interference + 1) per (u, v, n)."""
    mask = cfg.comm_mask()[:, :, None]
    cov = G.sum(axis=1) + I.sum(axis=1)  # (U, N, M, M)
    per_uav = np.real(np.einsum("uvnml,unlm->uvn", Hn, cov))
    signal = np.where(mask, np.real(np.einsum("uvnml,uvnlm->uvn", Hn, G)), 0.0)
    total = np.where(mask, per_uav.sum(axis=0, keepdims=True) + 1.0, 1.0)
    return signal, total


def fp_objective(state: FpState, cfg: ScenarioConfig, G=None, I=None, Hn=None, psi=None):
    """Sum over served links of (tau/ln2)[ln(1+chi) - chi + quadratic transform]; psi=None uses psi*."""
    mask = cfg.comm_mask()[:, :, None]
    if G is None:
        signal, total = state.signal, state.total
    else:
        signal, total = _received(G, I, Hn, cfg)
    O = (1.0 + state.chi) * signal
    if psi is None:
        frac = O / total
    else:
        frac = quadratic_transform(psi, O, total)
    terms = np.log1p(state.chi) - state.chi + frac
    return float(cfg.tau / LN2 * np.where(mask, terms, 0.0).sum())


def update_chi(state: FpState, beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig) -> FpState:
    """chi* = Tr(HG) / Theta at the current G and the fixed sensing covariances."""
    Hn = normalised_grams(chans, cfg)
    signal, total = _received(state.G, beams.I, Hn, cfg)
    theta = total - signal
    if np.any(theta <= 0):
        raise DegenerateDenominatorError("interference-plus-noise term vanished")
    state.signal, state.total = signal, total
    state.chi = np.where(cfg.comm_mask()[:, :, None], signal / theta, 0.0)
    return state


def update_psi(state: FpState) -> FpState:
    """psi* = sqrt(O) / P with O = (1+chi) Tr(HG) and P = Tr(HG) + Theta."""
    O = (1.0 + state.chi) * state.signal
    state.psi = psi_star(O, state.total)
    return state


def _index_links(cfg: ScenarioConfig):
    links = []
    for u, users in enumerate(cfg.users_per_uav):
        for v in users:
            for s in range(cfg.slot_count):
                links.append((u, v, s))
    return links


def _headroom(beams: BeamformerSet, traj: TrajectorySet, cfg: ScenarioConfig):
    """Power left for comm beams per (u, n) and energy left per u with sensing and flight held fixed."""
    sense = beams.sense_power().sum(axis=1)
    power = np.asarray(cfg.max_power_w)[:, None] - sense
    flight = flight_energy_matrix(traj, cfg).sum(axis=1)
    energy = np.asarray(cfg.energy_threshold_j) - flight - cfg.tau * sense.sum(axis=1)
    return power, energy


def build_G_problem(state: FpState, beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig, traj: TrajectorySet):
    Hn = normalised_grams(chans, cfg)
    M = cfg.array.antenna_count
    links = _index_links(cfg)
    var_of = {link: j for j, link in enumerate(links)}
    weight = cfg.tau / LN2
    eye = np.eye(M)
    problem = ConicProblem(matrix_count=len(links), dimension=M, name="comm_G")

    # linear part: -(tau/ln2) sum_l psi_l^2 P_l collected per variable
    linear = LinearTrace()
    constant = 0.0
    sense_cov = beams.I.sum(axis=1)  # (U, N, M, M)
    for (u, v, s) in links:
        chi, psi = state.chi[u, v, s], state.psi[u, v, s]
        constant += np.log1p(chi) - chi
        w2 = psi**2
        fixed = 1.0 + sum(float(np.real(np.trace(Hn[up, v, s] @ sense_cov[up, s]))) for up in range(cfg.uav_count))
        constant -= w2 * fixed
        if psi > 0:
            problem.objective.append(
                ObjectiveTerm("sqrt", LinearTrace().add_matrix(var_of[(u, v, s)], Hn[u, v, s]), weight * 2.0 * psi * np.sqrt(1.0 + chi))
            )
    for j, (up, vp, s) in enumerate(links):
        coef = np.zeros((M, M), dtype=complex)
        for (u, v, s2) in links:
            if s2 == s and state.psi[u, v, s2] > 0:
                coef += state.psi[u, v, s2] ** 2 * Hn[up, v, s]
        if np.any(coef):
            linear.add_matrix(j, -weight * coef)
    linear.constant = weight * constant
    problem.objective.append(ObjectiveTerm("linear", linear))

    power_room, energy_room = _headroom(beams, traj, cfg)
    for u, users in enumerate(cfg.users_per_uav):
        energy = LinearTrace()
        for s in range(cfg.slot_count):
            expr = LinearTrace()
            for v in users:
                expr.add_matrix(var_of[(u, v, s)], eye)
                energy.add_matrix(var_of[(u, v, s)], cfg.tau * eye)
            if users:
                problem.constraints.append(Constraint(expr, "<=", float(power_room[u, s]), f"power[u={u},n={s + 1}]"))
        if users:
            problem.constraints.append(Constraint(energy, "<=", float(energy_room[u]), f"energy[u={u}]"))
    return problem, links


def solve_G(
    state: FpState,
    beams: BeamformerSet,
    chans: ChannelRealization,
    cfg: ScenarioConfig,
    traj: TrajectorySet = None,
    settings: SolverSettings = None,
) -> FpState:
    """Joint conic solve over every G with chi and psi fixed; stores the relaxed covariances."""
    settings = settings or SolverSettings()
    traj = traj if traj is not None else initial_trajectory(cfg)
    problem, links = build_G_problem(state, beams, chans, cfg, traj)
    maybe_dump(problem, settings, f"alg1_iter{state.iteration:03d}")
    solution = solve(problem, settings)
    if solution.status == INFEASIBLE:
        raise SubproblemInfeasibleError(
            f"communication subproblem infeasible at iteration {state.iteration}",
            binding=solution.binding,
            iterate=state.iteration,
        )
    if not solution.ok:
        raise NumericalError(f"communication subproblem failed: {solution.message}")
    G = np.zeros_like(state.G)
    for j, idx in enumerate(links):
        G[idx] = solution.matrices[j]
    state.G = G
    return state


def initial_G(beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig, traj: TrajectorySet) -> np.ndarray:
    """Half-power MRT directions, shrunk to the power and energy left after sensing and flight."""
    power_room, energy_room = _headroom(beams, traj, cfg)
    if np.any(power_room < -HEADROOM_TOL) or np.any(energy_room < -HEADROOM_TOL):
        u_bad = sorted({int(u) for u in np.nonzero(power_room < -HEADROOM_TOL)[0]} | {int(u) for u in np.nonzero(energy_room < -HEADROOM_TOL)[0]})
        raise InitializationError(f"no power or energy left for communication beams on UAVs {u_bad}")
    G = np.zeros_like(beams.G)
    for u, users in enumerate(cfg.users_per_uav):
        share = cfg.max_power_w[u] * INIT_POWER_SHARE / max(1, len(users) + len(cfg.targets_per_uav[u]))
        for s in range(cfg.slot_count):
            per_link = min(share, max(power_room[u, s], 0.0) / max(1, len(users)))
            for v in users:
                h = chans.comm[u, v, s]
                norm2 = float(np.real(np.vdot(h, h)))
                if norm2 > 0:
                    G[u, v, s] = per_link * np.outer(h, h.conj()) / norm2
        used = cfg.tau * np.real(np.einsum("vnmm->", G[u]))
        room = max(energy_room[u], 0.0)
        if used > room:
            G[u] *= room / used * (1.0 - 1e-9)
    return G


def fill_headroom(G, beams: BeamformerSet, traj: TrajectorySet, cfg: ScenarioConfig) -> np.ndarray:
    """Scale every comm covariance of a slot by one common factor >= 1 up to the power and energy left.

    A common per-slot scale raises every SINR of that slot, so the sum rate never drops.
    """
    power_room, energy_room = _headroom(beams, traj, cfg)
    used = np.real(np.einsum("uvnmm->un", G))  # (U, N)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(used > 0, power_room / used, np.inf)
    c = ratio.min(axis=0) * (1.0 - FILL_MARGIN)
    c = np.where(np.isfinite(c), np.maximum(c, 1.0), 1.0)  # (N,)

    base = cfg.tau * used.sum(axis=1)
    extra = cfg.tau * (used * (c - 1.0)[None, :]).sum(axis=1)
    slack = np.maximum(energy_room * (1.0 - FILL_MARGIN) - base, 0.0)
    lam = 1.0
    for u in range(cfg.uav_count):
        if extra[u] > 0:
            lam = min(lam, slack[u] / extra[u])
    scale = 1.0 + lam * (c - 1.0)
    return G * scale[None, None, :, None, None]


def _feasible_G(G, beams: BeamformerSet, traj: TrajectorySet, cfg: ScenarioConfig, tol=1e-7):
    trial = BeamformerSet(g=beams.g, i=beams.i, G=G, I=beams.I)
    res = budget_residuals(trial, traj, cfg)
    return res["power"] <= tol and res["energy"] <= tol and np.any(G)


def _extract(G, beams: BeamformerSet):
    g, quality = extract_all(G)
    extracted = BeamformerSet.from_vectors(g, beams.i)
    extracted.I = beams.I.copy()
    extracted.comm_quality = quality
    extracted.sense_quality = beams.sense_quality
    return extracted


def run_alg1(
    beams: BeamformerSet,
    chans: ChannelRealization,
    cfg: ScenarioConfig,
    max_iters: int = ALG1_MAX_ITERS,
    eps: float = ALG1_EPSILON,
    traj: TrajectorySet = None,
    settings: SolverSettings = None,
):
    """Alternate chi, psi and G updates until the relative sum-rate change drops below eps.

    Returns the rank-one beams (sensing covariances untouched) and the final FpState.
    """
    settings = settings or SolverSettings()
    traj = traj if traj is not None else initial_trajectory(cfg)
    beams.check_shapes(cfg)
    G0 = beams.G if _feasible_G(beams.G, beams, traj, cfg) else initial_G(beams, chans, cfg, traj)
    G0 = fill_headroom(G0, beams, traj, cfg)
    shape = G0.shape[:3]
    state = FpState(chi=np.zeros(shape), psi=np.zeros(shape), G=G0.copy(), signal=np.zeros(shape), total=np.ones(shape))

    update_chi(state, beams, chans, cfg)
    update_psi(state)
    current = fp_objective(state, cfg)
    state.objective_trace.append(current)
    state.step_trace.append(current)
    ts_print(f"🚀 Comm beams: initial relaxed sum rate {current:.4f} bits")

    Hn = normalised_grams(chans, cfg)
    for t in range(1, max_iters + 1):
        state.iteration = t
        previous_G = state.G
        solve_G(state, beams, chans, cfg, traj=traj, settings=settings)
        after_G = fp_objective(state, cfg, G=state.G, I=beams.I, Hn=Hn)
        if after_G < current - MONOTONE_TOL * max(1.0, abs(current)):
            ts_print(f"⚠️ Comm beams: rejected G update at iteration {t} ({after_G:.6f} < {current:.6f})", level="WARNING")
            state.G = previous_G
            update_chi(state, beams, chans, cfg)
            update_psi(state)
            state.stop_reason = "rejected-step"
            break
        state.step_trace.append(after_G)
        update_chi(state, beams, chans, cfg)
        state.step_trace.append(fp_objective(state, cfg))
        state.G = fill_headroom(state.G, beams, traj, cfg)
        update_chi(state, beams, chans, cfg)
        state.step_trace.append(fp_objective(state, cfg))
        update_psi(state)
        new = fp_objective(state, cfg)
        state.step_trace.append(new)
        state.objective_trace.append(new)

        extracted = _extract(state.G, beams)
        extracted_rate = compute_rates(extracted, chans, cfg).sum_rate
        residual = budget_residuals(extracted, traj, cfg)
        row = {
            "iter": t,
            "objective_relaxed": new,
            "objective_extracted": extracted_rate,
            "max_residual": max(residual.values()),
        }
        state.history.append(row)
        PipelineLogger.log_event("ALG1_ITERATION", row)
        ts_print(f"   Comm beams iter {t}: relaxed {new:.6f}, extracted {extracted_rate:.6f}", level="DEBUG")

        change = abs(new - current) / max(abs(current), 1e-12)
        current = new
        if change < eps:
            state.stop_reason = "converged"
            break
    else:
        state.stop_reason = "max-iters"

    state.relaxed_objective = current
    result = _extract(state.G, beams)
    # refresh the auxiliaries on the achievable rank-one beams
    refreshed = FpState(chi=state.chi, psi=state.psi, G=result.G, signal=state.signal, total=state.total)
    update_chi(refreshed, result, chans, cfg)
    update_psi(refreshed)
    state.chi, state.psi, state.signal, state.total = refreshed.chi, refreshed.psi, refreshed.signal, refreshed.total
    state.extracted_objective = compute_rates(result, chans, cfg).sum_rate
    quality = result.comm_quality[cfg.comm_mask()] if result.comm_quality is not None else np.ones(1)
    ts_print(
        f"✅ Comm beams finished after {state.iteration} iterations ({state.stop_reason}): "
        f"relaxed {state.relaxed_objective:.4f}, extracted {state.extracted_objective:.4f}, "
        f"min extraction quality {float(quality.min(initial=1.0)):.4f}"
    )
    return result, state
