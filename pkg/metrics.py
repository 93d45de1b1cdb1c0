from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from channel import ChannelRealization, steering_vector
from isac_errors import NumericalError, StructuralError
from scenario import FlightPowerParams, ScenarioConfig, TrajectorySet, UavState

# --- CONFIGURABLE CONSTANTS ---
HERMITIAN_TOL = 1e-8
PSD_TOL = 1e-8
NEGATIVE_TRACE_TOL = 1e-9
METRIC_COLUMNS = ["slot", "uav", "node", "metric", "value"]


def _outer(vectors):
    return np.einsum("...m,...l->...ml", vectors, vectors.conj())


def _real_trace(a, b, spec):
    return np.real(np.einsum(spec, a, b))


def check_hermitian(X, name="matrix", tol=HERMITIAN_TOL):
    X = np.asarray(X)
    scale = max(1.0, float(np.abs(X).max(initial=0.0)))
    gap = float(np.abs(X - np.swapaxes(X, -1, -2).conj()).max(initial=0.0))
    if gap > tol * scale:
        raise StructuralError(f"{name} is not Hermitian (asymmetry {gap:.3e})")


@dataclass
class BeamformerSet:
    """Vectors and lifted covariances on the global (uav, node, slot) grid; non-served links are zero."""

    g: np.ndarray  # (U, V, N, M)
    i: np.ndarray  # (U, K, N, M)
    G: np.ndarray  # (U, V, N, M, M)
    I: np.ndarray  # (U, K, N, M, M)
    comm_quality: Optional[np.ndarray] = None
    sense_quality: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, cfg: ScenarioConfig):
        U, V, K, N, M = cfg.uav_count, cfg.user_count, cfg.target_count, cfg.slot_count, cfg.array.antenna_count
        return cls(
            g=np.zeros((U, V, N, M), dtype=complex),
            i=np.zeros((U, K, N, M), dtype=complex),
            G=np.zeros((U, V, N, M, M), dtype=complex),
            I=np.zeros((U, K, N, M, M), dtype=complex),
        )

    @classmethod
    def from_vectors(cls, g, i):
        g = np.asarray(g, dtype=complex)
        i = np.asarray(i, dtype=complex)
        return cls(
            g=g,
            i=i,
            G=_outer(g),
            I=_outer(i),
            comm_quality=np.ones(g.shape[:3]),
            sense_quality=np.ones(i.shape[:3]),
        )

    @classmethod
    def from_lifted(cls, G, I):
        G = np.asarray(G, dtype=complex)
        I = np.asarray(I, dtype=complex)
        g, comm_quality = extract_all(G)
        i, sense_quality = extract_all(I)
        return cls(g=g, i=i, G=G, I=I, comm_quality=comm_quality, sense_quality=sense_quality)

    def lifted_from_vectors(self):
        """Rank-one view of the same beams."""
        return BeamformerSet.from_vectors(self.g, self.i)

    def copy(self):
        return BeamformerSet(
            g=self.g.copy(),
            i=self.i.copy(),
            G=self.G.copy(),
            I=self.I.copy(),
            comm_quality=None if self.comm_quality is None else self.comm_quality.copy(),
            sense_quality=None if self.sense_quality is None else self.sense_quality.copy(),
        )

    def comm_power(self):
        """Tr(G) per (u, v, n)."""
        return np.real(np.einsum("uvnmm->uvn", self.G))

    def sense_power(self):
        return np.real(np.einsum("uknmm->ukn", self.I))

    def transmit_power(self):
        """Total radiated power per (u, n)."""
        return self.comm_power().sum(axis=1) + self.sense_power().sum(axis=1)

    def covariance(self):
        """Per-UAV transmit covariance sum_v G + sum_k I, shape (U, N, M, M)."""
        return self.G.sum(axis=1) + self.I.sum(axis=1)

    def check_shapes(self, cfg: ScenarioConfig):
        U, V, K, N, M = cfg.uav_count, cfg.user_count, cfg.target_count, cfg.slot_count, cfg.array.antenna_count
        expected = {
            "g": (U, V, N, M),
            "i": (U, K, N, M),
            "G": (U, V, N, M, M),
            "I": (U, K, N, M, M),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise StructuralError(f"beam array {name} has shape {getattr(self, name).shape}, expected {shape}")
        return self


def rank_one_extract(X, tol=PSD_TOL):
    """Principal eigenvector scaled by sqrt of the leading eigenvalue, plus lambda_max / Tr(X)."""
    X = np.asarray(X, dtype=complex)
    check_hermitian(X, "covariance")
    X = 0.5 * (X + X.conj().T)
    eigvals, eigvecs = np.linalg.eigh(X)
    scale = max(1.0, float(np.abs(eigvals).max(initial=0.0)))
    if eigvals[0] < -tol * scale:
        raise NumericalError(f"covariance is not PSD (min eigenvalue {eigvals[0]:.3e})")
    eigvals = np.clip(eigvals, 0.0, None)
    total = float(eigvals.sum())
    if total <= 0.0:
        return np.zeros(X.shape[0], dtype=complex), 1.0
    vec = eigvecs[:, -1]
    nonzero = np.flatnonzero(np.abs(vec) > 1e-12)
    if nonzero.size:
        lead = vec[nonzero[0]]
        vec = vec * (abs(lead) / lead)
    return np.sqrt(eigvals[-1]) * vec, float(eigvals[-1] / total)


def extract_all(stack):
    """rank_one_extract over every leading index of a (..., M, M) stack."""
    lead_shape = stack.shape[:-2]
    M = stack.shape[-1]
    flat = stack.reshape(-1, M, M)
    vectors = np.zeros((flat.shape[0], M), dtype=complex)
    quality = np.ones(flat.shape[0])
    for idx, X in enumerate(flat):
        if not np.any(X):
            continue
        vectors[idx], quality[idx] = rank_one_extract(X)
    return vectors.reshape(lead_shape + (M,)), quality.reshape(lead_shape)


@dataclass
class RateReport:
    signal: np.ndarray  # (U, V, N)
    intra_comm: np.ndarray
    intra_sense: np.ndarray
    inter_comm: np.ndarray
    inter_sense: np.ndarray
    noise_power: float
    sinr: np.ndarray
    rate: np.ndarray  # bits per slot, tau included
    mask: np.ndarray  # (U, V)

    @property
    def interference_plus_noise(self):
        return self.intra_comm + self.intra_sense + self.inter_comm + self.inter_sense + self.noise_power

    @property
    def sum_rate(self) -> float:
        return float(self.rate.sum())

    def slot_sum_rate(self, s) -> float:
        return float(self.rate[:, :, s].sum())

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for u, v in zip(*np.nonzero(self.mask)):
            for s in range(self.rate.shape[2]):
                for metric, arr in (
                    ("signal_w", self.signal),
                    ("interference_w", self.interference_plus_noise - self.noise_power),
                    ("sinr", self.sinr),
                    ("rate_bits", self.rate),
                ):
                    rows.append([s + 1, int(u), int(v), metric, float(arr[u, v, s])])
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def _interference_terms(HG_all, HI_all, owner_mask):
    """Split received powers at each user into serving-UAV and other-UAV parts.

    HG_all[u', v, n] is sum_v' Tr(H_v^{u'} G_v'^{u'}), HI_all the same for sensing beams.
    """
    serving = owner_mask[:, :, None]
    intra_comm_total = np.where(serving, HG_all, 0.0)
    intra_sense = np.where(serving, HI_all, 0.0)
    inter_comm = np.where(serving, HG_all.sum(axis=0, keepdims=True) - HG_all, 0.0)
    inter_sense = np.where(serving, HI_all.sum(axis=0, keepdims=True) - HI_all, 0.0)
    return intra_comm_total, intra_sense, inter_comm, inter_sense


def compute_rates(beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig, form="lifted") -> RateReport:
    """Per-link SINR and rate with interference taken as the incoherent sum of traces.

    form="vector" evaluates the same quantities from g and i directly.
    """
    beams.check_shapes(cfg)
    chans.check_against(cfg)
    mask = cfg.comm_mask()
    h = chans.comm  # (U, V, N, M): from UAV u to user v
    if form == "lifted":
        check_hermitian(beams.G, "comm covariance")
        check_hermitian(beams.I, "sensing covariance")
        H = chans.channel_grams()
        # received power at user v from every comm beam of UAV u, one entry per beam
        per_comm = _real_trace(H, beams.G, "uvnml,uwnlm->uvwn")
        per_sense = _real_trace(H, beams.I, "uvnml,uknlm->uvkn")
    elif form == "vector":
        per_comm = np.abs(np.einsum("uvnm,uwnm->uvwn", h.conj(), beams.g)) ** 2
        per_sense = np.abs(np.einsum("uvnm,uknm->uvkn", h.conj(), beams.i)) ** 2
    else:
        raise ValueError(f"unknown rate form {form!r}")

    signal = np.where(mask[:, :, None], np.einsum("uvvn->uvn", per_comm), 0.0)
    HG_all = per_comm.sum(axis=2)
    HI_all = per_sense.sum(axis=2)
    intra_total, intra_sense, inter_comm, inter_sense = _interference_terms(HG_all, HI_all, mask)
    intra_comm = intra_total - signal
    theta = intra_comm + intra_sense + inter_comm + inter_sense + cfg.noise_power_w
    sinr = np.where(mask[:, :, None], signal / theta, 0.0)
    rate = cfg.tau * np.log2(1.0 + sinr)
    return RateReport(
        signal=signal,
        intra_comm=np.clip(intra_comm, 0.0, None),
        intra_sense=intra_sense,
        inter_comm=inter_comm,
        inter_sense=inter_sense,
        noise_power=cfg.noise_power_w,
        sinr=sinr,
        rate=rate,
        mask=mask,
    )


def crb_value(abar_gram, beta, noise_power, I) -> float:
    """sigma^2 / (2 |beta|^2 Tr(Abar^H Abar I)); inf when the trace term vanishes."""
    trace = float(np.real(np.trace(np.asarray(abar_gram) @ np.asarray(I))))
    if trace < -NEGATIVE_TRACE_TOL:
        raise NumericalError(f"negative sensing trace {trace:.3e}")
    trace = max(trace, 0.0)
    denom = 2.0 * abs(beta) ** 2 * trace
    if denom <= 0.0:
        return float("inf")
    return noise_power / denom


@dataclass
class CrbReport:
    crb: np.ndarray  # (U, K, N) radians^2, inf where no sensing power
    trace: np.ndarray
    gamma: np.ndarray
    mask: np.ndarray  # (U, K)

    def margin(self):
        """Gamma - CRB on served links (negative means violated)."""
        return np.where(self.mask[:, :, None], self.gamma - self.crb, np.inf)

    @property
    def min_margin(self) -> float:
        m = self.margin()
        return float(m.min()) if m.size else float("inf")

    def max_ratio(self) -> float:
        """Largest CRB / Gamma over served links; <= 1 means every threshold holds."""
        if not self.mask.any():
            return 0.0
        ratio = np.where(self.mask[:, :, None], self.crb / self.gamma, 0.0)
        return float(ratio.max())

    def violations(self, rel_tol=1e-6):
        bad = self.mask[:, :, None] & (self.crb > self.gamma * (1.0 + rel_tol))
        return [tuple(int(x) for x in idx) for idx in zip(*np.nonzero(bad))]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for u, k in zip(*np.nonzero(self.mask)):
            for s in range(self.crb.shape[2]):
                rows.append([s + 1, int(u), int(k), "crb_rad2", float(self.crb[u, k, s])])
                rows.append([s + 1, int(u), int(k), "sensing_trace", float(self.trace[u, k, s])])
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def compute_crb(beams: BeamformerSet, chans: ChannelRealization, cfg: ScenarioConfig) -> CrbReport:
    beams.check_shapes(cfg)
    check_hermitian(beams.I, "sensing covariance")
    mask = cfg.sense_mask()
    U, K, N = mask.shape + (cfg.slot_count,)
    crb = np.full((U, K, N), np.inf)
    trace = np.zeros((U, K, N))
    for u, k in zip(*np.nonzero(mask)):
        for s in range(N):
            gram = chans.abar_gram[u, k, s]
            X = beams.I[u, k, s]
            trace[u, k, s] = max(float(np.real(np.trace(gram @ X))), 0.0)
            crb[u, k, s] = crb_value(gram, chans.echo_gain[u, k, s], cfg.noise_power_w, X)
    return CrbReport(crb=crb, trace=trace, gamma=cfg.gamma_array(), mask=mask)


def compute_flight_energy(state: UavState, flight: FlightPowerParams, tau) -> float:
    a_h = state.horizontal_speed
    a_c = state.vertical_speed
    induced = flight.c0 * (1.0 + 3.0 * a_h**2 / flight.tip_speed**2)
    parasite = 0.5 * flight.fuselage_drag_ratio * flight.rotor_solidity * flight.air_density * flight.rotor_disc_area * a_h**3
    a0 = flight.hover_velocity
    inner = np.sqrt(1.0 + a_h**4 / (4.0 * a0**4)) - a_h**2 / (2.0 * a0**2)
    # rounding can push the bracket a hair below zero at high speed
    blade = flight.c1 * np.sqrt(max(inner, 0.0))
    climb = flight.c2 * a_c
    return float(tau * (induced + parasite + blade + climb))


def flight_energy_matrix(traj: TrajectorySet, cfg: ScenarioConfig) -> np.ndarray:
    """E_fl per (u, slot index)."""
    U, N = traj.uav_count, traj.slot_count
    out = np.empty((U, N))
    for u in range(U):
        for s in range(N):
            out[u, s] = compute_flight_energy(traj.uav_state(u, s + 1), cfg.flight, cfg.tau)
    return out


def compute_cs_energy(beams: BeamformerSet, tau, lifted=False) -> np.ndarray:
    """tau * (sum ||g||^2 + sum ||i||^2) per (u, n); lifted=True uses the traces instead."""
    if lifted:
        return tau * beams.transmit_power()
    comm = np.sum(np.abs(beams.g) ** 2, axis=(1, 3))
    sense = np.sum(np.abs(beams.i) ** 2, axis=(1, 3))
    return tau * (comm + sense)


@dataclass
class EnergyLedger:
    cs: np.ndarray  # (U, N) joules
    flight: np.ndarray  # (U, N) joules
    threshold: np.ndarray  # (U,)
    totals: np.ndarray = field(init=False)
    margin: np.ndarray = field(init=False)

    def __post_init__(self):
        self.totals = self.cs.sum(axis=1) + self.flight.sum(axis=1)
        self.margin = self.threshold - self.totals

    @property
    def min_margin(self) -> float:
        return float(self.margin.min())

    def to_frame(self) -> pd.DataFrame:
        rows = []
        U, N = self.cs.shape
        for u in range(U):
            for s in range(N):
                rows.append([s + 1, u, -1, "cs_energy_j", float(self.cs[u, s])])
                rows.append([s + 1, u, -1, "flight_energy_j", float(self.flight[u, s])])
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def compute_energy_ledger(beams: BeamformerSet, traj: TrajectorySet, cfg: ScenarioConfig, lifted=True) -> EnergyLedger:
    return EnergyLedger(
        cs=compute_cs_energy(beams, cfg.tau, lifted=lifted),
        flight=flight_energy_matrix(traj, cfg),
        threshold=np.asarray(cfg.energy_threshold_j, dtype=float),
    )


def minimal_sensing_covariance(abar_gram, beta, noise_power, gamma) -> np.ndarray:
    """Least-power PSD matrix meeting CRB <= gamma: a scaled dyad on the top eigenvector of the gram."""
    eigvals, eigvecs = np.linalg.eigh(0.5 * (abar_gram + np.conj(abar_gram).T))
    lam = float(eigvals[-1])
    if lam <= 0.0 or abs(beta) == 0.0:
        raise NumericalError("derivative gram or echo gain vanishes; no sensing power can meet the CRB")
    power = noise_power / (2.0 * gamma * abs(beta) ** 2 * lam)
    v = eigvecs[:, -1]
    return power * np.outer(v, v.conj())


def sensing_power_floor(abar_gram, beta, noise_power, gamma) -> float:
    lam = float(np.linalg.eigvalsh(0.5 * (abar_gram + np.conj(abar_gram).T))[-1])
    if lam <= 0.0 or abs(beta) == 0.0:
        return float("inf")
    return noise_power / (2.0 * gamma * abs(beta) ** 2 * lam)


def uniform_beams(chans: ChannelRealization, cfg: ScenarioConfig, power_scale=None) -> BeamformerSet:
    """Equal-power MRT toward served users and equal-power steering toward served targets.

    power_scale (U, N) optionally shrinks the per-slot budget, e.g. to fit the energy limit.
    """
    beams = BeamformerSet.zeros(cfg)
    M = cfg.array.antenna_count
    for u in range(cfg.uav_count):
        users = cfg.users_per_uav[u]
        targets = cfg.targets_per_uav[u]
        links = len(users) + len(targets)
        if links == 0:
            continue
        for s in range(cfg.slot_count):
            budget = cfg.max_power_w[u] * (1.0 if power_scale is None else float(power_scale[u, s]))
            per_link = budget / links
            for v in users:
                h = chans.comm[u, v, s]
                norm = np.linalg.norm(h)
                if norm > 0:
                    beams.g[u, v, s] = np.sqrt(per_link) * h / norm
            for k in targets:
                a = steering_vector(chans.echo_angle[u, k, s], cfg.array)
                beams.i[u, k, s] = np.sqrt(per_link / M) * a
    return BeamformerSet.from_vectors(beams.g, beams.i)


def budget_residuals(beams: BeamformerSet, traj: TrajectorySet, cfg: ScenarioConfig, lifted=True):
    """Relative excess over the per-slot power budget and the per-UAV energy limit (0 when both hold)."""
    p_max = np.asarray(cfg.max_power_w, dtype=float)
    if lifted:
        used = beams.transmit_power()
    else:
        used = compute_cs_energy(beams, 1.0)
    power = np.maximum(0.0, used - p_max[:, None]) / np.maximum(p_max[:, None], 1e-300)
    ledger = compute_energy_ledger(beams, traj, cfg, lifted=lifted)
    energy = np.maximum(0.0, -ledger.margin) / ledger.threshold
    return {"power": float(power.max(initial=0.0)), "energy": float(energy.max(initial=0.0))}


def slot_rates(G_s, I_s, h_s, cfg: ScenarioConfig) -> np.ndarray:
    """Rates (U, V) at one slot from covariances G_s (U, V, M, M), I_s (U, K, M, M) and channels h_s (U, V, M)."""
    mask = cfg.comm_mask()
    H = np.einsum("uvm,uvl->uvml", h_s, h_s.conj())
    cov = G_s.sum(axis=1) + I_s.sum(axis=1)
    received = np.real(np.einsum("uvml,ulm->uv", H, cov)).sum(axis=0, keepdims=True)
    signal = np.real(np.einsum("uvml,uvlm->uv", H, G_s))
    theta = received - signal + cfg.noise_power_w
    sinr = np.where(mask, signal / theta, 0.0)
    return cfg.tau * np.log2(1.0 + sinr)
