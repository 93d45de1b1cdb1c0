import json
from dataclasses import dataclass

import numpy as np

from isac_errors import GeometryError, StructuralError
from scenario import ArrayGeometry, LosModelParams, ScenarioConfig, TrajectorySet

# --- CONFIGURABLE CONSTANTS ---
CHANNEL_DUMP_VERSION = 1
ANGLE_TOL_DEG = 1e-9
COMM_STREAM, ECHO_STREAM = 0, 1


@dataclass(frozen=True)
class LinkGeometry:
    horizontal_distance: float
    altitude: float
    slant_distance: float
    elevation_deg: float

    @property
    def elevation_rad(self):
        return float(np.deg2rad(self.elevation_deg))


def link_geometry(uav_position, node_position) -> LinkGeometry:
    uav_position = np.asarray(uav_position, dtype=float)
    node_position = np.asarray(node_position, dtype=float)
    # the norm is horizontal only so that d^2 = horizontal^2 + H^2
    horizontal = float(np.hypot(*(uav_position[:2] - node_position[:2])))
    altitude = float(uav_position[2] - node_position[2])
    slant = float(np.hypot(horizontal, altitude))
    if slant == 0.0:
        elevation = 90.0
    else:
        elevation = float(np.degrees(np.arcsin(np.clip(altitude / slant, -1.0, 1.0))))
    return LinkGeometry(horizontal, altitude, slant, elevation)


def los_probability(phi_deg, params: LosModelParams):
    phi = np.asarray(phi_deg, dtype=float)
    if np.any(phi < -ANGLE_TOL_DEG) or np.any(phi > 90.0 + ANGLE_TOL_DEG):
        raise GeometryError(f"elevation angle {phi_deg} outside [0, 90] degrees")
    prob = 1.0 / (1.0 + params.c * np.exp(-params.d * (phi - params.c)))
    return float(prob) if prob.ndim == 0 else prob


def steering_vector(phi, geom: ArrayGeometry) -> np.ndarray:
    """ULA response toward phi (radians)."""
    m = np.arange(geom.antenna_count)
    phase = 2.0 * np.pi * m * geom.element_spacing_m * np.sin(phi) / geom.wavelength_m
    return np.exp(-1j * phase)


def steering_derivative(phi, geom: ArrayGeometry) -> np.ndarray:
    m = np.arange(geom.antenna_count)
    rate = -1j * 2.0 * np.pi * m * geom.element_spacing_m * np.cos(phi) / geom.wavelength_m
    return rate * steering_vector(phi, geom)


def draw_nlos_vector(rng, size) -> np.ndarray:
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def _check_distance(geometry: LinkGeometry):
    if geometry.slant_distance <= 0.0:
        raise GeometryError("zero slant distance: UAV sits on the ground node")


def comm_channel(geometry: LinkGeometry, params: LosModelParams, geom: ArrayGeometry, nlos, pr_los=None):
    _check_distance(geometry)
    if pr_los is None:
        pr_los = los_probability(geometry.elevation_deg, params)
    path_gain = params.alpha0 * geometry.slant_distance ** -2
    los = steering_vector(geometry.elevation_rad, geom)
    return np.sqrt(pr_los * path_gain) * los + np.sqrt((1.0 - pr_los) * path_gain) * nlos


def sample_comm_channel(geometry: LinkGeometry, params: LosModelParams, geom: ArrayGeometry, rng, pr_los=None):
    nlos = draw_nlos_vector(rng, geom.antenna_count)
    return comm_channel(geometry, params, geom, nlos, pr_los=pr_los)


def echo_gain(sigma_k, slant_distance):
    return sigma_k / (2.0 * slant_distance)


def echo_channel(geometry: LinkGeometry, sigma_k, params: LosModelParams, geom: ArrayGeometry, nlos, pr_los=None):
    _check_distance(geometry)
    if pr_los is None:
        pr_los = los_probability(geometry.elevation_deg, params)
    beta = echo_gain(sigma_k, geometry.slant_distance)
    a = steering_vector(geometry.elevation_rad, geom)
    los = np.outer(a, a.conj())
    matrix = beta * np.sqrt(pr_los) * los + beta * np.sqrt((1.0 - pr_los) * params.kappa) * nlos
    return matrix, beta


def sample_echo_channel(geometry: LinkGeometry, sigma_k, params: LosModelParams, geom: ArrayGeometry, rng, pr_los=None):
    M = geom.antenna_count
    nlos = draw_nlos_vector(rng, (M, M))
    return echo_channel(geometry, sigma_k, params, geom, nlos, pr_los=pr_los)


def echo_derivative_gram(phi, pr_los, geom: ArrayGeometry) -> np.ndarray:
    """Gram matrix of the angle derivative of the LoS echo dyad (NLoS part does not depend on phi)."""
    a = steering_vector(phi, geom)
    da = steering_derivative(phi, geom)
    abar = np.sqrt(pr_los) * (np.outer(da, a.conj()) + np.outer(a, da.conj()))
    return abar.conj().T @ abar


@dataclass
class ChannelRealization:
    """Slot axis s = 0..N-1 holds slot s+1 of the trajectory."""

    comm: np.ndarray  # (U, V, N, M)
    echo: np.ndarray  # (U, K, N, M, M)
    echo_gain: np.ndarray  # (U, K, N)
    comm_los_prob: np.ndarray
    echo_los_prob: np.ndarray
    comm_angle: np.ndarray  # radians
    echo_angle: np.ndarray
    abar_gram: np.ndarray  # (U, K, N, M, M)
    comm_nlos: np.ndarray
    echo_nlos: np.ndarray

    @property
    def shape(self):
        U, V, N, M = self.comm.shape
        return U, V, self.echo.shape[1], N, M

    def check_against(self, cfg: ScenarioConfig):
        expected = (cfg.uav_count, cfg.user_count, cfg.target_count, cfg.slot_count, cfg.array.antenna_count)
        if self.shape != expected:
            raise StructuralError(f"channel shape {self.shape} does not match scenario {expected}")
        return self

    def channel_grams(self) -> np.ndarray:
        """H = h h^H for every (u, v, n)."""
        return np.einsum("uvnm,uvnl->uvnml", self.comm, self.comm.conj())


class ChannelSampler:
    """Common-random-number sampler: NLoS draws are fixed per (stream, u, node, n)."""

    def __init__(self, cfg: ScenarioConfig, replay: ChannelRealization = None):
        self.cfg = cfg
        U, V, K, N, M = cfg.uav_count, cfg.user_count, cfg.target_count, cfg.slot_count, cfg.array.antenna_count
        if replay is not None:
            replay.check_against(cfg)
            self.comm_nlos = replay.comm_nlos.copy()
            self.echo_nlos = replay.echo_nlos.copy()
            return
        self.comm_nlos = np.empty((U, V, N, M), dtype=complex)
        self.echo_nlos = np.empty((U, K, N, M, M), dtype=complex)
        for u in range(U):
            for n in range(N):
                for v in range(V):
                    rng = np.random.default_rng([cfg.rng_seed, COMM_STREAM, u, v, n])
                    self.comm_nlos[u, v, n] = draw_nlos_vector(rng, M)
                for k in range(K):
                    rng = np.random.default_rng([cfg.rng_seed, ECHO_STREAM, u, k, n])
                    self.echo_nlos[u, k, n] = draw_nlos_vector(rng, (M, M))

    def sample_slot(self, uav_positions, s, with_echo=True):
        """Channels for slot index s (0-based) with UAVs at uav_positions (U, 3)."""
        cfg = self.cfg
        U, V, K, M = cfg.uav_count, cfg.user_count, cfg.target_count, cfg.array.antenna_count
        sigmas = cfg.radar_cross_sections
        out = {
            "comm": np.zeros((U, V, M), dtype=complex),
            "echo": np.zeros((U, K, M, M), dtype=complex),
            "echo_gain": np.zeros((U, K)),
            "comm_los_prob": np.zeros((U, V)),
            "echo_los_prob": np.zeros((U, K)),
            "comm_angle": np.zeros((U, V)),
            "echo_angle": np.zeros((U, K)),
            "abar_gram": np.zeros((U, K, M, M), dtype=complex),
        }
        for u in range(U):
            for v in range(V):
                link = link_geometry(uav_positions[u], cfg.user_positions[v])
                pr = los_probability(link.elevation_deg, cfg.los)
                out["comm"][u, v] = comm_channel(link, cfg.los, cfg.array, self.comm_nlos[u, v, s], pr_los=pr)
                out["comm_los_prob"][u, v] = pr
                out["comm_angle"][u, v] = link.elevation_rad
            for k in range(K if with_echo else 0):
                link = link_geometry(uav_positions[u], cfg.target_position(k, s))
                pr = los_probability(link.elevation_deg, cfg.los)
                matrix, beta = echo_channel(link, sigmas[k], cfg.los, cfg.array, self.echo_nlos[u, k, s], pr_los=pr)
                out["echo"][u, k] = matrix
                out["echo_gain"][u, k] = beta
                out["echo_los_prob"][u, k] = pr
                out["echo_angle"][u, k] = link.elevation_rad
                out["abar_gram"][u, k] = echo_derivative_gram(link.elevation_rad, pr, cfg.array)
        return out

    def sample(self, traj: TrajectorySet) -> ChannelRealization:
        N = self.cfg.slot_count
        if traj.positions.shape[:2] != (self.cfg.uav_count, N + 1):
            raise StructuralError(f"trajectory shape {traj.positions.shape} does not match scenario")
        slots = [self.sample_slot(traj.positions[:, s + 1], s) for s in range(N)]
        stacked = {key: np.stack([slot[key] for slot in slots], axis=2) for key in slots[0]}
        return ChannelRealization(
            comm_nlos=self.comm_nlos.copy(),
            echo_nlos=self.echo_nlos.copy(),
            **stacked,
        )


def _split(arr):
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        return {"real": arr.real.tolist(), "imag": arr.imag.tolist()}
    return {"real": arr.tolist()}


def _join(entry):
    real = np.asarray(entry["real"], dtype=float)
    if "imag" in entry:
        return real + 1j * np.asarray(entry["imag"], dtype=float)
    return real


_DUMP_FIELDS = (
    "comm",
    "echo",
    "echo_gain",
    "comm_los_prob",
    "echo_los_prob",
    "comm_angle",
    "echo_angle",
    "abar_gram",
    "comm_nlos",
    "echo_nlos",
)


def dump_channels(realization: ChannelRealization, path):
    """Arrays are nested by (uav, node, slot[, antenna...]) with separate real/imag parts."""
    payload = {"version": CHANNEL_DUMP_VERSION, "layout": "uav,node,slot"}
    for name in _DUMP_FIELDS:
        payload[name] = _split(getattr(realization, name))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_channels(path) -> ChannelRealization:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("version") != CHANNEL_DUMP_VERSION:
        raise StructuralError(f"unsupported channel dump version {payload.get('version')}")
    return ChannelRealization(**{name: _join(payload[name]) for name in _DUMP_FIELDS})
