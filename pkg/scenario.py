import hashlib
import json
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
)

from isac_errors import ScenarioSchemaError, ScenarioValidationError, StructuralError

# --- CONFIGURABLE CONSTANTS ---
SCHEMA_VERSION = 1
DEFAULT_SCENARIO = os.environ.get("ISAC_SCENARIO", "scenarios/default.json")
USERS_PER_UAV_RANGE = (3, 5)
TARGETS_PER_UAV_RANGE = (2, 4)
KINEMATIC_TOL = 1e-9

Position = Tuple[float, float, float]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class TimeGrid(_Frozen):
    total_duration_s: PositiveFloat
    slot_count: PositiveInt

    @property
    def slot_length(self) -> float:
        return self.total_duration_s / self.slot_count


class ArrayGeometry(_Frozen):
    antenna_count: PositiveInt
    wavelength_m: PositiveFloat
    element_spacing_m: PositiveFloat


class LosModelParams(_Frozen):
    c: PositiveFloat
    d: PositiveFloat
    alpha0_db: float
    kappa: NonNegativeFloat

    @property
    def alpha0(self) -> float:
        return 10.0 ** (self.alpha0_db / 10.0)


class FlightPowerParams(_Frozen):
    c0: PositiveFloat
    c1: PositiveFloat
    c2: PositiveFloat
    tip_speed: PositiveFloat
    fuselage_drag_ratio: PositiveFloat
    rotor_solidity: PositiveFloat
    air_density: PositiveFloat
    # "G" in the flight-power model; unrelated to the lifted beamformers
    rotor_disc_area: PositiveFloat
    hover_velocity: PositiveFloat


class ScenarioConfig(_Frozen):
    """One experiment. Files keep dB/degree values; linear/radian views are properties."""

    schema_version: int = SCHEMA_VERSION
    uav_count: PositiveInt
    users_per_uav: List[List[int]]
    targets_per_uav: List[List[int]]
    user_positions: List[Position]
    target_positions: List[Position]
    target_positions_per_slot: Optional[List[List[Position]]] = None
    start_position: Position
    finish_position: Position
    max_power_w: List[NonNegativeFloat]
    energy_threshold_j: List[PositiveFloat]
    crb_threshold_rad2: Union[PositiveFloat, List[List[List[PositiveFloat]]]]
    max_speed_mps: PositiveFloat
    min_altitude_m: float
    max_altitude_m: float
    min_separation_m: NonNegativeFloat
    noise_power_w: PositiveFloat
    radar_cross_section_dbsqm: Union[float, List[float]]
    area_size_m: PositiveFloat = 500.0
    speed_range_mps: Tuple[NonNegativeFloat, NonNegativeFloat] = (10.0, 20.0)
    heading_limit_deg: PositiveFloat = 75.0
    time_grid: TimeGrid
    array: ArrayGeometry
    los: LosModelParams
    flight: FlightPowerParams
    rng_seed: NonNegativeInt = 0

    @property
    def user_count(self) -> int:
        return len(self.user_positions)

    @property
    def target_count(self) -> int:
        return len(self.target_positions)

    @property
    def slot_count(self) -> int:
        return self.time_grid.slot_count

    @property
    def tau(self) -> float:
        return self.time_grid.slot_length

    @property
    def heading_limit_rad(self) -> float:
        return float(np.deg2rad(self.heading_limit_deg))

    @property
    def radar_cross_sections(self) -> np.ndarray:
        dbsqm = self.radar_cross_section_dbsqm
        if isinstance(dbsqm, list):
            values = np.asarray(dbsqm, dtype=float)
        else:
            values = np.full(self.target_count, float(dbsqm))
        return 10.0 ** (values / 10.0)

    def user_owner(self) -> np.ndarray:
        owner = np.full(self.user_count, -1, dtype=int)
        for u, users in enumerate(self.users_per_uav):
            owner[users] = u
        return owner

    def target_owner(self) -> np.ndarray:
        owner = np.full(self.target_count, -1, dtype=int)
        for u, targets in enumerate(self.targets_per_uav):
            owner[targets] = u
        return owner

    def comm_mask(self) -> np.ndarray:
        mask = np.zeros((self.uav_count, self.user_count), dtype=bool)
        for u, users in enumerate(self.users_per_uav):
            mask[u, users] = True
        return mask

    def sense_mask(self) -> np.ndarray:
        mask = np.zeros((self.uav_count, self.target_count), dtype=bool)
        for u, targets in enumerate(self.targets_per_uav):
            mask[u, targets] = True
        return mask

    def gamma_array(self) -> np.ndarray:
        """CRB thresholds as (U, K, N); inf where a target is not served by the UAV."""
        gamma = np.full((self.uav_count, self.target_count, self.slot_count), np.inf)
        for u, targets in enumerate(self.targets_per_uav):
            for local, k in enumerate(targets):
                if isinstance(self.crb_threshold_rad2, list):
                    gamma[u, k, :] = self.crb_threshold_rad2[u][local]
                else:
                    gamma[u, k, :] = self.crb_threshold_rad2
        return gamma

    def uniform_crb_threshold(self) -> float:
        if isinstance(self.crb_threshold_rad2, list):
            return float(np.median(np.concatenate([np.ravel(x) for x in self.crb_threshold_rad2])))
        return float(self.crb_threshold_rad2)

    def target_position(self, k: int, n: int) -> np.ndarray:
        if self.target_positions_per_slot is not None:
            return np.asarray(self.target_positions_per_slot[n][k], dtype=float)
        return np.asarray(self.target_positions[k], dtype=float)


@dataclass(frozen=True)
class UavState:
    position: np.ndarray
    horizontal_speed: float
    heading: float
    vertical_speed: float


@dataclass
class TrajectorySet:
    """positions[u, 0] is the start, positions[u, N] the finish; slot n flies n-1 -> n."""

    positions: np.ndarray
    horizontal_speed: np.ndarray
    heading: np.ndarray
    vertical_speed: np.ndarray

    @classmethod
    def from_positions(cls, positions, tau):
        positions = np.asarray(positions, dtype=float)
        delta = np.diff(positions, axis=1)
        horizontal = np.hypot(delta[..., 0], delta[..., 1]) / tau
        heading = np.arctan2(delta[..., 1], delta[..., 0])
        vertical = np.abs(delta[..., 2]) / tau
        return cls(positions, horizontal, heading, vertical)

    @property
    def uav_count(self):
        return self.positions.shape[0]

    @property
    def slot_count(self):
        return self.positions.shape[1] - 1

    def uav_state(self, u, n) -> UavState:
        return UavState(
            position=self.positions[u, n],
            horizontal_speed=float(self.horizontal_speed[u, n - 1]),
            heading=float(self.heading[u, n - 1]),
            vertical_speed=float(self.vertical_speed[u, n - 1]),
        )


@dataclass(frozen=True)
class KinematicResiduals:
    step: float
    endpoint: float
    altitude: float
    separation: float

    def feasible(self, tol=KINEMATIC_TOL):
        return max(self.step, self.endpoint, self.altitude, self.separation) <= tol

    def as_dict(self):
        return {
            "step": self.step,
            "endpoint": self.endpoint,
            "altitude": self.altitude,
            "separation": self.separation,
        }


def _schema_error(exc: ValidationError) -> ScenarioSchemaError:
    first = exc.errors()[0]
    path = ".".join(str(part) for part in first["loc"])
    return ScenarioSchemaError(first["msg"], field_path=path)


def check_invariants(cfg: ScenarioConfig) -> ScenarioConfig:
    U, N = cfg.uav_count, cfg.slot_count

    for name, value in (
        ("users_per_uav", cfg.users_per_uav),
        ("targets_per_uav", cfg.targets_per_uav),
        ("max_power_w", cfg.max_power_w),
        ("energy_threshold_j", cfg.energy_threshold_j),
    ):
        if len(value) != U:
            raise ScenarioValidationError(name, f"expected {U} entries, got {len(value)}")

    for name, partition, total in (
        ("user_partition", cfg.users_per_uav, cfg.user_count),
        ("target_partition", cfg.targets_per_uav, cfg.target_count),
    ):
        flat = [i for group in partition for i in group]
        if len(flat) != len(set(flat)):
            raise ScenarioValidationError(name, "partitions overlap between UAVs")
        if sorted(flat) != list(range(total)):
            raise ScenarioValidationError(name, f"partitions must cover indices 0..{total - 1} exactly")

    if cfg.min_altitude_m > cfg.max_altitude_m:
        raise ScenarioValidationError(
            "altitude_bounds",
            f"min_altitude_m {cfg.min_altitude_m} exceeds max_altitude_m {cfg.max_altitude_m}",
        )
    if cfg.min_altitude_m <= 0:
        raise ScenarioValidationError("altitude_bounds", "min_altitude_m must be positive")
    for name, point in (("start_position", cfg.start_position), ("finish_position", cfg.finish_position)):
        if not cfg.min_altitude_m <= point[2] <= cfg.max_altitude_m:
            raise ScenarioValidationError(name, f"altitude {point[2]} outside altitude bounds")

    ground = list(cfg.user_positions) + list(cfg.target_positions)
    if cfg.target_positions_per_slot is not None:
        if len(cfg.target_positions_per_slot) != N or any(
            len(slot) != cfg.target_count for slot in cfg.target_positions_per_slot
        ):
            raise ScenarioValidationError(
                "target_positions_per_slot", f"expected {N} slots of {cfg.target_count} positions"
            )
        ground += [p for slot in cfg.target_positions_per_slot for p in slot]
    if any(p[2] != 0 for p in ground):
        raise ScenarioValidationError("ground_altitude", "users and targets must have zero altitude")

    if isinstance(cfg.crb_threshold_rad2, list):
        gamma = cfg.crb_threshold_rad2
        shape_ok = len(gamma) == U and all(
            len(gamma[u]) == len(cfg.targets_per_uav[u]) and all(len(row) == N for row in gamma[u])
            for u in range(U)
        )
        if not shape_ok:
            raise ScenarioValidationError("crb_threshold_rad2", "per-slot thresholds must be shaped [U][K_u][N]")

    if isinstance(cfg.radar_cross_section_dbsqm, list) and len(cfg.radar_cross_section_dbsqm) != cfg.target_count:
        raise ScenarioValidationError("radar_cross_section_dbsqm", "one value per target required")

    low, high = cfg.speed_range_mps
    if low > high:
        raise ScenarioValidationError("speed_range_mps", "lower speed exceeds upper speed")
    if cfg.heading_limit_deg > 180:
        raise ScenarioValidationError("heading_limit_deg", "heading limit cannot exceed 180 degrees")
    return cfg


def parse_scenario(data: dict) -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise _schema_error(e) from e
    if cfg.schema_version != SCHEMA_VERSION:
        raise ScenarioSchemaError(
            f"unsupported schema version {cfg.schema_version} (expected {SCHEMA_VERSION})",
            field_path="schema_version",
        )
    return check_invariants(cfg)


def load_scenario(path) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioSchemaError(f"invalid JSON at line {e.lineno}: {e.msg}") from e
    return parse_scenario(data)


def save_scenario(cfg: ScenarioConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.model_dump_json(indent=2))
        f.write("\n")


def scenario_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def with_overrides(cfg: ScenarioConfig, **updates) -> ScenarioConfig:
    """Re-validates, unlike a bare model_copy."""
    return parse_scenario({**cfg.model_dump(), **updates})


def generate_random_scenario(
    seed: int,
    template: ScenarioConfig,
    users_range=USERS_PER_UAV_RANGE,
    targets_range=TARGETS_PER_UAV_RANGE,
) -> ScenarioConfig:
    check_invariants(template)
    rng = np.random.default_rng(seed)
    users_per_uav, targets_per_uav = [], []
    v_total = k_total = 0
    for _ in range(template.uav_count):
        v_count = int(rng.integers(users_range[0], users_range[1] + 1))
        k_count = int(rng.integers(targets_range[0], targets_range[1] + 1))
        users_per_uav.append(list(range(v_total, v_total + v_count)))
        targets_per_uav.append(list(range(k_total, k_total + k_count)))
        v_total += v_count
        k_total += k_count

    area = template.area_size_m
    user_xy = rng.uniform(0.0, area, size=(v_total, 2))
    target_xy = rng.uniform(0.0, area, size=(k_total, 2))
    rcs = template.radar_cross_section_dbsqm
    if isinstance(rcs, list):
        rcs = rcs[0]

    data = template.model_dump()
    data.update(
        users_per_uav=users_per_uav,
        targets_per_uav=targets_per_uav,
        user_positions=[(float(x), float(y), 0.0) for x, y in user_xy],
        target_positions=[(float(x), float(y), 0.0) for x, y in target_xy],
        target_positions_per_slot=None,
        crb_threshold_rad2=template.uniform_crb_threshold(),
        radar_cross_section_dbsqm=float(rcs),
        rng_seed=int(seed),
    )
    return parse_scenario(data)


def initial_trajectory(cfg: ScenarioConfig) -> TrajectorySet:
    U, N = cfg.uav_count, cfg.slot_count
    start = np.asarray(cfg.start_position, dtype=float)
    finish = np.asarray(cfg.finish_position, dtype=float)
    frac = np.arange(N + 1) / N
    positions = np.empty((U, N + 1, 3))
    for u in range(U):
        if U == 1:
            level = 0.5 * (cfg.min_altitude_m + cfg.max_altitude_m)
        else:
            level = cfg.min_altitude_m + (cfg.max_altitude_m - cfg.min_altitude_m) * u / (U - 1)
        positions[u, :, :2] = start[:2] + np.outer(frac, finish[:2] - start[:2])
        positions[u, :, 2] = level
        positions[u, 0] = start
        positions[u, N] = finish
    return TrajectorySet.from_positions(positions, cfg.tau)


def step_excess(previous, current, cfg: ScenarioConfig) -> np.ndarray:
    """Per-UAV amount by which the move previous -> current exceeds a_max * tau."""
    lengths = np.linalg.norm(np.asarray(current) - np.asarray(previous), axis=-1)
    return np.maximum(0.0, lengths - cfg.max_speed_mps * cfg.tau)


def altitude_excess(altitudes, cfg: ScenarioConfig) -> np.ndarray:
    altitudes = np.asarray(altitudes, dtype=float)
    return np.maximum.reduce(
        [np.zeros_like(altitudes), cfg.min_altitude_m - altitudes, altitudes - cfg.max_altitude_m]
    )


def separation_shortfall(slot_positions, d_min) -> float:
    """Largest d_min - distance over UAV pairs at one slot, floored at 0."""
    slot_positions = np.asarray(slot_positions, dtype=float)
    worst = 0.0
    for a in range(len(slot_positions)):
        for b in range(a + 1, len(slot_positions)):
            dist = float(np.linalg.norm(slot_positions[a] - slot_positions[b]))
            worst = max(worst, d_min - dist)
    return worst


def validate_kinematics(traj: TrajectorySet, cfg: ScenarioConfig) -> KinematicResiduals:
    U, N = cfg.uav_count, cfg.slot_count
    if traj.positions.shape != (U, N + 1, 3):
        raise StructuralError(
            f"trajectory shape {traj.positions.shape} does not match (U, N+1, 3) = {(U, N + 1, 3)}"
        )
    pos = traj.positions
    step = float(step_excess(pos[:, :-1], pos[:, 1:], cfg).max())
    start = np.asarray(cfg.start_position, dtype=float)
    finish = np.asarray(cfg.finish_position, dtype=float)
    endpoint = float(
        max(np.linalg.norm(pos[:, 0] - start, axis=1).max(), np.linalg.norm(pos[:, N] - finish, axis=1).max())
    )
    altitude = float(altitude_excess(pos[:, :, 2], cfg).max())
    # start and finish are shared by every UAV, so only interior slots are checked
    separation = 0.0
    for n in range(1, N):
        separation = max(separation, separation_shortfall(pos[:, n], cfg.min_separation_m))
    return KinematicResiduals(step=step, endpoint=endpoint, altitude=altitude, separation=separation)
