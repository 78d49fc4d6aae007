"""Scenario configuration, network geometry, ground-truth motion and RNG policy.

A scenario bundles everything that is fixed for one simulated deployment:
AP layout on a line, user kinematics, OFDM numerology, powers and the
bookkeeping of the epoch clock.  All randomness is derived from a single
seed through named, per-purpose streams so that independent runs with the
same seed are bit-identical and different subsystems never share a stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

SPEED_OF_LIGHT = 2.99792458e8  # m/s


class ScenarioError(ValueError):
    """Raised when a scenario document cannot be parsed or violates an invariant."""


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** (p_dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete simulation configuration; defaults reproduce the reference setup."""

    num_aps: int = 20
    antennas_per_ap: int = 8
    num_users: int = 4
    carrier_frequency: float = 30e9          # Hz
    epoch_step: float = 0.01                 # s
    process_noise: float = 1.0               # m^2/s^4 (acceleration noise)
    noise_power: float = dbm_to_watt(-95.0)  # W
    per_ap_power: float = 0.2                # W
    rician_factor: float = 10.0
    power_fraction: float = 0.05             # mu_p, share of power for sensing
    subcarrier_fraction: float = 0.05        # mu_c, share of subcarriers for sensing
    utility_threshold: float = 0.95          # rho_th for the candidate-set cutoff
    num_subcarriers: int = 64
    num_symbols: int = 16
    cp_length: int = 8
    subcarrier_spacing: float = 15e3         # Hz
    num_epochs: int = 5000
    epochs_per_coherence_block: int = 5
    rcs_mean: float = 5.0                    # m^2
    outage_probability: float = 9.248240214547732e-4
    road_offset: float = 40.0                # p_y, m
    rng_seed: int = 0
    velocity: float = 20.0                   # m/s
    ap_span: float = 2000.0                  # APs at (span/L) * l, l = 1..L
    antenna_spacing_ratio: float = 0.5       # d / lambda
    init_position_variance: float = 1000.0   # P0[0,0], m^2
    init_velocity_variance: float = 25.0     # P0[1,1], (m/s)^2
    user_positions: tuple[float, ...] | None = None  # explicit start x, else uniform

    def __post_init__(self):
        self.validate()

    def validate(self):
        c = self
        checks = [
            (c.num_aps >= 2, "num_aps", "need at least 2 APs (one Tx and one Rx)"),
            (c.antennas_per_ap >= 1, "antennas_per_ap", "must be >= 1"),
            (c.num_users >= 1, "num_users", "must be >= 1"),
            (c.carrier_frequency > 0, "carrier_frequency", "must be > 0"),
            (c.epoch_step > 0, "epoch_step", "must be > 0"),
            (c.process_noise >= 0, "process_noise", "must be >= 0"),
            (c.noise_power > 0, "noise_power", "must be > 0"),
            (c.per_ap_power > 0, "per_ap_power", "must be > 0"),
            (c.rician_factor >= 0, "rician_factor", "must be >= 0"),
            (0 <= c.power_fraction < 1, "power_fraction", "must be in [0, 1)"),
            (0 < c.subcarrier_fraction < 1, "subcarrier_fraction", "must be in (0, 1)"),
            (0 < c.utility_threshold < 1, "utility_threshold", "must be in (0, 1)"),
            (c.num_subcarriers >= 1, "num_subcarriers", "must be >= 1"),
            (c.num_symbols >= 1, "num_symbols", "must be >= 1"),
            (0 <= c.cp_length < c.num_subcarriers, "cp_length", "must satisfy 0 <= N_cp < N_c"),
            (c.subcarrier_spacing > 0, "subcarrier_spacing", "must be > 0"),
            (c.num_epochs >= 0, "num_epochs", "must be >= 0"),
            (c.epochs_per_coherence_block >= 1, "epochs_per_coherence_block", "must be >= 1"),
            (c.rcs_mean > 0, "rcs_mean", "must be > 0"),
            (0 < c.outage_probability < 1, "outage_probability", "must be in (0, 1)"),
            (c.road_offset > 0, "road_offset", "p_y must be > 0 for a well-defined angle"),
            (c.ap_span > 0, "ap_span", "must be > 0"),
            (c.antenna_spacing_ratio > 0, "antenna_spacing_ratio", "must be > 0"),
            (c.init_position_variance >= 0, "init_position_variance", "must be >= 0"),
            (c.init_velocity_variance >= 0, "init_velocity_variance", "must be >= 0"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ScenarioError(f"{name}: {msg} (got {getattr(c, name)!r})")
        if c.user_positions is not None and len(c.user_positions) != c.num_users:
            raise ScenarioError(
                f"user_positions: expected {c.num_users} entries, got {len(c.user_positions)}"
            )

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def symbol_duration(self) -> float:
        """OFDM symbol duration including the cyclic prefix, in seconds."""
        nc, ncp, df = self.num_subcarriers, self.cp_length, self.subcarrier_spacing
        return 1.0 / df + ncp / (nc * df)

    @property
    def cp_delay_budget(self) -> float:
        """Largest bistatic delay representable without violating the CP guard."""
        return self.cp_length / (self.num_subcarriers * self.subcarrier_spacing)


@dataclass(frozen=True)
class NetworkGeometry:
    """AP positions on the x-axis plus array geometry shared by every AP."""

    ap_positions: np.ndarray   # (L,) strictly increasing x coordinates, m
    antennas_per_ap: int
    wavelength: float          # m
    antenna_spacing_ratio: float = 0.5  # d / lambda

    def __post_init__(self):
        pos = np.asarray(self.ap_positions, float)
        object.__setattr__(self, "ap_positions", pos)
        if pos.ndim != 1 or pos.size < 1:
            raise ScenarioError("ap_positions: need a 1-D array of AP x coordinates")
        if pos.size > 1 and not np.all(np.diff(pos) > 0):
            raise ScenarioError("ap_positions: must be strictly increasing")

    @property
    def num_aps(self) -> int:
        return self.ap_positions.size


def geometry_from_config(config: ScenarioConfig) -> NetworkGeometry:
    L = config.num_aps
    positions = config.ap_span / L * np.arange(1, L + 1)
    return NetworkGeometry(
        ap_positions=positions,
        antennas_per_ap=config.antennas_per_ap,
        wavelength=config.wavelength,
        antenna_spacing_ratio=config.antenna_spacing_ratio,
    )


# Aliases so the scenario file can use the symbol names of the parameter table.
_KEY_ALIASES = {
    "L": "num_aps",
    "L_T": "num_aps",
    "N": "antennas_per_ap",
    "K": "num_users",
    "f_c": "carrier_frequency",
    "delta_T": "epoch_step",
    "sigma_q2": "process_noise",
    "sigma_n2": "noise_power",
    "rho_d": "per_ap_power",
    "K_R": "rician_factor",
    "mu_p": "power_fraction",
    "mu_c": "subcarrier_fraction",
    "rho_th": "utility_threshold",
    "N_c": "num_subcarriers",
    "N_s": "num_symbols",
    "N_cp": "cp_length",
    "delta_f": "subcarrier_spacing",
    "p_y": "road_offset",
    "v": "velocity",
    "epsilon": "outage_probability",
    "seed": "rng_seed",
}


def load_scenario(source) -> tuple[ScenarioConfig, NetworkGeometry]:
    """Build a configuration from a YAML document, path, or mapping.

    Omitted keys fall back to the defaults above.  ``noise_power_dbm`` may be
    given instead of ``noise_power`` (watts).  Raises :class:`ScenarioError`
    on unknown keys, parse failures, or invariant violations.
    """
    if isinstance(source, ScenarioConfig):
        return source, geometry_from_config(source)
    if isinstance(source, (str, Path)):
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"scenario document does not parse: {exc}") from exc
        raw = raw or {}
    elif isinstance(source, dict):
        raw = dict(source)
    elif source is None:
        raw = {}
    else:
        raise ScenarioError(f"unsupported scenario source type: {type(source)!r}")
    if not isinstance(raw, dict):
        raise ScenarioError("scenario document must be a mapping at top level")

    known = {f.name for f in fields(ScenarioConfig)}
    kwargs = {}
    for key, value in raw.items():
        name = _KEY_ALIASES.get(key, key)
        if name == "noise_power_dbm":
            kwargs["noise_power"] = dbm_to_watt(float(value))
            continue
        if name not in known:
            raise ScenarioError(f"unknown scenario key: {key!r}")
        if name == "user_positions" and value is not None:
            value = tuple(float(x) for x in value)
        kwargs[name] = value
    try:
        config = ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ScenarioError(f"invalid scenario value: {exc}") from exc
    return config, geometry_from_config(config)


def with_overrides(config: ScenarioConfig, **overrides) -> ScenarioConfig:
    return replace(config, **overrides)


# ---------------------------------------------------------------------------
# Deterministic stream policy: every consumer owns a named stream derived from
# the scenario seed, so simulation branches never perturb each other's draws.

_STREAM_IDS = {
    "truth": 1,
    "init": 2,
    "channel": 3,
    "rcs": 4,
    "noise": 5,
    "data": 6,
    "reflection_phase": 7,
}


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Independent generator for stream `name` and integer subkey `key`."""
    try:
        sid = _STREAM_IDS[name]
    except KeyError:
        raise KeyError(f"unknown rng stream {name!r}") from None
    entropy = (int(seed) & 0xFFFFFFFF, sid) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Ground-truth motion


@dataclass
class GroundTruthState:
    """True kinematic state of one user: x position and velocity."""

    p_x: float
    v_x: float


def transition_matrix(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


def process_noise_cov(dt: float, sigma_q2: float) -> np.ndarray:
    """Covariance of the constant-velocity process noise over one step."""
    return sigma_q2 * np.array(
        [[dt**4 / 4.0, dt**3 / 2.0], [dt**3 / 2.0, dt**2]]
    )


def step_ground_truth(state: GroundTruthState, dt: float, sigma_q2: float,
                      rng: np.random.Generator) -> GroundTruthState:
    """Propagate the true state one epoch under the constant-velocity model.

    The process noise is the white-acceleration draw ``w = sigma_q * n * [dt^2/2, dt]``
    with ``n ~ N(0, 1)``, whose covariance is exactly :func:`process_noise_cov`.
    """
    if dt <= 0:
        raise ValueError("epoch step must be positive")
    x = transition_matrix(dt) @ np.array([state.p_x, state.v_x])
    n = rng.standard_normal()
    w = np.sqrt(sigma_q2) * n * np.array([dt**2 / 2.0, dt])
    x = x + w
    return GroundTruthState(p_x=float(x[0]), v_x=float(x[1]))


@dataclass
class UserSeed:
    """Initial truth plus the EKF prior for one user."""

    truth: GroundTruthState
    prior_mean: np.ndarray   # (2,)
    prior_cov: np.ndarray    # (2, 2)


def init_users(config: ScenarioConfig) -> list[UserSeed]:
    """Draw start positions and statistically consistent EKF priors.

    Ground-truth positions are uniform over the AP span unless the scenario
    pins them explicitly.  The prior mean is the truth plus a zero-mean draw
    with the prior covariance, so the stated initial covariance is honest.
    """
    p0 = np.diag([config.init_position_variance, config.init_velocity_variance])
    seeds = []
    for k in range(config.num_users):
        rng = stream(config.rng_seed, "init", k)
        if config.user_positions is not None:
            px = float(config.user_positions[k])
        else:
            px = float(rng.uniform(0.0, config.ap_span))
        truth = GroundTruthState(p_x=px, v_x=config.velocity)
        mean = np.array([truth.p_x, truth.v_x]) + np.sqrt(np.diag(p0)) * rng.standard_normal(2)
        seeds.append(UserSeed(truth=truth, prior_mean=mean, prior_cov=p0.copy()))
    return seeds


# ---------------------------------------------------------------------------
# Epoch clock


@dataclass
class EpochClock:
    """Tracks the epoch index and each user's last-sensed epoch / service state."""

    num_users: int
    epoch: int = 0
    last_sensed: list[int] = field(default_factory=list)
    service_state: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.last_sensed:
            self.last_sensed = [-1] * self.num_users
        if not self.service_state:
            self.service_state = ["off"] * self.num_users

    def advance(self):
        self.epoch += 1

    def mark_sensed(self, user: int):
        if self.epoch < self.last_sensed[user]:
            raise ValueError("epoch clock ran backwards")
        self.last_sensed[user] = self.epoch
        self.service_state[user] = "sensing"

    def mark_on(self, user: int):
        self.service_state[user] = "on"
