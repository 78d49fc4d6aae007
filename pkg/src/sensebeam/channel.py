"""Rician fading channels, ULA steering vectors, path loss and echo reflection draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import NetworkGeometry, ScenarioConfig, stream


def array_response(theta, num_antennas: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """ULA steering vector: entry n is exp(j 2 pi (d/lambda) n sin(theta)).

    ``theta`` may be a scalar or an array; an extra trailing axis of length
    ``num_antennas`` is appended.
    """
    n = np.arange(num_antennas)
    theta = np.asarray(theta, float)
    return np.exp(2j * np.pi * d_over_lambda * np.sin(theta)[..., None] * n)


def array_response_derivative(theta, num_antennas: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Entrywise derivative of :func:`array_response` with respect to theta."""
    n = np.arange(num_antennas)
    theta = np.asarray(theta, float)
    phase_rate = 2j * np.pi * d_over_lambda * np.cos(theta)[..., None] * n
    return phase_rate * array_response(theta, num_antennas, d_over_lambda)


def path_loss(distance: float, wavelength: float) -> float:
    """Free-space power gain beta = lambda^2 / (4 pi R)^2."""
    if np.any(np.asarray(distance) <= 0):
        raise ValueError("distance must be positive")
    return wavelength**2 / (4.0 * np.pi * np.asarray(distance)) ** 2


def nlos_covariance(beta: float, num_antennas: int) -> np.ndarray:
    """Spatial covariance of the NLOS component; spatially white by default.

    Any Hermitian PSD matrix with trace/N equal to beta is admissible; the
    white profile is the simplest one satisfying that constraint.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return beta * np.eye(num_antennas, dtype=complex)


def user_angles(geometry: NetworkGeometry, p_x: float, p_y: float) -> np.ndarray:
    """Angle of the user seen from each AP, arctan((p_x - p_l) / p_y)."""
    return np.arctan((p_x - geometry.ap_positions) / p_y)


def user_ranges(geometry: NetworkGeometry, p_x: float, p_y: float) -> np.ndarray:
    return np.hypot(p_x - geometry.ap_positions, p_y)


@dataclass
class ChannelRealization:
    """One coherence block of channels between every AP and every user.

    All arrays are indexed (ap, user); vectors carry a trailing antenna axis.
    """

    beta: np.ndarray      # (L, K) large-scale gains
    theta: np.ndarray     # (L, K) angles, rad
    phi: np.ndarray       # (L, K) LOS phases
    h_los: np.ndarray     # (L, K, N)  e^{j phi} sqrt(beta) a(theta)
    h_nlos: np.ndarray    # (L, K, N)  raw NLOS draw, covariance beta I
    rician_factor: float

    @property
    def h(self) -> np.ndarray:
        """Composite Rician channel with the standard LOS/NLOS mixture weights."""
        kr = self.rician_factor
        return (np.sqrt(kr / (1.0 + kr)) * self.h_los
                + np.sqrt(1.0 / (1.0 + kr)) * self.h_nlos)

    def stacked(self, user: int) -> np.ndarray:
        """Channel of one user stacked over all APs, shape (L*N,)."""
        return self.h[:, user, :].reshape(-1)


def draw_channel(geometry: NetworkGeometry, positions: np.ndarray, p_y: float,
                 rician_factor: float, wavelength: float,
                 rng: np.random.Generator) -> ChannelRealization:
    """Draw the Rician channels for one coherence block.

    ``positions`` holds the user x coordinates, shape (K,).  LOS phases are
    uniform, the NLOS part is a white complex Gaussian with per-pair power
    beta, and the mixture weights follow the Rician factor.
    """
    if p_y == 0:
        raise ValueError("p_y must be nonzero")
    positions = np.atleast_1d(np.asarray(positions, float))
    L, N = geometry.num_aps, geometry.antennas_per_ap
    K = positions.size
    dx = positions[None, :] - geometry.ap_positions[:, None]   # (L, K)
    ranges = np.hypot(dx, p_y)
    beta = path_loss(ranges, wavelength)
    theta = np.arctan(dx / p_y)
    phi = rng.uniform(-np.pi, np.pi, size=(L, K))
    a = array_response(theta, N, geometry.antenna_spacing_ratio)   # (L, K, N)
    h_los = np.exp(1j * phi)[..., None] * np.sqrt(beta)[..., None] * a
    noise = rng.standard_normal((L, K, N)) + 1j * rng.standard_normal((L, K, N))
    h_nlos = np.sqrt(beta / 2.0)[..., None] * noise
    return ChannelRealization(beta=beta, theta=theta, phi=phi, h_los=h_los,
                              h_nlos=h_nlos, rician_factor=rician_factor)


@dataclass
class ReflectionCoefficients:
    """Swerling-I echo reflection coefficients for every (rx, tx, target) triple.

    ``sigma_bar`` already carries the bistatic radar-equation normalization
    sqrt(4 pi * rcs) / lambda, so that together with the one-way gains
    sqrt(beta_rx * beta_tx) in the channel product the two-way echo power
    follows the bistatic radar equation.
    """

    rcs: np.ndarray          # (L, L, K) RCS power draws, m^2, per coherence block
    phase: np.ndarray        # (L, L, K) uniform phases, redrawn per epoch
    sigma_bar: np.ndarray    # (L, L, K) complex, indexed (rx, tx, target)


def reflection_second_moment(rcs_mean: float, wavelength: float) -> float:
    """E{|sigma_bar|^2} for the Swerling-I draw at the given mean RCS."""
    return 4.0 * np.pi * rcs_mean / wavelength**2


def draw_reflection(num_aps: int, num_users: int, rcs_mean: float, wavelength: float,
                    rng_block: np.random.Generator,
                    rng_epoch: np.random.Generator) -> ReflectionCoefficients:
    """Draw reflection coefficients: RCS held per coherence block, phase per epoch."""
    if rcs_mean <= 0:
        raise ValueError("rcs_mean must be positive")
    shape = (num_aps, num_aps, num_users)
    rcs = rng_block.exponential(rcs_mean, size=shape)
    phase = rng_epoch.uniform(-np.pi, np.pi, size=shape)
    sigma_bar = np.sqrt(4.0 * np.pi * rcs) / wavelength * np.exp(1j * phase)
    return ReflectionCoefficients(rcs=rcs, phase=phase, sigma_bar=sigma_bar)


def refresh_reflection_phase(refl: ReflectionCoefficients,
                             rng_epoch: np.random.Generator) -> ReflectionCoefficients:
    """Redraw only the phases, keeping the dwell's RCS powers."""
    phase = rng_epoch.uniform(-np.pi, np.pi, size=refl.rcs.shape)
    sigma_bar = np.abs(refl.sigma_bar) * np.exp(1j * phase)
    return ReflectionCoefficients(rcs=refl.rcs, phase=phase, sigma_bar=sigma_bar)


def channels_for_epoch(config: ScenarioConfig, geometry: NetworkGeometry,
                       positions: np.ndarray, epoch: int
                       ) -> tuple[ChannelRealization, ReflectionCoefficients]:
    """Channels and reflections for one epoch under the block-fading policy.

    NLOS draws, LOS phases and RCS powers are redrawn at coherence-block
    boundaries; reflection phases are redrawn every epoch.  Stream keys depend
    only on (seed, block/epoch), so any two runs of the same scenario see
    identical realizations regardless of what the scheduler decides.
    """
    block = epoch // config.epochs_per_coherence_block
    rng_block = stream(config.rng_seed, "channel", block)
    chan = draw_channel(geometry, positions, config.road_offset,
                        config.rician_factor, config.wavelength, rng_block)
    rng_rcs = stream(config.rng_seed, "rcs", block)
    rng_phase = stream(config.rng_seed, "reflection_phase", epoch)
    refl = draw_reflection(config.num_aps, config.num_users, config.rcs_mean,
                           config.wavelength, rng_rcs, rng_phase)
    return chan, refl
