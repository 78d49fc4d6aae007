"""Predictive channel construction, MMSE/ZF/MR precoders, power split and pairing.

Precoders are built from the tracked state only: the predicted angle gives
the steering direction, the predicted range gives the path-loss scale, and
the filter covariance enters as a first-order channel-error covariance so
that the MMSE solution accounts for how uncertain each user's direction is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import array_response, array_response_derivative, path_loss
from .scenario import NetworkGeometry
from .tracking import EkfState, angle_from_state
from .waveform import SCHEME_SES, normalize_scheme


class BeamformingError(RuntimeError):
    pass


@dataclass
class PredictedChannel:
    """LOS channel of one user toward the Tx APs as implied by its track."""

    h_bar: np.ndarray       # (T*N,) stacked sqrt(beta_hat) a(theta_hat)
    beta_hat: np.ndarray    # (T,)
    error_cov: np.ndarray   # (T*N, T*N) block-diagonal first-order error covariance


def predicted_channel(track: EkfState, geometry: NetworkGeometry, tx_aps: np.ndarray,
                      p_y: float, wavelength: float) -> PredictedChannel:
    """Steer at the tracked angle, scale by the tracked range's path loss.

    The error covariance per Tx AP is var(theta) * beta * a'(theta) a'(theta)^H,
    the first-order image of the angle uncertainty in channel space.
    """
    tx_aps = np.asarray(tx_aps, int)
    n = geometry.antennas_per_ap
    ratio = geometry.antenna_spacing_ratio
    t_count = tx_aps.size
    h_parts, betas, cov_blocks = [], [], []
    for t, ap in enumerate(tx_aps):
        theta, var_theta = angle_from_state(track, geometry.ap_positions[ap], p_y)
        delta = track.mean[0] - geometry.ap_positions[ap]
        r_hat = np.hypot(delta, p_y)
        beta = path_loss(r_hat, wavelength)
        a = array_response(theta, n, ratio)
        da = array_response_derivative(theta, n, ratio)
        h_parts.append(np.sqrt(beta) * a)
        betas.append(beta)
        cov_blocks.append(var_theta * beta * np.outer(da, da.conj()))
    error_cov = np.zeros((t_count * n, t_count * n), complex)
    for t in range(t_count):
        error_cov[t * n:(t + 1) * n, t * n:(t + 1) * n] = cov_blocks[t]
    return PredictedChannel(h_bar=np.concatenate(h_parts),
                            beta_hat=np.array(betas), error_cov=error_cov)


def mmse_precoder(channels: list[PredictedChannel], q: np.ndarray, rician_factor: float,
                  noise_power: float) -> np.ndarray:
    """Unnormalized MMSE precoders for every user, rows of shape (T*N,).

    Solves the virtual-uplink problem with the predicted LOS outer products,
    the channel-error covariances and the NLOS covariances (beta_hat I),
    each user weighted by its normalized power q.  The downlink convention is
    h^T w, so the Hermitian-form solution is conjugated on the way out: for a
    single user at a high Rician factor this reduces to conjugate
    beamforming, and with vanishing error terms it approaches zero forcing at
    high SNR.
    """
    k_users = len(channels)
    if q.shape != (k_users,):
        raise BeamformingError("one power weight per user is required")
    kr = rician_factor
    dim = channels[0].h_bar.size
    reg = np.zeros((dim, dim), complex)
    for i, ch in enumerate(channels):
        if ch.h_bar.size != dim:
            raise BeamformingError("all predicted channels must share the Tx set")
        los = np.outer(ch.h_bar, ch.h_bar.conj()) + ch.error_cov
        n = dim // ch.beta_hat.size
        r_nlos = np.kron(np.diag(ch.beta_hat), np.eye(n))
        reg += q[i] * (kr / (1.0 + kr) * los + 1.0 / (1.0 + kr) * r_nlos)
    reg += noise_power * np.eye(dim)
    rhs = np.stack([np.sqrt(kr / (1.0 + kr)) * ch.h_bar for ch in channels], axis=1)
    try:
        sol = np.linalg.solve(reg, rhs)
    except np.linalg.LinAlgError as exc:   # cannot happen with noise_power > 0
        raise BeamformingError(f"singular MMSE system: {exc}") from exc
    w = (q[:, None] * sol.T).conj()
    return w


def mr_precoder(channels: list[PredictedChannel]) -> np.ndarray:
    """Maximum-ratio directions: the conjugate of each predicted channel."""
    return np.stack([ch.h_bar.conj() for ch in channels])


def zf_precoder(channels: list[PredictedChannel]) -> np.ndarray:
    """Zero-forcing rows: h_bar_i^T w_k = delta_ik via the right pseudo-inverse."""
    h = np.stack([ch.h_bar for ch in channels])        # (K, T*N)
    gram = h @ h.conj().T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise BeamformingError("stacked predicted channel matrix is rank deficient")
    # rows w_k = conj(G^{-1} H)_k satisfy H W^T = G G^{-1} = I for Hermitian G
    return np.conj(np.linalg.solve(gram, h))


def power_allocation(beta_hat_totals: np.ndarray, per_ap_power: float,
                     active_users: np.ndarray) -> np.ndarray:
    """Square-root-of-path-loss power shares over the active users.

    ``beta_hat_totals[k]`` is the user's predicted path gain summed over the
    Tx APs.  Shares are proportional to the square root of that total, scaled
    so the shares of the active users sum to the per-AP budget.
    """
    active_users = np.asarray(active_users, int)
    if active_users.size == 0:
        raise BeamformingError("power allocation needs at least one active user")
    roots = np.sqrt(np.asarray(beta_hat_totals, float))
    denom = roots[active_users].sum()
    if denom <= 0:
        raise BeamformingError("all predicted path gains vanish")
    return per_ap_power * roots / denom


@dataclass
class PrecoderBank:
    """Normalized per-user precoders with their sensing/communication split.

    ``w_comm``/``w_sens`` are (K, L*N) stacked over every AP with zeros at
    non-transmitting APs, so downstream masking is idempotent.
    """

    w_total: np.ndarray
    w_comm: np.ndarray
    w_sens: np.ndarray
    rho: np.ndarray
    tx_aps: np.ndarray
    num_antennas: int

    def slices(self, which: str = "total") -> np.ndarray:
        """Per-AP view of the chosen precoder set, shape (L, K, N)."""
        w = {"total": self.w_total, "comm": self.w_comm, "sens": self.w_sens}[which]
        k, dim = w.shape
        return w.reshape(k, -1, self.num_antennas).transpose(1, 0, 2)


def normalize_precoders(w_bar: np.ndarray, rho: np.ndarray, mu_p: float,
                        tx_aps: np.ndarray, num_aps: int, num_antennas: int,
                        scheme: str, active_users: np.ndarray | None = None) -> PrecoderBank:
    """Scale each user's precoder to its power share and split it by function.

    After normalization the per-user transmit power summed over the Tx APs is
    exactly rho_k.  Shared-subcarrier schemes split amplitudes into
    sqrt(mu_p) sensing and sqrt(1-mu_p) communication parts; under separate
    subcarriers the disjoint bands already realize the power split, so both
    parts keep the full vector.
    """
    scheme = normalize_scheme(scheme)
    k_users, dim = w_bar.shape
    tx_aps = np.asarray(tx_aps, int)
    if dim != tx_aps.size * num_antennas:
        raise BeamformingError("precoder length does not match the Tx set")
    if active_users is None:
        active_users = np.arange(k_users)
    w_full = np.zeros((k_users, num_aps * num_antennas), complex)
    for k in range(k_users):
        norm2 = float(np.vdot(w_bar[k], w_bar[k]).real)
        if k in active_users:
            if norm2 <= 0:
                raise BeamformingError(f"zero-norm precoder for active user {k}")
            scaled = np.sqrt(rho[k] / norm2) * w_bar[k]
        else:
            scaled = np.zeros(dim, complex)
        for t, ap in enumerate(tx_aps):
            w_full[k, ap * num_antennas:(ap + 1) * num_antennas] = \
                scaled[t * num_antennas:(t + 1) * num_antennas]
    if scheme == SCHEME_SES:
        w_comm = w_full.copy()
        w_sens = w_full.copy()
    else:
        w_comm = np.sqrt(1.0 - mu_p) * w_full
        w_sens = np.sqrt(mu_p) * w_full
    return PrecoderBank(w_total=w_full, w_comm=w_comm, w_sens=w_sens,
                        rho=np.asarray(rho, float), tx_aps=tx_aps,
                        num_antennas=num_antennas)


def per_ap_load(bank: PrecoderBank, comm_users: np.ndarray, sensing_users: np.ndarray,
                comm_weight: float = 1.0, sens_weight: float = 1.0) -> np.ndarray:
    """Average transmit power per AP with the per-function duty weights.

    Shared-subcarrier banks already carry the power split in their amplitudes
    (weights 1); separate subcarriers occupy disjoint bands, so the weights
    are the band fractions.
    """
    n = bank.num_antennas
    comm = bank.w_comm.reshape(bank.w_comm.shape[0], -1, n)
    sens = bank.w_sens.reshape(bank.w_sens.shape[0], -1, n)
    load = np.zeros(comm.shape[1])
    for k in np.asarray(comm_users, int):
        load += comm_weight * np.sum(np.abs(comm[k]) ** 2, axis=1)
    for k in np.asarray(sensing_users, int):
        load += sens_weight * np.sum(np.abs(sens[k]) ** 2, axis=1)
    return load


# ---------------------------------------------------------------------------
# Target-user pairing for the shared-waveform scheme


def pair_targets_shared_waveform(channels: np.ndarray, w_sens: np.ndarray,
                                 comm_users: np.ndarray, sensing_users: np.ndarray
                                 ) -> tuple[dict[int, list[int]], bool]:
    """Assign each sensing target the data stream of its best-aligned user.

    The alignment score of (user k, target i) is the power user k receives
    from target i's sensing beam over the power every other active user
    receives from it.  Returns the map user -> targets and a flag that is
    True when all denominators vanished and the numerator decided alone.
    """
    comm_users = np.asarray(comm_users, int)
    sensing_users = np.asarray(sensing_users, int)
    if comm_users.size == 0:
        raise BeamformingError("pairing needs at least one active communication user")
    pairing: dict[int, list[int]] = {int(k): [] for k in comm_users}
    degenerate = False
    for i in sensing_users:
        gains = np.array([abs(channels[k] @ w_sens[i]) ** 2 for k in comm_users])
        scores = np.empty(comm_users.size)
        for pos in range(comm_users.size):
            denom = gains.sum() - gains[pos]
            if denom > 0:
                scores[pos] = gains[pos] / denom
            else:
                scores[pos] = gains[pos]
                degenerate = True
        best = comm_users[int(np.argmax(scores))]
        pairing[int(best)].append(int(i))
    return pairing, degenerate
