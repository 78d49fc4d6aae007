"""Per-epoch SINR and spectral efficiency for the three transmission schemes."""

from __future__ import annotations

import numpy as np

from .waveform import SCHEME_SES, SCHEME_SS_SEW, SCHEME_SS_SW, normalize_scheme


def ap_mask(omega: np.ndarray, num_antennas: int) -> np.ndarray:
    """Diagonal of (I - Omega) kron I_N: keeps only transmitting APs' antennas."""
    omega = np.asarray(omega)
    return np.repeat(1.0 - omega, num_antennas)


def effective_channels(channels: np.ndarray, precoders: np.ndarray, omega: np.ndarray,
                       num_antennas: int) -> np.ndarray:
    """b[k, i] = h_k^T (I - Omega) kron I w_i for stacked channels and precoders.

    Rows of ``channels`` and ``precoders`` are stacked over all APs; Rx APs
    contribute nothing because the mask zeroes their antenna blocks.
    """
    mask = ap_mask(omega, num_antennas)
    return (channels * mask) @ precoders.T


def sinr_shared(b_comm: np.ndarray, b_sens: np.ndarray, noise_power: float,
                scheme: str, comm_users: np.ndarray, sensing_users: np.ndarray,
                pairing: dict[int, list[int]] | None = None) -> dict[int, float]:
    """Communication SINR per active user under the shared-subcarrier schemes.

    ``b_comm[k, i]`` is user k's effective channel toward user i's data
    precoder and ``b_sens[k, i]`` toward sensing target i's beam.  With a
    shared waveform, beams paired to user k add coherently to its signal and
    leave the interference sum; with separate waveforms every sensing beam
    interferes.
    """
    scheme = normalize_scheme(scheme)
    if scheme == SCHEME_SES:
        raise ValueError("use sinr_separate for the separate-subcarrier scheme")
    comm_users = np.asarray(comm_users, int)
    sensing_users = np.asarray(sensing_users, int)
    out = {}
    for k in comm_users:
        own = b_comm[k, k]
        interference = sum(abs(b_comm[k, i]) ** 2 for i in comm_users if i != k)
        if scheme == SCHEME_SS_SW and pairing is not None:
            mine = pairing.get(int(k), [])
            own = own + sum(b_sens[k, i] for i in mine)
            interference += sum(abs(b_sens[k, i]) ** 2
                                for i in sensing_users if i not in mine)
        else:
            interference += sum(abs(b_sens[k, i]) ** 2 for i in sensing_users)
        out[int(k)] = abs(own) ** 2 / (interference + noise_power)
    return out


def sinr_separate(b_comm: np.ndarray, noise_power: float,
                  comm_users: np.ndarray) -> dict[int, float]:
    """SINR with sensing on its own subcarriers: no sensing interference term."""
    comm_users = np.asarray(comm_users, int)
    out = {}
    for k in comm_users:
        interference = sum(abs(b_comm[k, i]) ** 2 for i in comm_users if i != k)
        out[int(k)] = abs(b_comm[k, k]) ** 2 / (interference + noise_power)
    return out


def spectral_efficiency(sinr: float, scheme: str, mu_c: float) -> float:
    """log2(1 + SINR), scaled by the communication band share under SeS."""
    if sinr < 0:
        raise ValueError("SINR must be nonnegative")
    se = np.log2(1.0 + sinr)
    if normalize_scheme(scheme) == SCHEME_SES:
        se *= 1.0 - mu_c
    return float(se)


def epoch_sinr(channels_stacked: np.ndarray, bank, omega: np.ndarray,
               num_antennas: int, noise_power: float, scheme: str,
               comm_users: np.ndarray, sensing_users: np.ndarray,
               pairing: dict[int, list[int]] | None = None) -> dict[int, float]:
    """SINR of every active user from one epoch snapshot."""
    scheme = normalize_scheme(scheme)
    b_comm = effective_channels(channels_stacked, bank.w_comm, omega, num_antennas)
    if scheme == SCHEME_SES:
        return sinr_separate(b_comm, noise_power, comm_users)
    b_sens = effective_channels(channels_stacked, bank.w_sens, omega, num_antennas)
    return sinr_shared(b_comm, b_sens, noise_power, scheme, comm_users,
                       sensing_users, pairing)


# ---------------------------------------------------------------------------
# Aggregation


def moving_average(series: np.ndarray, window: int = 100) -> np.ndarray:
    """Centered moving average, truncated symmetrically at the edges.

    NaN entries (epochs without a rate) are excluded from each window's mean;
    a window with no finite entries stays NaN.
    """
    x = np.asarray(series, float)
    if window < 1:
        raise ValueError("window must be >= 1")
    n = x.size
    out = np.full(n, np.nan)
    half = window // 2
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, lo + window)
        lo = max(0, hi - window)
        seg = x[lo:hi]
        finite = np.isfinite(seg)
        if finite.any():
            out[i] = seg[finite].mean()
    return out


def coherence_block_means(series: np.ndarray, epochs_per_block: int = 5) -> np.ndarray:
    """NaN-aware mean of the series over consecutive coherence blocks."""
    x = np.asarray(series, float)
    n_blocks = int(np.ceil(x.size / epochs_per_block))
    out = np.full(n_blocks, np.nan)
    for b in range(n_blocks):
        seg = x[b * epochs_per_block:(b + 1) * epochs_per_block]
        finite = np.isfinite(seg)
        if finite.any():
            out[b] = seg[finite].mean()
    return out


def aggregate(se_per_user: np.ndarray, window: int = 100,
              epochs_per_block: int = 5) -> dict:
    """Summary time series from the per-user SE matrix (epochs x users)."""
    se = np.asarray(se_per_user, float)
    sum_se = np.where(np.all(np.isnan(se), axis=1), np.nan, np.nansum(se, axis=1))
    return {
        "sum_se": sum_se,
        "sum_se_moving": moving_average(sum_se, window),
        "per_user_moving": np.stack([moving_average(se[:, k], window)
                                     for k in range(se.shape[1])], axis=1)
        if se.size else se,
        "block_means": coherence_block_means(sum_se, epochs_per_block),
    }
