"""Sensing management: when to sense, which APs receive, and the variance threshold.

Sensing for a user is triggered when the predicted variance of its angle
estimate at the nearest AP crosses a threshold derived from the array's
half-power beamwidth and an outage probability.  The Rx/Tx partition is then
found by an exhaustive search over a small utility-ranked candidate set.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .tracking import EkfState, angle_from_state


class ManagementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Variance threshold from the exact array beampattern


def ula_beampattern(theta, num_antennas: int, d_over_lambda: float = 0.5):
    """|sum_n exp(j 2 pi (d/lambda) n sin theta)|^2 for a broadside ULA."""
    psi = 2.0 * np.pi * d_over_lambda * np.sin(np.asarray(theta, float))
    num = np.sin(num_antennas * psi / 2.0)
    den = np.sin(psi / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        af = np.where(np.abs(den) < 1e-12, num_antennas, num / den)
    return np.abs(af) ** 2


def half_power_beamwidth(num_antennas: int, d_over_lambda: float = 0.5) -> float:
    """Full width of the main lobe at half power, in radians, by root finding."""
    if num_antennas < 2:
        raise ManagementError("half-power beamwidth needs at least 2 antennas")
    s_null = min(1.0, 1.0 / (num_antennas * d_over_lambda))
    theta_null = np.arcsin(s_null)
    target = num_antennas**2 / 2.0
    f = lambda th: ula_beampattern(th, num_antennas, d_over_lambda) - target
    if f(theta_null * 0.999999) > 0:
        raise ManagementError("no half-power crossing inside the main lobe")
    theta_half = brentq(f, 1e-12, theta_null * 0.999999)
    return 2.0 * theta_half


@dataclass(frozen=True)
class SensingThreshold:
    """Angle-variance threshold with its ingredients."""

    gamma_rad2: float
    hpbw_rad: float
    outage_probability: float

    @property
    def gamma_deg2(self) -> float:
        return self.gamma_rad2 * (180.0 / np.pi) ** 2


def sensing_threshold(num_antennas: int, d_over_lambda: float,
                      outage_probability: float) -> SensingThreshold:
    """Threshold gamma = (HPBW / Phi^{-1}(1 - eps/2))^2.

    Keeping the angle-error standard deviation below HPBW divided by the
    Gaussian quantile bounds the probability of leaving the main-lobe
    half-power region by the outage probability.
    """
    if not 0.0 < outage_probability < 1.0:
        raise ManagementError("outage probability must be in (0, 1)")
    hpbw = half_power_beamwidth(num_antennas, d_over_lambda)
    z = norm.ppf(1.0 - outage_probability / 2.0)
    if z <= 0:
        raise ManagementError("outage probability too large for a positive quantile")
    return SensingThreshold(gamma_rad2=(hpbw / z) ** 2, hpbw_rad=hpbw,
                            outage_probability=outage_probability)


def fit_outage_probability(gamma_deg2: float = 14.938, num_antennas: int = 8,
                           d_over_lambda: float = 0.5) -> float:
    """Outage probability that reproduces a given threshold at a reference array."""
    hpbw_deg = np.degrees(half_power_beamwidth(num_antennas, d_over_lambda))
    z = hpbw_deg / np.sqrt(gamma_deg2)
    return float(2.0 * (1.0 - norm.cdf(z)))


# ---------------------------------------------------------------------------
# Per-user sensing decision


def nearest_ap(ap_positions: np.ndarray, p_x_est: float) -> int:
    return int(np.argmin(np.abs(p_x_est - np.asarray(ap_positions))))


def sensing_decision(track: EkfState, ap_positions: np.ndarray, p_y: float,
                     gamma_rad2: float) -> tuple[bool, dict]:
    """Decide whether the user needs sensing at the epoch the track predicts.

    The criterion is evaluated at the nearest AP, where the angle is most
    sensitive to the position; the rule is `sense iff variance >= gamma`.
    """
    ap = nearest_ap(ap_positions, track.mean[0])
    theta, var = angle_from_state(track, ap_positions[ap], p_y)
    return bool(var >= gamma_rad2), {"ap": ap, "theta": theta, "var_rad2": var}


# ---------------------------------------------------------------------------
# Utility-ranked candidate set


@dataclass
class UtilityRanking:
    """APs ordered by communication utility with the cumulative-share cutoff."""

    order: np.ndarray        # AP indices, descending utility
    utilities: np.ndarray    # matching xi values, W
    cumulative_share: np.ndarray
    cutoff: int              # number of candidate APs (0 when there is no ranking)

    @property
    def candidates(self) -> np.ndarray:
        return self.order[: self.cutoff]


def ap_utility(channels: np.ndarray, precoders: np.ndarray, comm_users: Sequence[int],
               utility_threshold: float) -> UtilityRanking:
    """Rank APs by the received signal power they contribute to the active users.

    ``channels`` is (L, K, N) and ``precoders`` holds per-AP slices (L, K, N).
    The candidate set is the shortest utility-ordered prefix whose cumulative
    share reaches the threshold.  An empty user set yields an empty ranking.
    """
    num_aps = channels.shape[0]
    if len(comm_users) == 0:
        return UtilityRanking(order=np.zeros(0, int), utilities=np.zeros(0),
                              cumulative_share=np.zeros(0), cutoff=0)
    xi = np.zeros(num_aps)
    for ell in range(num_aps):
        for k in comm_users:
            xi[ell] += abs(np.vdot(channels[ell, k], precoders[ell, k])) ** 2
    order = np.argsort(xi)[::-1]
    total = xi.sum()
    if total <= 0:
        share = np.ones(num_aps)
        cutoff = num_aps
    else:
        share = np.cumsum(xi[order]) / total
        cutoff = int(np.searchsorted(share, utility_threshold - 1e-15) + 1)
        cutoff = min(cutoff, num_aps)
    return UtilityRanking(order=order, utilities=xi[order],
                          cumulative_share=share, cutoff=cutoff)


# ---------------------------------------------------------------------------
# Receive-AP selection


@dataclass
class SelectionMatrix:
    """Diagonal 0/1 Rx indicator over APs with the derived Tx/Rx sets."""

    omega: np.ndarray    # (L,) ints in {0, 1}; 1 marks an Rx AP

    @property
    def rx_aps(self) -> np.ndarray:
        return np.flatnonzero(self.omega == 1)

    @property
    def tx_aps(self) -> np.ndarray:
        return np.flatnonzero(self.omega == 0)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.omega)


@dataclass
class SelectionOutcome:
    selection: SelectionMatrix
    objective: float
    feasible: bool
    evaluated: int


def select_rx_aps(num_aps: int, candidates: Sequence[int],
                  objective_fn: Callable[[np.ndarray], float],
                  min_rate_fn: Callable[[np.ndarray], float],
                  min_rate: float) -> SelectionOutcome:
    """Exhaustive search over the nonempty proper Rx subsets of the candidate set.

    APs outside the candidate set always transmit.  Each hypothesis is scored
    by ``objective_fn`` (sum of predicted angle variances) subject to
    ``min_rate_fn(rx_set) >= min_rate`` for the active users; when no
    partition is feasible the one with the largest minimum rate is returned,
    flagged infeasible.
    """
    candidates = list(dict.fromkeys(int(c) for c in candidates))
    if not candidates:
        raise ManagementError("candidate set must not be empty at a sensing epoch")
    best = None          # (objective, omega)
    fallback = None      # (-min_rate, omega)
    evaluated = 0
    if len(candidates) == 1:
        # no proper partition exists; the lone candidate must receive
        if num_aps < 2:
            raise ManagementError("need at least one Tx AP besides the Rx AP")
        sizes = [1]
    else:
        sizes = range(1, len(candidates))
    for r in sizes:
        for subset in combinations(candidates, r):
            omega = np.zeros(num_aps, int)
            omega[list(subset)] = 1
            evaluated += 1
            rate = min_rate_fn(omega)
            if rate >= min_rate:
                obj = objective_fn(omega)
                if best is None or obj < best[0]:
                    best = (obj, omega)
            if fallback is None or rate > fallback[0]:
                fallback = (rate, omega)
    if best is not None:
        return SelectionOutcome(SelectionMatrix(best[1]), float(best[0]), True, evaluated)
    omega = fallback[1]
    return SelectionOutcome(SelectionMatrix(omega), float(objective_fn(omega)),
                            False, evaluated)


def no_sensing_selection(num_aps: int) -> SelectionMatrix:
    """All APs transmit when nobody needs sensing."""
    return SelectionMatrix(np.zeros(num_aps, int))


def min_rate(rates: Sequence[float]) -> float:
    """Smallest instantaneous rate among the active users."""
    rates = list(rates)
    if not rates:
        raise ManagementError("min_rate needs at least one active user")
    return float(min(rates))
