"""Per-user extended Kalman filter over the constant-velocity road state.

The state is [p_x, v_x]; measurements stack, per selected Rx AP, the bistatic
delays and Doppler shifts toward every Tx AP followed by the angle of arrival
at that Rx AP.  The measurement noise covariance is the estimator's
asymptotic covariance, block diagonal over Rx APs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import SPEED_OF_LIGHT, NetworkGeometry, process_noise_cov, transition_matrix


class TrackingError(RuntimeError):
    pass


@dataclass
class EkfState:
    """Gaussian belief about one user's kinematic state."""

    mean: np.ndarray          # (2,) [p_x, v_x]
    cov: np.ndarray           # (2, 2)
    last_update_epoch: int = -1

    def copy(self) -> "EkfState":
        return EkfState(self.mean.copy(), self.cov.copy(), self.last_update_epoch)


def ekf_predict(state: EkfState, dt: float, sigma_q2: float) -> EkfState:
    """One time update: x <- F x, P <- F P F^T + Q."""
    if dt <= 0:
        raise ValueError("epoch step must be positive")
    f = transition_matrix(dt)
    q = process_noise_cov(dt, sigma_q2)
    mean = f @ state.mean
    cov = f @ state.cov @ f.T + q
    cov = (cov + cov.T) / 2.0
    return EkfState(mean=mean, cov=cov, last_update_epoch=state.last_update_epoch)


def _deltas_ranges(x: np.ndarray, ap_positions: np.ndarray, p_y: float):
    deltas = x[0] - ap_positions
    ranges = np.hypot(deltas, p_y)
    return deltas, ranges


def measurement_model(x: np.ndarray, geometry: NetworkGeometry, tx_aps: np.ndarray,
                      rx_ap: int, wavelength: float, p_y: float) -> np.ndarray:
    """Predicted measurement at one Rx AP: [taus (|T|), nus (|T|), theta].

    Delays are bistatic path lengths over c, Dopplers project the velocity on
    both legs of each path, and the angle is arctan of the offset over the
    road distance.
    """
    tx_aps = np.asarray(tx_aps, int)
    pos = geometry.ap_positions
    d_tx, r_tx = _deltas_ranges(x, pos[tx_aps], p_y)
    d_rx, r_rx = _deltas_ranges(x, pos[[rx_ap]], p_y)
    d_rx, r_rx = d_rx[0], r_rx[0]
    taus = (r_tx + r_rx) / SPEED_OF_LIGHT
    nus = (d_tx / r_tx + d_rx / r_rx) * x[1] / wavelength
    theta = np.arctan(d_rx / p_y)
    return np.concatenate([taus, nus, [theta]])


def measurement_jacobian(x: np.ndarray, geometry: NetworkGeometry, tx_aps: np.ndarray,
                         rx_ap: int, wavelength: float, p_y: float) -> np.ndarray:
    """Analytic partials of the measurement stack w.r.t. (p_x, v_x)."""
    tx_aps = np.asarray(tx_aps, int)
    pos = geometry.ap_positions
    d_tx, r_tx = _deltas_ranges(x, pos[tx_aps], p_y)
    d_rx, r_rx = _deltas_ranges(x, pos[[rx_ap]], p_y)
    d_rx, r_rx = d_rx[0], r_rx[0]
    n_tx = tx_aps.size
    h = np.zeros((2 * n_tx + 1, 2))
    # d tau / d p_x: sum of the direction cosines on both legs
    h[:n_tx, 0] = (d_tx / r_tx + d_rx / r_rx) / SPEED_OF_LIGHT
    # d nu / d p_x: curvature of the direction cosines, d/dD (D/R) = p_y^2 / R^3
    h[n_tx:2 * n_tx, 0] = (p_y**2 / r_tx**3 + p_y**2 / r_rx**3) * x[1] / wavelength
    h[n_tx:2 * n_tx, 1] = (d_tx / r_tx + d_rx / r_rx) / wavelength
    h[2 * n_tx, 0] = p_y / (p_y**2 + d_rx**2)
    return h


def stack_measurement_model(x, geometry, tx_aps, rx_aps, wavelength, p_y):
    """Predicted measurement and Jacobian stacked over the selected Rx APs."""
    hs, js = [], []
    for rx in rx_aps:
        hs.append(measurement_model(x, geometry, tx_aps, rx, wavelength, p_y))
        js.append(measurement_jacobian(x, geometry, tx_aps, rx, wavelength, p_y))
    return np.concatenate(hs), np.vstack(js)


def ekf_update(state: EkfState, z: np.ndarray, z_pred: np.ndarray, jacobian: np.ndarray,
               noise_cov: np.ndarray, epoch: int, gate_sigmas: float = 5.0,
               measurement_fn=None, jacobian_fn=None, max_iters: int = 1) -> EkfState:
    """One measurement update with per-component innovation gating.

    Components whose innovation exceeds ``gate_sigmas`` standard deviations of
    the innovation covariance are dropped for this epoch; if everything is
    gated the prediction is returned unchanged.  With ``max_iters`` > 1 and
    measurement callables supplied, the update is re-linearized about the
    running posterior (iterated form); one iteration is exactly the standard
    update.  Raises on a singular innovation covariance.
    """
    if not np.all(np.isfinite(z)):
        raise TrackingError("measurement contains non-finite entries")
    innovation = z - z_pred
    if np.isfinite(gate_sigmas):
        s = jacobian @ state.cov @ jacobian.T + noise_cov
        sd = np.sqrt(np.clip(np.diag(s), 0.0, None))
        keep = np.abs(innovation) <= gate_sigmas * sd
    else:
        keep = np.ones(innovation.size, bool)
    if not np.any(keep):
        return EkfState(state.mean.copy(), state.cov.copy(), state.last_update_epoch)
    z_k = z[keep]
    r = noise_cov[np.ix_(keep, keep)]
    x0, p0 = state.mean, state.cov
    x = x0.copy()
    h_rows = jacobian[keep]
    hx = z_pred[keep]
    gain = None
    for it in range(max(1, max_iters)):
        if it > 0:
            h_rows = jacobian_fn(x)[keep]
            hx = measurement_fn(x)[keep]
        s = h_rows @ p0 @ h_rows.T + r
        try:
            gain = np.linalg.solve(s.T, h_rows @ p0.T).T   # P H^T S^{-1}
        except np.linalg.LinAlgError as exc:
            raise TrackingError(f"singular innovation covariance: {exc}") from exc
        x_new = x0 + gain @ (z_k - hx - h_rows @ (x0 - x))
        step = np.linalg.norm(x_new - x)
        x = x_new
        if measurement_fn is None or jacobian_fn is None or step < 1e-9:
            break
    cov = (np.eye(2) - gain @ h_rows) @ p0
    cov = (cov + cov.T) / 2.0
    return EkfState(mean=x, cov=cov, last_update_epoch=epoch)


def joseph_update_cov(state_cov: np.ndarray, gain: np.ndarray, jacobian: np.ndarray,
                      noise_cov: np.ndarray) -> np.ndarray:
    """Joseph-form covariance update; algebraically equal to the standard form."""
    ikh = np.eye(2) - gain @ jacobian
    return ikh @ state_cov @ ikh.T + gain @ noise_cov @ gain.T


def angle_from_state(state: EkfState, ap_x: float, p_y: float) -> tuple[float, float]:
    """Angle of arrival at one AP implied by the state, with its variance.

    The variance comes from first-order propagation of the position variance
    through the arctan map.
    """
    if p_y <= 0:
        raise ValueError("p_y must be positive")
    delta = state.mean[0] - ap_x
    theta = np.arctan(delta / p_y)
    grad = p_y / (p_y**2 + delta**2)
    var = grad**2 * state.cov[0, 0]
    return float(theta), float(var)
