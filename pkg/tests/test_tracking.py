import numpy as np
import pytest

from sensebeam.scenario import SPEED_OF_LIGHT, NetworkGeometry, process_noise_cov, transition_matrix
from sensebeam.tracking import (
    EkfState,
    angle_from_state,
    ekf_predict,
    ekf_update,
    joseph_update_cov,
    measurement_jacobian,
    measurement_model,
    stack_measurement_model,
)

LAM = 0.01
P_Y = 40.0


@pytest.fixture
def geometry():
    return NetworkGeometry(ap_positions=np.array([100.0, 200.0, 300.0, 400.0]),
                           antennas_per_ap=4, wavelength=LAM)


def test_predict_linear_mean():
    state = EkfState(mean=np.array([100.0, 20.0]), cov=np.zeros((2, 2)))
    out = ekf_predict(state, 0.01, 0.0)
    assert out.mean == pytest.approx([100.2, 20.0])
    assert np.allclose(out.cov, 0.0)


def test_predict_adds_process_noise():
    state = EkfState(mean=np.zeros(2), cov=np.eye(2))
    out = ekf_predict(state, 0.01, 1.0)
    f = transition_matrix(0.01)
    expected = f @ np.eye(2) @ f.T + process_noise_cov(0.01, 1.0)
    assert np.allclose(out.cov, expected)
    assert np.trace(out.cov) >= np.trace(f @ np.eye(2) @ f.T)


def test_predict_grows_position_variance_monotonically():
    state = EkfState(mean=np.zeros(2), cov=np.diag([1.0, 1.0]))
    last = state.cov[0, 0]
    for _ in range(50):
        state = ekf_predict(state, 0.01, 1.0)
        assert state.cov[0, 0] > last
        last = state.cov[0, 0]


def test_measurement_model_monostatic_broadside(geometry):
    # user directly above AP 1 (x=200): delay 2R/c, angle 0
    x = np.array([200.0, 0.0])
    m = measurement_model(x, geometry, np.array([1]), 1, LAM, P_Y)
    assert m[0] == pytest.approx(2 * 40.0 / SPEED_OF_LIGHT)
    assert m[1] == 0.0      # doppler with zero velocity
    assert m[2] == 0.0      # broadside angle


def test_measurement_model_zero_velocity_kills_doppler(geometry):
    x = np.array([247.0, 0.0])
    m = measurement_model(x, geometry, np.arange(3), 3, LAM, P_Y)
    assert np.allclose(m[3:6], 0.0)


def test_bistatic_doppler_cancels_midway(geometry):
    # user midway between tx at 100 and rx at 300, moving along x: the two
    # direction cosines are opposite and the bistatic doppler vanishes
    x = np.array([200.0, 20.0])
    m = measurement_model(x, geometry, np.array([0]), 2, LAM, P_Y)
    assert m[1] == pytest.approx(0.0, abs=1e-9)


def test_measurement_vector_layout(geometry):
    x = np.array([150.0, 20.0])
    tx = np.array([0, 1, 3])
    m = measurement_model(x, geometry, tx, 2, LAM, P_Y)
    assert m.shape == (2 * 3 + 1,)
    z, h = stack_measurement_model(x, geometry, tx, [2, 3], LAM, P_Y)
    assert z.shape == (14,)
    assert h.shape == (14, 2)


def test_jacobian_angle_entry(geometry):
    # d theta / d p_x at zero offset is 1 / p_y
    x = np.array([300.0, 20.0])
    h = measurement_jacobian(x, geometry, np.array([0]), 2, LAM, P_Y)
    assert h[2, 0] == pytest.approx(1.0 / P_Y)
    assert h[2, 1] == 0.0
    assert h[0, 1] == 0.0   # delay does not depend on velocity


def test_jacobian_matches_finite_differences(geometry):
    rng = np.random.default_rng(0)
    tx = np.array([0, 1, 3])
    worst = 0.0
    for _ in range(100):
        x = np.array([rng.uniform(50.0, 450.0), rng.uniform(5.0, 35.0)])
        h = measurement_jacobian(x, geometry, tx, 2, LAM, P_Y)
        for col, eps in ((0, 1e-4), (1, 1e-5)):
            dx = np.zeros(2)
            dx[col] = eps
            fd = (measurement_model(x + dx, geometry, tx, 2, LAM, P_Y)
                  - measurement_model(x - dx, geometry, tx, 2, LAM, P_Y)) / (2 * eps)
            scale = np.linalg.norm(fd)
            worst = max(worst, np.linalg.norm(h[:, col] - fd) / scale)
    assert worst < 1e-6


def test_update_infinite_noise_keeps_state(geometry):
    state = EkfState(mean=np.array([150.0, 20.0]), cov=np.diag([100.0, 4.0]))
    tx = np.array([0])
    z_pred, jac = stack_measurement_model(state.mean, geometry, tx, [1], LAM, P_Y)
    z = z_pred + 1e-3 * np.array([1e-9, 1.0, 1e-3])
    big_r = 1e30 * np.eye(3)
    out = ekf_update(state, z, z_pred, jac, big_r, epoch=0, gate_sigmas=np.inf)
    assert np.allclose(out.mean, state.mean, atol=1e-6)


def test_update_zero_innovation_keeps_mean_shrinks_cov(geometry):
    state = EkfState(mean=np.array([150.0, 20.0]), cov=np.diag([100.0, 4.0]))
    tx = np.array([0, 2])
    z_pred, jac = stack_measurement_model(state.mean, geometry, tx, [1], LAM, P_Y)
    r = np.diag([1e-16, 1e-16, 1e-4, 1e-4, 1e-6])
    out = ekf_update(state, z_pred.copy(), z_pred, jac, r, epoch=3)
    assert np.allclose(out.mean, state.mean)
    assert np.trace(out.cov) < np.trace(state.cov)
    assert out.last_update_epoch == 3
    eigs = np.linalg.eigvalsh(out.cov)
    assert eigs.min() >= -1e-12


def test_update_equals_joseph_form(geometry):
    state = EkfState(mean=np.array([150.0, 20.0]), cov=np.diag([25.0, 4.0]))
    tx = np.array([0, 2])
    z_pred, jac = stack_measurement_model(state.mean, geometry, tx, [1], LAM, P_Y)
    r = np.diag([1e-15, 1e-15, 1.0, 1.0, 1e-5])
    z = z_pred + np.array([1e-9, -1e-9, 0.3, -0.2, 1e-3])
    out = ekf_update(state, z, z_pred, jac, r, epoch=0, gate_sigmas=np.inf)
    s = jac @ state.cov @ jac.T + r
    gain = state.cov @ jac.T @ np.linalg.inv(s)
    joseph = joseph_update_cov(state.cov, gain, jac, r)
    assert np.allclose(out.cov, joseph, rtol=1e-10, atol=1e-18)


def test_update_gates_outliers(geometry):
    state = EkfState(mean=np.array([150.0, 20.0]), cov=np.diag([1.0, 1.0]))
    tx = np.array([0])
    z_pred, jac = stack_measurement_model(state.mean, geometry, tx, [1], LAM, P_Y)
    r = np.diag([1e-18, 1e-2, 1e-8])
    z = z_pred.copy()
    z[2] += 100.0   # absurd angle, far beyond 5 sigma
    out = ekf_update(state, z, z_pred, jac, r, epoch=0)
    # the angle row is dropped; the remaining zero-innovation rows keep the mean
    assert np.allclose(out.mean, state.mean)


def test_update_rejects_nonfinite(geometry):
    state = EkfState(mean=np.array([150.0, 20.0]), cov=np.eye(2))
    tx = np.array([0])
    z_pred, jac = stack_measurement_model(state.mean, geometry, tx, [1], LAM, P_Y)
    z = z_pred.copy()
    z[0] = np.nan
    with pytest.raises(Exception):
        ekf_update(state, z, z_pred, jac, np.eye(3), epoch=0)


def test_iterated_update_improves_nonlinear_recovery(geometry):
    # large prior error: one iteration leaves a bias the iterated form removes
    truth = np.array([260.0, 20.0])
    state = EkfState(mean=np.array([220.0, 15.0]), cov=np.diag([900.0, 25.0]))
    tx = np.array([0, 3])
    rx = [1, 2]

    def h_fn(x):
        return stack_measurement_model(x, geometry, tx, rx, LAM, P_Y)[0]

    def jac_fn(x):
        return stack_measurement_model(x, geometry, tx, rx, LAM, P_Y)[1]

    z = h_fn(truth)
    r = np.diag([1e-17, 1e-17, 1.0, 1.0, 1e-6, 1e-17, 1e-17, 1.0, 1.0, 1e-6])
    one = ekf_update(state, z, h_fn(state.mean), jac_fn(state.mean), r, 0,
                     gate_sigmas=np.inf)
    it = ekf_update(state, z, h_fn(state.mean), jac_fn(state.mean), r, 0,
                    gate_sigmas=np.inf, measurement_fn=h_fn, jacobian_fn=jac_fn,
                    max_iters=20)
    assert abs(it.mean[0] - truth[0]) < abs(one.mean[0] - truth[0])
    assert abs(it.mean[0] - truth[0]) < 0.5


def test_nees_consistency(geometry):
    # matched-noise filtering stays inside the 95% chi-square band (2 dof)
    rng = np.random.default_rng(7)
    tx = np.array([0, 1])
    rx = [2]
    r = np.diag([1e-16, 1e-16, 25.0, 25.0, 1e-6])
    chol = np.sqrt(np.diag(r))
    trials, horizon = 120, 25
    nees = np.zeros((trials, horizon))
    for m in range(trials):
        truth = np.array([rng.uniform(150.0, 350.0), 20.0])
        state = EkfState(mean=truth + [rng.normal(0, 2.0), rng.normal(0, 1.0)],
                         cov=np.diag([4.0, 1.0]))
        for t in range(horizon):
            f = transition_matrix(0.01)
            w = np.sqrt(1.0) * rng.standard_normal() * np.array([0.01**2 / 2, 0.01])
            truth = f @ truth + w
            state = ekf_predict(state, 0.01, 1.0)
            z_pred, jac = stack_measurement_model(state.mean, geometry, tx, rx, LAM, P_Y)
            z = stack_measurement_model(truth, geometry, tx, rx, LAM, P_Y)[0] \
                + chol * rng.standard_normal(5)
            state = ekf_update(state, z, z_pred, jac, r, t, gate_sigmas=np.inf)
            err = state.mean - truth
            nees[m, t] = err @ np.linalg.solve(state.cov, err)
    from scipy.stats import chi2
    avg = nees.mean()
    m_eff = trials
    lo = chi2.ppf(0.025, 2 * m_eff) / m_eff
    hi = chi2.ppf(0.975, 2 * m_eff) / m_eff
    assert lo <= avg <= hi


def test_angle_from_state_values():
    state = EkfState(mean=np.array([100.0, 20.0]), cov=np.diag([16.0, 1.0]))
    theta, var = angle_from_state(state, ap_x=100.0, p_y=40.0)
    assert theta == 0.0
    assert var == pytest.approx(16.0 / 1600.0)
    zero = EkfState(mean=np.array([100.0, 20.0]), cov=np.zeros((2, 2)))
    assert angle_from_state(zero, 100.0, 40.0)[1] == 0.0


def test_angle_variance_decreases_with_offset():
    base = EkfState(mean=np.array([0.0, 0.0]), cov=np.diag([16.0, 1.0]))
    variances = []
    for offset in (0.0, 20.0, 50.0, 120.0):
        state = EkfState(mean=np.array([offset, 0.0]), cov=base.cov.copy())
        variances.append(angle_from_state(state, 0.0, 40.0)[1])
    assert all(a > b for a, b in zip(variances, variances[1:]))


def test_perfect_measurements_drive_error_to_zero(geometry):
    truth = np.array([200.0, 20.0])
    state = EkfState(mean=np.array([230.0, 24.0]), cov=np.diag([1000.0, 25.0]))
    tx = np.array([0, 3])
    rx = [1, 2]
    # noise-free measurements, tiny per-component variances at each scale
    r = np.diag([1e-22, 1e-22, 1e-6, 1e-6, 1e-12] * 2)
    for t in range(20):
        f = transition_matrix(0.01)
        truth = f @ truth
        state = ekf_predict(state, 0.01, 0.0)
        z_pred, jac = stack_measurement_model(state.mean, geometry, tx, rx, LAM, P_Y)
        z = stack_measurement_model(truth, geometry, tx, rx, LAM, P_Y)[0]
        state = ekf_update(state, z, z_pred, jac, r, t, gate_sigmas=np.inf,
                           measurement_fn=lambda x: stack_measurement_model(
                               x, geometry, tx, rx, LAM, P_Y)[0],
                           jacobian_fn=lambda x: stack_measurement_model(
                               x, geometry, tx, rx, LAM, P_Y)[1],
                           max_iters=10)
    assert abs(state.mean[0] - truth[0]) < 1e-3
    assert abs(state.mean[1] - truth[1]) < 1e-3
