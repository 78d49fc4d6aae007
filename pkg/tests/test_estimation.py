import numpy as np
import pytest

from sensebeam import estimation as est
from sensebeam.channel import (
    ChannelRealization,
    ReflectionCoefficients,
    array_response,
    draw_channel,
    draw_reflection,
    reflection_second_moment,
)
from sensebeam.scenario import NetworkGeometry
from sensebeam.waveform import data_symbol_grid, sensing_code_grid, symbol_duration


LAM = 0.01
P_Y = 40.0


def build_setup(nc=8, ns=13, n=2, num_aps=3, rx=1, sensing_users=(0,), comm_users=(),
                kr=5.0, noise=1e-22, rcs_mean=1.0, seed=0, positions=None,
                sens_power=1e-3, comm_power=1e-3):
    """Small physically consistent echo setup around real channel draws."""
    num_users = max(list(sensing_users) + list(comm_users) + [0]) + 1
    geometry = NetworkGeometry(ap_positions=60.0 * np.arange(1, num_aps + 1),
                               antennas_per_ap=n, wavelength=LAM)
    if positions is None:
        positions = 55.0 + 60.0 * np.arange(num_users)
    positions = np.asarray(positions, float)
    rng = np.random.default_rng(seed)
    chan = draw_channel(geometry, positions, P_Y, kr, LAM, rng)
    refl = draw_reflection(num_aps, num_users, rcs_mean, LAM,
                           np.random.default_rng(seed + 1),
                           np.random.default_rng(seed + 2))
    tx_aps = np.array([ap for ap in range(num_aps) if ap != rx])

    # conjugate beams toward each user's true position, fixed per-user power
    w_sens = np.zeros((tx_aps.size, num_users, n), complex)
    w_comm = np.zeros((tx_aps.size, num_users, n), complex)
    for tpos, ap in enumerate(tx_aps):
        for k in range(num_users):
            direction = array_response(chan.theta[ap, k], n).conj()
            w_sens[tpos, k] = np.sqrt(sens_power / (n * tx_aps.size)) * direction
            w_comm[tpos, k] = np.sqrt(comm_power / (n * tx_aps.size)) * direction

    if ns >= 13:
        sens_symbols = np.stack([
            np.stack([sensing_code_grid(ap, nc, ns).symbols for _ in sensing_users])
            for ap in tx_aps])
    else:   # too short for the Barker train: use unimodular random codes
        sens_symbols = np.stack([
            np.stack([data_symbol_grid(10 + j, nc, ns,
                                       np.random.default_rng(300 + 7 * ap + j)).symbols
                      for j in range(len(sensing_users))])
            for ap in tx_aps])
    comm_symbols = (np.stack([data_symbol_grid(i, nc, ns, np.random.default_rng(100 + i)).symbols
                              for i in comm_users])
                    if comm_users else np.zeros((0, nc, ns), complex))

    model = est.EchoModel(
        rx_ap=rx, tx_aps=tx_aps,
        sensing_users=list(sensing_users), comm_users=list(comm_users),
        num_antennas=n, noise_power=noise, rician_factor=kr,
        refl_second_moment=reflection_second_moment(rcs_mean, LAM),
        subcarrier_spacing=15e3, symbol_time=symbol_duration(nc, 4, 15e3),
        d_over_lambda=0.5,
        betas_rx=np.array([chan.beta[rx, k] for k in sensing_users]),
        betas_tx=np.array([[chan.beta[ap, k] for ap in tx_aps] for k in sensing_users]),
        thetas_tx=np.array([[chan.theta[ap, k] for ap in tx_aps] for k in sensing_users]),
        w_sens=w_sens, w_comm=w_comm,
        sens_symbols=sens_symbols, comm_symbols=comm_symbols,
    )

    params = []
    for k in sensing_users:
        r_rx = np.hypot(positions[k] - geometry.ap_positions[rx], P_Y)
        r_tx = np.hypot(positions[k] - geometry.ap_positions[tx_aps], P_Y)
        taus = (r_tx + r_rx) / 2.99792458e8
        d_tx = positions[k] - geometry.ap_positions[tx_aps]
        d_rx = positions[k] - geometry.ap_positions[rx]
        nus = (d_tx / r_tx + d_rx / r_rx) * 20.0 / LAM
        params.append(est.UserEchoParams(taus=taus, nus=nus,
                                         theta=float(chan.theta[rx, k])))
    return model, params, chan, refl, geometry


# --- channel coefficients ----------------------------------------------------


def coefficient_args(chan, refl, rx, tx, k, w):
    return dict(sigma_bar=refl.sigma_bar[rx, tx, k], phi_rx=chan.phi[rx, k],
                beta_rx=chan.beta[rx, k], h_los_tx=chan.h_los[tx, k],
                h_nlos_tx=chan.h_nlos[tx, k], w=w)


def test_alpha_high_rician_limit():
    model, params, chan, refl, _ = build_setup(kr=1e12)
    args = coefficient_args(chan, refl, 1, 0, 0, model.w_sens[0, 0])
    ref = est.alpha_coefficients(rician_factor=1.0, **args)
    a_ll, a_ln, a_nl, a_nn = est.alpha_coefficients(rician_factor=1e12, **args)
    # the three leakage coefficients vanish in the LOS-only limit
    assert abs(a_ln) < 1e-5 * abs(ref[1])
    assert abs(a_nl) < 1e-5 * abs(ref[2])
    assert abs(a_nn) < 1e-5 * abs(ref[3])
    expected = (refl.sigma_bar[1, 0, 0] * np.exp(1j * chan.phi[1, 0])
                * np.sqrt(chan.beta[1, 0]) * (chan.h_los[0, 0] @ model.w_sens[0, 0]))
    assert a_ll == pytest.approx(expected, rel=1e-6)


def test_alpha_orthogonal_precoder():
    model, params, chan, refl, _ = build_setup(n=2)
    h = chan.h_los[0, 0]
    w = np.array([h[1], -h[0]]).conj() * 0  # build an exact null: w s.t. h^T w = 0
    w = np.array([-h[1], h[0]])
    assert abs(h @ w) < 1e-18
    args = coefficient_args(chan, refl, 1, 0, 0, w)
    a_ll, a_ln, a_nl, a_nn = est.alpha_coefficients(rician_factor=5.0, **args)
    scale = abs(a_ln) + abs(a_nn)
    assert abs(a_ll) < 1e-12 * scale
    assert abs(a_nl) < 1e-12 * scale
    assert a_ln != 0


def test_alpha_unit_rician_weights():
    model, params, chan, refl, _ = build_setup()
    args = coefficient_args(chan, refl, 1, 0, 0, model.w_sens[0, 0])
    a_ll, a_ln, a_nl, a_nn = est.alpha_coefficients(rician_factor=1.0, **args)
    sb = refl.sigma_bar[1, 0, 0]
    rx_los = np.exp(1j * chan.phi[1, 0]) * np.sqrt(chan.beta[1, 0])
    los_gain = chan.h_los[0, 0] @ model.w_sens[0, 0]
    nlos_gain = chan.h_nlos[0, 0] @ model.w_sens[0, 0]
    assert a_ll == pytest.approx(0.5 * sb * rx_los * los_gain)
    assert a_ln == pytest.approx(0.5 * sb * rx_los * nlos_gain)
    assert a_nl == pytest.approx(0.5 * sb * los_gain)
    assert a_nn == pytest.approx(0.5 * sb * nlos_gain)


def test_alpha_dimension_mismatch():
    model, params, chan, refl, _ = build_setup()
    args = coefficient_args(chan, refl, 1, 0, 0, np.ones(5))
    with pytest.raises(est.EstimationError):
        est.alpha_coefficients(rician_factor=1.0, **args)


# --- mean signal --------------------------------------------------------------


def test_mean_signal_single_term_structure():
    model, params, *_ = build_setup(num_aps=2, rx=1)   # one Tx AP
    p = est.UserEchoParams(taus=np.array([0.0]), nus=np.array([0.0]), theta=0.0,
                           alphas=np.array([1.0 + 0j]))
    mu = est.mean_signal(model, [p])
    base = model.replica(model.sens_symbols[0, 0], 0.0, 0.0)
    assert np.allclose(mu, np.kron(base, np.ones(model.num_antennas)))


def test_mean_signal_zero_coefficients():
    model, params, *_ = build_setup()
    p = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                           theta=params[0].theta,
                           alphas=np.zeros(model.num_tx, complex))
    assert np.allclose(est.mean_signal(model, [p]), 0.0)


def brute_force_mean(model, params):
    """Direct sample-by-sample synthesis of the LOS-to-LOS sum."""
    nc, ns = model.grid_shape
    n = model.num_antennas
    out = np.zeros(nc * ns * n, complex)
    for j, p in enumerate(params):
        a_rx = model.steering(p.theta)
        for t in range(model.num_tx):
            grid = model.sens_symbols[t, j]
            for b in range(ns):
                dopp = np.exp(2j * np.pi * b * model.symbol_time * p.nus[t])
                for m in range(nc):
                    val = 0.0
                    for a in range(nc):
                        val += (grid[a, b] / np.sqrt(nc)
                                * np.exp(2j * np.pi * a * m / nc)
                                * np.exp(-2j * np.pi * a * model.subcarrier_spacing
                                         * p.taus[t]))
                    s = dopp * val
                    idx = (b * nc + m) * n
                    out[idx:idx + n] += p.alphas[t] * s * a_rx
    return out


def test_mean_signal_matches_brute_force():
    model, params, *_ = build_setup(nc=4, ns=13, n=2, num_aps=3)
    rng = np.random.default_rng(8)
    p = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                           theta=params[0].theta,
                           alphas=rng.standard_normal(2) + 1j * rng.standard_normal(2))
    mu = est.mean_signal(model, [p])
    oracle = brute_force_mean(model, [p])
    assert np.allclose(mu, oracle, rtol=1e-10, atol=1e-12)


# --- received covariance -------------------------------------------------------


def test_covariance_reduces_to_noise_floor():
    # lone sensing user, no communication users, LOS-only channels
    model, params, *_ = build_setup(kr=1e12, noise=1e-12)
    cov = est.received_covariance(model, params)
    y = np.ones(model.stack_dim)
    assert np.allclose(cov.solve(y), y / 1e-12)
    dense = cov.dense() if cov.rank else 1e-12 * np.eye(model.stack_dim)
    assert np.allclose(dense, 1e-12 * np.eye(model.stack_dim))


def test_covariance_minimum_eigenvalue():
    model, params, *_ = build_setup(nc=4, ns=13, n=2, sensing_users=(0, 1),
                                    noise=1e-12, kr=1.0)
    cov = est.received_covariance(model, params)
    eigs = np.linalg.eigvalsh(cov.dense())
    assert eigs.min() >= 1e-12 * (1 - 1e-9)


def test_covariance_hermitian_psd():
    model, params, *_ = build_setup(nc=4, ns=13, n=2, sensing_users=(0, 1),
                                    comm_users=(), kr=0.7, noise=1e-13)
    dense = est.received_covariance(model, params).dense()
    assert np.allclose(dense, dense.conj().T)
    assert np.linalg.eigvalsh(dense).min() > 0


def test_covariance_montecarlo_oracle():
    # empirical covariance of the residual around the per-draw mean
    model, params, chan, refl, geometry = build_setup(
        nc=8, ns=4, n=2, num_aps=2, rx=1, sensing_users=(0, 1), kr=1.0,
        noise=1e-22, rcs_mean=1.0, positions=(55.0, 75.0))
    trials = 2000
    acc = np.zeros((model.stack_dim, model.stack_dim), complex)
    for m in range(trials):
        rng_m = np.random.default_rng(1000 + m)
        chan_m = draw_channel(geometry, np.array([55.0, 75.0]), P_Y, 1.0, LAM, rng_m)
        refl_m = draw_reflection(2, 2, 1.0, LAM, np.random.default_rng(5000 + m),
                                 np.random.default_rng(9000 + m))
        y, tp = est.synthesize_received(model, params, chan_m, refl_m,
                                        np.random.default_rng(7000 + m))
        resid = y - est.mean_signal(model, tp)
        acc += np.outer(resid, resid.conj())
    emp = acc / trials
    analytic = est.received_covariance(model, params).dense()
    rel = np.linalg.norm(emp - analytic) / np.linalg.norm(analytic)
    assert rel < 0.10


def test_synthesize_noiseless_los_equals_mean():
    model, params, chan, refl, _ = build_setup(kr=1e12)
    y, tp = est.synthesize_received(model, params, chan, refl,
                                    np.random.default_rng(0), noise=False)
    assert np.allclose(y, est.mean_signal(model, tp), rtol=1e-6)


def test_synthesize_noise_floor_scales():
    model, params, chan, refl, _ = build_setup(kr=1e12, noise=1e-12)
    y1, tp = est.synthesize_received(model, params, chan, refl, np.random.default_rng(3))
    resid1 = y1 - est.mean_signal(model, tp)
    model.noise_power = 4e-12
    y2, tp2 = est.synthesize_received(model, params, chan, refl, np.random.default_rng(3))
    resid2 = y2 - est.mean_signal(model, tp2)
    ratio = np.vdot(resid2, resid2).real / np.vdot(resid1, resid1).real
    assert ratio == pytest.approx(4.0, rel=0.05)


def test_ses_drops_comm_reflections():
    model, params, *_ = build_setup(sensing_users=(0,), comm_users=(1,), kr=1.0,
                                    noise=1e-13)
    with_comm = est.received_covariance(model, params)
    model.include_comm_reflections = False
    without = est.received_covariance(model, params)
    assert without.rank < with_comm.rank


# --- WNLS ---------------------------------------------------------------------


def snr_boosted_setup(**kw):
    return build_setup(nc=16, ns=13, n=4, num_aps=2, rx=1, kr=1e4,
                       noise=1e-22, sens_power=1e-3, **kw)


def test_wnls_noiseless_grid_aligned_recovery():
    model, params, chan, refl, _ = snr_boosted_setup()
    _, tp = est.synthesize_received(model, params, chan, refl,
                                    np.random.default_rng(0), noise=False)
    y = est.mean_signal(model, tp)   # exactly the deterministic component
    span = est.SearchSpan(tau=3 / (16 * 15e3), nu=3 / (13 * model.symbol_time),
                          theta=0.3, n_tau=13, n_nu=13, n_theta=13)
    model.noise_power = 1e-24
    cov = est.identity_covariance(1e-24)
    res = est.wnls_estimate(model, y, cov, [replace_alphas_none(tp[0])], [span])
    got = res.estimates[0]
    assert got.taus[0] == pytest.approx(tp[0].taus[0], abs=1e-12)
    assert got.nus[0] == pytest.approx(tp[0].nus[0], abs=1e-6)
    assert got.theta == pytest.approx(tp[0].theta, abs=1e-8)
    assert got.alphas[0] == pytest.approx(tp[0].alphas[0], rel=1e-6)


def replace_alphas_none(p):
    return est.UserEchoParams(taus=p.taus.copy(), nus=p.nus.copy(), theta=p.theta)


def test_wnls_cost_not_above_start(rng):
    model, params, chan, refl, _ = snr_boosted_setup()
    model.noise_power = 1e-16
    y, tp = est.synthesize_received(model, params, chan, refl, rng)
    cov = est.received_covariance(model, params)
    span = est.SearchSpan(tau=3 / (16 * 15e3), nu=3 / (13 * model.symbol_time),
                          theta=0.3)
    res = est.wnls_estimate(model, y, cov, [replace_alphas_none(tp[0])], [span])
    assert res.fit_gains[0] >= 0.0
    assert np.isfinite(res.cost)


def test_wnls_variance_matches_acm():
    model, params, chan, refl, _ = snr_boosted_setup()
    model.noise_power = 1e-16   # high SNR but finite
    cov = est.received_covariance(model, params)
    span = est.SearchSpan(tau=3 / (16 * 15e3), nu=3 / (13 * model.symbol_time),
                          theta=0.2)
    trials = 150
    ests = []
    true_ref = None
    for m in range(trials):
        y, tp = est.synthesize_received(model, params, chan, refl,
                                        np.random.default_rng(200 + m))
        res = est.wnls_estimate(model, y, cov, [replace_alphas_none(tp[0])], [span])
        e = res.estimates[0]
        ests.append([e.taus[0], e.nus[0], e.theta])
        true_ref = tp[0]
    ests = np.array(ests)
    acm_block = est.acm(model, [true_ref], cov)
    diag = np.diag(acm_block.user_block(0))
    emp = ests.var(axis=0)
    for emp_v, bound in zip(emp, diag):
        assert emp_v == pytest.approx(bound, rel=0.35)


def test_wnls_weighted_beats_unweighted_under_interference():
    # strong co-channel disturbance from a second sensing user's return
    model, params, chan, refl, _ = build_setup(
        nc=16, ns=13, n=4, num_aps=2, rx=1, sensing_users=(0, 1), kr=0.5,
        noise=1e-18, sens_power=1e-2, positions=(55.0, 62.0), seed=4)
    cov = est.received_covariance(model, params)
    span = est.SearchSpan(tau=3 / (16 * 15e3), nu=3 / (13 * model.symbol_time),
                          theta=0.2)
    err_w, err_i = [], []
    for m in range(60):
        y, tp = est.synthesize_received(model, params, chan, refl,
                                        np.random.default_rng(50 + m))
        preds = [replace_alphas_none(p) for p in tp]
        res_w = est.wnls_estimate(model, y, cov, preds, [span, span])
        res_i = est.wnls_estimate(model, y, est.identity_covariance(model.noise_power),
                                  preds, [span, span])
        err_w.append((res_w.estimates[0].theta - tp[0].theta) ** 2)
        err_i.append((res_i.estimates[0].theta - tp[0].theta) ** 2)
    assert np.mean(err_w) <= np.mean(err_i) * 1.05


# --- ACM ----------------------------------------------------------------------


def test_gradients_match_finite_differences():
    model, params, chan, refl, _ = build_setup(nc=8, ns=13, n=2, num_aps=3)
    rng = np.random.default_rng(5)
    p = est.UserEchoParams(taus=params[0].taus.copy(), nus=params[0].nus.copy(),
                           theta=params[0].theta,
                           alphas=rng.standard_normal(2) + 1j * rng.standard_normal(2))
    grads = est.mean_gradients(model, [p])
    steps = {"tau": 1e-12, "nu": 1e-4, "theta": 1e-7}

    def mu_at(taus, nus, theta, alphas):
        return est.mean_signal(model, [est.UserEchoParams(taus=taus, nus=nus,
                                                          theta=theta, alphas=alphas)])

    for t in range(2):
        for name, col in (("tau", t), ("nu", 2 + t)):
            eps = steps["tau" if name == "tau" else "nu"]
            dp = p.taus.copy() if name == "tau" else p.nus.copy()
            dm = dp.copy()
            dp[t] += eps
            dm[t] -= eps
            if name == "tau":
                fd = (mu_at(dp, p.nus, p.theta, p.alphas)
                      - mu_at(dm, p.nus, p.theta, p.alphas)) / (2 * eps)
            else:
                fd = (mu_at(p.taus, dp, p.theta, p.alphas)
                      - mu_at(p.taus, dm, p.theta, p.alphas)) / (2 * eps)
            rel = np.linalg.norm(grads[:, col] - fd) / np.linalg.norm(fd)
            assert rel < 1e-5
    eps = steps["theta"]
    fd = (mu_at(p.taus, p.nus, p.theta + eps, p.alphas)
          - mu_at(p.taus, p.nus, p.theta - eps, p.alphas)) / (2 * eps)
    rel = np.linalg.norm(grads[:, 4] - fd) / np.linalg.norm(fd)
    assert rel < 1e-5


def test_acm_separable_case_decouples():
    # one user, one Tx AP: delay-Doppler and angle blocks decouple
    model, params, chan, refl, _ = snr_boosted_setup()
    model.noise_power = 1e-16
    p = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                           theta=params[0].theta, alphas=np.array([1e-9 + 0j]))
    block = est.acm(model, [p], est.identity_covariance(model.noise_power)).matrix
    cross = abs(block[0, 2]) / np.sqrt(block[0, 0] * block[2, 2])
    cross_nu = abs(block[1, 2]) / np.sqrt(block[1, 1] * block[2, 2])
    assert cross < 1e-8
    assert cross_nu < 1e-8


def test_acm_psd_and_positive_diagonal():
    model, params, chan, refl, _ = build_setup(nc=8, ns=13, n=2, num_aps=3,
                                               noise=1e-16)
    p = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                           theta=params[0].theta,
                           alphas=np.array([1e-9, 2e-9], complex))
    block = est.acm(model, [p])
    eigs = np.linalg.eigvalsh(block.matrix)
    assert eigs.min() > -1e-12 * eigs.max()   # PSD up to numerical round-off
    assert np.all(np.diag(block.matrix) > 0)


def test_acm_snr_squared_scaling():
    model, params, chan, refl, _ = snr_boosted_setup()
    model.noise_power = 1e-16
    cov = est.identity_covariance(model.noise_power)
    base = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                              theta=params[0].theta, alphas=np.array([1e-9 + 0j]))
    doubled = est.UserEchoParams(taus=params[0].taus, nus=params[0].nus,
                                 theta=params[0].theta, alphas=np.array([2e-9 + 0j]))
    c1 = np.diag(est.acm(model, [base], cov).matrix)
    c2 = np.diag(est.acm(model, [doubled], cov).matrix)
    assert np.allclose(c2, c1 / 4.0, rtol=1e-9)


def test_acm_user_block_ordering():
    model, params, chan, refl, _ = build_setup(nc=8, ns=13, n=2, num_aps=3,
                                               sensing_users=(0, 1), noise=1e-15,
                                               positions=(55.0, 115.0))
    ps = [est.UserEchoParams(taus=p.taus, nus=p.nus, theta=p.theta,
                             alphas=np.full(2, 1e-9, complex)) for p in params]
    block = est.acm(model, ps)
    ub = block.user_block(1)
    assert ub.shape == (5, 5)
    # second user's delay-Doppler block starts at row 4, its angle is row 9
    full = block.matrix
    assert ub[0, 0] == full[4, 4]
    assert ub[-1, -1] == full[9, 9]


def test_expected_alpha_magnitudes_structure():
    model, params, chan, refl, _ = build_setup()
    mags = est.expected_alpha_magnitudes(model)
    assert mags.shape == (1, model.num_tx)
    assert np.all(mags > 0)
    filled = est.with_expected_alphas(model, params)
    assert filled[0].alphas is not None
    assert np.allclose(np.abs(filled[0].alphas), mags[0])
