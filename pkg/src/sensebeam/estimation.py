"""Multistatic echo synthesis, WNLS parameter estimation and its asymptotic covariance.

The received sensing signal at one Rx AP is stacked over subcarriers, symbols
and antennas into a single vector whose mean carries the LOS-to-LOS returns
of the sensing users and whose covariance collects every other return as a
structured disturbance: a sum of Kronecker products of rank-one temporal
matrices with rank-one or white spatial matrices, plus the noise floor.  The
low-rank-plus-identity structure is kept factorized so that weighting,
estimation and the covariance bound all run through one Woodbury solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor as _cho_factor, cho_solve as _cho_solve


def cho_factor(a):
    return _cho_factor(a, check_finite=False)


def cho_solve(factor, b):
    return _cho_solve(factor, b, check_finite=False)

from .channel import array_response, array_response_derivative
from .waveform import (
    _replica_from_symbols,
    replica_delay_derivative,
    replica_doppler_derivative,
)


class EstimationError(RuntimeError):
    pass


@dataclass
class UserEchoParams:
    """Parameters of one sensing user's echo at one Rx AP.

    Delay, Doppler and the complex LOS-to-LOS coefficient are per Tx AP; the
    angle of arrival is a single value at the Rx AP.
    """

    taus: np.ndarray              # (T,) s
    nus: np.ndarray               # (T,) Hz
    theta: float                  # rad
    alphas: np.ndarray | None = None   # (T,) complex, None when unknown

    def real_dim(self, with_alphas: bool = True) -> int:
        t = self.taus.size
        return 4 * t + 1 if with_alphas else 2 * t + 1


@dataclass
class EchoModel:
    """Epoch snapshot of everything the echo at one Rx AP depends on.

    Arrays indexed by the *position* of a Tx AP in ``tx_aps`` or of a user in
    ``sensing_users`` / ``comm_users``.  ``sens_symbols[t, j]`` is the grid the
    Tx AP at position ``t`` transmits toward the sensing user at position
    ``j`` (per-AP codes repeat over j; shared-waveform sensing carries the
    paired user's data).  Precoder slices are per (tx position, user id).
    """

    rx_ap: int
    tx_aps: np.ndarray            # (T,) AP indices
    sensing_users: list[int]
    comm_users: list[int]
    num_antennas: int
    noise_power: float
    rician_factor: float
    refl_second_moment: float     # E{|sigma_bar|^2}
    subcarrier_spacing: float
    symbol_time: float
    d_over_lambda: float
    betas_rx: np.ndarray          # (Ks,) beta at the Rx AP per sensing user
    betas_tx: np.ndarray          # (Ks, T) beta at each Tx AP per sensing user
    thetas_tx: np.ndarray         # (Ks, T) angle at each Tx AP per sensing user
    w_sens: np.ndarray            # (T, K, N) sensing precoder slices by user id
    w_comm: np.ndarray            # (T, K, N) communication precoder slices by user id
    sens_symbols: np.ndarray      # (T, Ks, Nc, Ns)
    comm_symbols: np.ndarray      # (Kc, Nc, Ns)
    include_comm_reflections: bool = True   # False under separate subcarriers

    @property
    def num_tx(self) -> int:
        return int(self.tx_aps.size)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.sens_symbols.shape[-2:]

    @property
    def stack_dim(self) -> int:
        nc, ns = self.grid_shape
        return nc * ns * self.num_antennas

    def replica(self, symbols: np.ndarray, tau: float, nu: float) -> np.ndarray:
        return _replica_from_symbols(symbols, tau, nu, self.subcarrier_spacing,
                                     self.symbol_time)

    def steering(self, theta: float) -> np.ndarray:
        return array_response(theta, self.num_antennas, self.d_over_lambda)


def alpha_coefficients(sigma_bar: complex, rician_factor: float, phi_rx: float,
                       beta_rx: float, h_los_tx: np.ndarray, h_nlos_tx: np.ndarray,
                       w: np.ndarray) -> tuple[complex, complex, complex, complex]:
    """The four channel coefficients of one echo path for one source precoder.

    Splits the product of the Rx and Tx channels into LOS/NLOS combinations:
    (LL, LN) multiply the Rx steering vector, (NL, NN) multiply the raw Rx
    NLOS draw.  ``h_los_tx``/``h_nlos_tx`` are the Tx-side channel parts of
    the *scattering* user; ``w`` is the source's precoder slice at that AP.
    """
    if h_los_tx.shape != w.shape:
        raise EstimationError(
            f"precoder/channel dimension mismatch: {w.shape} vs {h_los_tx.shape}")
    kr = rician_factor
    los_gain = h_los_tx @ w        # h_bar^T w (transpose, no conjugation)
    nlos_gain = h_nlos_tx @ w
    rx_los = np.exp(1j * phi_rx) * np.sqrt(beta_rx)
    a_ll = sigma_bar * kr / (1.0 + kr) * rx_los * los_gain
    a_ln = sigma_bar * np.sqrt(kr) / (1.0 + kr) * rx_los * nlos_gain
    a_nl = sigma_bar * np.sqrt(kr) / (1.0 + kr) * los_gain
    a_nn = sigma_bar * 1.0 / (1.0 + kr) * nlos_gain
    return a_ll, a_ln, a_nl, a_nn


# ---------------------------------------------------------------------------
# Structured covariance


class CovarianceModel:
    """R = sigma2 I + sum_j c_j (s_j kron v_j)(s_j kron v_j)^H, kept factorized.

    The Kronecker columns never need to be formed for inner products; the
    inverse acts through the Woodbury identity with one Cholesky factor of an
    r x r core.  Columns reference de-duplicated banks of temporal and
    spatial vectors (the white spatial part reuses one replica for all N unit
    vectors), so the grams scale with the bank sizes, not the rank.
    """

    def __init__(self, sigma2: float, temporal: np.ndarray, spatial: np.ndarray,
                 weights: np.ndarray, num_antennas: int,
                 temporal_index: np.ndarray | None = None,
                 spatial_index: np.ndarray | None = None):
        self.sigma2 = float(sigma2)
        t_bank = np.atleast_2d(np.asarray(temporal, complex))
        s_bank = np.atleast_2d(np.asarray(spatial, complex))
        weights = np.atleast_1d(np.asarray(weights, float))
        t_idx = (np.arange(t_bank.shape[0]) if temporal_index is None
                 else np.asarray(temporal_index, int))
        s_idx = (np.arange(s_bank.shape[0]) if spatial_index is None
                 else np.asarray(spatial_index, int))
        self.num_antennas = num_antennas
        self._u_cache = None
        keep = weights > 0
        self.weights = weights[keep]
        self._t_bank, self._s_bank = t_bank, s_bank
        self._t_idx, self._s_idx = t_idx[keep], s_idx[keep]
        self.rank = int(self.weights.size)
        if self.rank == 0:
            return
        tg = t_bank.conj() @ t_bank.T
        sg = s_bank.conj() @ s_bank.T
        uhu = tg[np.ix_(self._t_idx, self._t_idx)] * sg[np.ix_(self._s_idx, self._s_idx)]
        core = np.diag(self.sigma2 / self.weights) + uhu
        self._core_factor = cho_factor(core)

    @property
    def temporal(self) -> np.ndarray:
        return self._t_bank[self._t_idx]

    @property
    def spatial(self) -> np.ndarray:
        return self._s_bank[self._s_idx]

    @property
    def dim(self) -> int:
        return self._t_bank.shape[1] * self.num_antennas if self.rank else 0

    @property
    def _u(self) -> np.ndarray | None:
        if self.rank == 0:
            return None
        if self._u_cache is None:
            self._u_cache = (self.temporal[:, :, None]
                             * self.spatial[:, None, :]).reshape(self.rank, -1).T
        return self._u_cache

    def project(self, temporal: np.ndarray, spatial: np.ndarray) -> np.ndarray:
        """U^H (s kron a) for a factorized vector, via factorized dots."""
        if self.rank == 0:
            return np.zeros(0, complex)
        return ((self._t_bank.conj() @ temporal)[self._t_idx]
                * (self._s_bank.conj() @ spatial)[self._s_idx])

    def project_terms(self, kron_terms: "KronTerms") -> np.ndarray:
        """U^H T for a bank of Kronecker terms, shape (rank, n_terms)."""
        if self.rank == 0:
            return np.zeros((0, kron_terms.count), complex)
        return ((self._t_bank.conj() @ kron_terms.temporal.T)[self._t_idx]
                * (self._s_bank.conj() @ kron_terms.spatial.T)[self._s_idx])

    def project_stacked(self, y: np.ndarray) -> np.ndarray:
        """U^H y for a stacked vector (dim,) without materializing U."""
        if self.rank == 0:
            return np.zeros(0, complex)
        y_mat = y.reshape(-1, self.num_antennas)
        p = self._t_bank.conj() @ (y_mat @ self._s_bank.conj().T)   # (u_t, u_s)
        return p[self._t_idx, self._s_idx]

    def solve(self, y: np.ndarray) -> np.ndarray:
        """R^{-1} y for stacked y, shape (dim,) or (dim, m)."""
        if self.rank == 0:
            return y / self.sigma2
        z = self._u.conj().T @ y
        return (y - self._u @ cho_solve(self._core_factor, z)) / self.sigma2

    def quad(self, x: np.ndarray, y: np.ndarray):
        """x^H R^{-1} y."""
        return x.conj().T @ self.solve(y)

    def core_solve(self, z: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return z
        return cho_solve(self._core_factor, z)

    def weighted_gram(self, bhb: np.ndarray, uhb: np.ndarray) -> np.ndarray:
        """B^H R^{-1} B from plain grams B^H B (m x m) and U^H B (r x m)."""
        if self.rank == 0:
            return bhb / self.sigma2
        return (bhb - uhb.conj().T @ self.core_solve(uhb)) / self.sigma2

    def weighted_dot(self, bhy: np.ndarray, uhb: np.ndarray, uhy: np.ndarray) -> np.ndarray:
        """B^H R^{-1} y from the plain dots B^H y, U^H B and U^H y."""
        if self.rank == 0:
            return bhy / self.sigma2
        return (bhy - uhb.conj().T @ self.core_solve(uhy)) / self.sigma2

    def dense(self) -> np.ndarray:
        """Explicit matrix; only for small stacks (tests and oracles)."""
        if self.rank == 0:
            raise EstimationError("dense() needs at least one column to infer the dimension")
        u = self._u
        r = self.sigma2 * np.eye(self.dim, dtype=complex)
        r += (u * self.weights) @ u.conj().T
        return r


@dataclass
class KronTerms:
    """Bank of factorized vectors sum_i coef_i (s_i kron v_i) grouped into columns.

    ``column[i]`` says which output column term i belongs to, so a column may
    be a sum of several Kronecker terms (the angle gradient is).
    """

    temporal: np.ndarray   # (m, Td)
    spatial: np.ndarray    # (m, N)
    coefs: np.ndarray      # (m,) complex
    column: np.ndarray     # (m,) int
    num_columns: int

    @property
    def count(self) -> int:
        return int(self.coefs.size)

    def column_map(self) -> np.ndarray:
        """(m, num_columns) matrix mapping weighted terms to columns."""
        m = np.zeros((self.count, self.num_columns), complex)
        m[np.arange(self.count), self.column] = self.coefs
        return m

    def gram(self) -> np.ndarray:
        """G^H G of the column bank via factorized dots."""
        tg = self.temporal.conj() @ self.temporal.T
        sg = self.spatial.conj() @ self.spatial.T
        cmap = self.column_map()
        return cmap.conj().T @ (tg * sg) @ cmap

    def dot_stacked(self, y: np.ndarray) -> np.ndarray:
        """G^H y for a stacked vector, shape (num_columns,)."""
        n = self.spatial.shape[1]
        y_mat = y.reshape(-1, n)
        p = y_mat @ self.spatial.conj().T                    # (Td, m)
        per_term = np.einsum("mt,tm->m", self.temporal.conj(), p)
        return self.column_map().conj().T @ per_term


def identity_covariance(sigma2: float = 1.0) -> CovarianceModel:
    """Unweighted model: R = sigma2 I (used for the W = I estimator variant)."""
    return CovarianceModel(sigma2, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0), 1)


# ---------------------------------------------------------------------------
# Mean signal and its analytic gradients


def mean_signal(model: EchoModel, params: list[UserEchoParams]) -> np.ndarray:
    """Deterministic part of the stacked received signal.

    Only the LOS-to-LOS sensing returns contribute; every other component has
    zero mean thanks to the uniformly distributed phases.
    """
    out = np.zeros(model.stack_dim, complex)
    for j, p in enumerate(params):
        if p.alphas is None:
            raise EstimationError("mean_signal needs the complex path coefficients")
        a_rx = model.steering(p.theta)
        for t in range(model.num_tx):
            if p.alphas[t] == 0:
                continue
            s = model.replica(model.sens_symbols[t, j], p.taus[t], p.nus[t])
            out += p.alphas[t] * np.kron(s, a_rx)
    return out


def _user_gradient_terms(model: EchoModel, user_pos: int, p: UserEchoParams,
                         col_offset: int = 0):
    """Kronecker terms of d mu / d phi for one user's columns.

    Column order is [taus, nus, theta, Re alpha, Im alpha]; the angle column
    is a sum of one term per Tx AP, everything else is a single term.
    """
    if p.alphas is None:
        raise EstimationError("gradients need the complex path coefficients")
    t_count = model.num_tx
    df, tsym = model.subcarrier_spacing, model.symbol_time
    a_rx = model.steering(p.theta)
    da_rx = array_response_derivative(p.theta, model.num_antennas, model.d_over_lambda)
    temporal, spatial, coefs, column = [], [], [], []
    for t in range(t_count):
        sym = model.sens_symbols[t, user_pos]
        s = model.replica(sym, p.taus[t], p.nus[t])
        ds_tau = replica_delay_derivative(sym, p.taus[t], p.nus[t], df, tsym)
        ds_nu = replica_doppler_derivative(sym, p.taus[t], p.nus[t], df, tsym)
        temporal += [ds_tau, ds_nu, s, s, s]
        spatial += [a_rx, a_rx, da_rx, a_rx, a_rx]
        coefs += [p.alphas[t], p.alphas[t], p.alphas[t], 1.0, 1.0j]
        column += [col_offset + t, col_offset + t_count + t, col_offset + 2 * t_count,
                   col_offset + 2 * t_count + 1 + t, col_offset + 3 * t_count + 1 + t]
    return temporal, spatial, coefs, column


def gradient_terms(model: EchoModel, params: list[UserEchoParams]) -> KronTerms:
    """Factorized d mu / d Phi with per-user column blocks in user order."""
    t_count = model.num_tx
    per_user = 4 * t_count + 1
    temporal, spatial, coefs, column = [], [], [], []
    for j, p in enumerate(params):
        tt, ss, cc, col = _user_gradient_terms(model, j, p, col_offset=j * per_user)
        temporal += tt
        spatial += ss
        coefs += cc
        column += col
    return KronTerms(temporal=np.array(temporal), spatial=np.array(spatial),
                     coefs=np.array(coefs, complex), column=np.array(column, int),
                     num_columns=per_user * len(params))


def mean_gradients(model: EchoModel, params: list[UserEchoParams]) -> np.ndarray:
    """Dense d mu / d Phi, materialized from the factorized terms."""
    terms = gradient_terms(model, params)
    cols = np.zeros((model.stack_dim, terms.num_columns), complex)
    for i in range(terms.count):
        cols[:, terms.column[i]] += terms.coefs[i] * np.kron(terms.temporal[i],
                                                             terms.spatial[i])
    return cols


# ---------------------------------------------------------------------------
# Received covariance


def _tx_side_gains(model: EchoModel, user_pos: int, t: int, w: np.ndarray) -> tuple[float, float]:
    """(LOS power gain, NLOS power gain) of one source precoder at one Tx AP."""
    beta_tx = model.betas_tx[user_pos, t]
    a_tx = array_response(model.thetas_tx[user_pos, t], model.num_antennas,
                          model.d_over_lambda)
    los = beta_tx * abs(a_tx @ w) ** 2
    nlos = beta_tx * float(np.vdot(w, w).real)   # white NLOS: w^T (beta I) w*
    return los, nlos


def expected_alpha_magnitudes(model: EchoModel) -> np.ndarray:
    """Root-mean-square LOS path coefficients implied by the model statistics.

    Used to evaluate the covariance bound before any echo has been observed,
    when the realized coefficients are unknown.
    """
    kr = model.rician_factor
    out = np.zeros((len(model.sensing_users), model.num_tx))
    for j, k in enumerate(model.sensing_users):
        for t in range(model.num_tx):
            los, _ = _tx_side_gains(model, j, t, model.w_sens[t, k])
            out[j, t] = np.sqrt(model.refl_second_moment * (kr / (1.0 + kr)) ** 2
                                * model.betas_rx[j] * los)
    return out


def with_expected_alphas(model: EchoModel, params: list[UserEchoParams]) -> list[UserEchoParams]:
    """Fill missing path coefficients with their RMS magnitudes (zero phase)."""
    mags = expected_alpha_magnitudes(model)
    out = []
    for j, p in enumerate(params):
        if p.alphas is None:
            out.append(replace(p, alphas=mags[j].astype(complex)))
        else:
            out.append(p)
    return out


def received_covariance(model: EchoModel, params: list[UserEchoParams]) -> CovarianceModel:
    """Structured covariance of the stacked received signal.

    Every disturbance return scattered off sensing user k keeps that user's
    delay/Doppler signature but carries another source's waveform.  Sources
    scattering off the same target share that target's reflection
    coefficient, LOS phase and NLOS draws, so their coefficients are jointly
    Gaussian with a small per-(target, Tx AP) covariance whose eigenvectors
    become temporal combination columns; the steering-vector and Rx-NLOS
    spatial parts stay uncorrelated thanks to the uniform LOS phase.
    """
    kr = model.rician_factor
    mu2 = model.refl_second_moment
    kr_los = kr / (1.0 + kr)
    kappa2 = kr / (1.0 + kr) ** 2          # |sqrt(kr)/(1+kr)|^2
    nn2 = 1.0 / (1.0 + kr) ** 2
    n_ant = model.num_antennas
    s_bank = (np.vstack([np.stack([model.steering(p.theta) for p in params]),
                         np.eye(n_ant, dtype=complex)])
              if params else np.eye(n_ant, dtype=complex))
    t_bank, t_idx, s_idx, weights = [], [], [], []

    for j, p in enumerate(params):
        beta_rx = model.betas_rx[j]
        for t in range(model.num_tx):
            tau, nu = p.taus[t], p.nus[t]
            beta_tx = model.betas_tx[j, t]
            a_tx = array_response(model.thetas_tx[j, t], n_ant, model.d_over_lambda)
            sources = [(model.sens_symbols[t, jp], model.w_sens[t, kp], jp == j)
                       for jp, kp in enumerate(model.sensing_users)]
            if model.include_comm_reflections:
                sources += [(model.comm_symbols[ip], model.w_comm[t, i], False)
                            for ip, i in enumerate(model.comm_users)]
            replicas = np.stack([model.replica(sym, tau, nu) for sym, _, _ in sources])
            w_mat = np.stack([w for _, w, _ in sources])
            los_gain = np.sqrt(beta_tx) * (w_mat @ a_tx)        # h_bar_tx^T w_i / phase
            gram = beta_tx * (w_mat @ w_mat.conj().T)           # E{(h_N^T w_i)(h_N^T w_j)*}
            los_outer = np.outer(los_gain, los_gain.conj())
            # LOS-to-LOS parts of the own return belong to the mean, not here
            self_pos = [i for i, (_, _, is_self) in enumerate(sources) if is_self]
            los_masked = los_outer.copy()
            for i in self_pos:
                los_masked[i, :] = 0.0
                los_masked[:, i] = 0.0
            c_steer = mu2 * beta_rx * (kr_los**2 * los_masked + kappa2 * gram)
            c_nlos = mu2 * (kappa2 * los_outer + nn2 * gram)

            for coef_cov, spatial_positions, scale in (
                    (c_steer, [j], 1.0),
                    (c_nlos, [len(params) + n for n in range(n_ant)], beta_rx)):
                coef_cov = (coef_cov + coef_cov.conj().T) / 2.0
                vals, vecs = np.linalg.eigh(coef_cov)
                tol = max(vals.max(initial=0.0), 0.0) * 1e-14
                for lam_val, vec in zip(vals, vecs.T):
                    if lam_val <= tol:
                        continue
                    t_bank.append(replicas.T @ vec)
                    pos = len(t_bank) - 1
                    for sp in spatial_positions:
                        t_idx.append(pos)
                        s_idx.append(sp)
                        weights.append(lam_val * scale)

    nc, ns = model.grid_shape
    if not t_bank:
        t_bank = np.zeros((1, nc * ns), complex)
    return CovarianceModel(model.noise_power, np.array(t_bank), s_bank,
                           np.array(weights, float), n_ant,
                           temporal_index=np.array(t_idx, int),
                           spatial_index=np.array(s_idx, int))


# ---------------------------------------------------------------------------
# Signal synthesis


def synthesize_received(model: EchoModel, params: list[UserEchoParams], chan,
                        refl, rng: np.random.Generator,
                        noise: bool = True) -> tuple[np.ndarray, list[UserEchoParams]]:
    """Draw one realization of the stacked received signal.

    ``chan`` and ``refl`` carry the epoch's channel and reflection
    realizations; ``params`` carries the true delays/Dopplers/angles (the
    complex path coefficients are computed here from the realizations and
    returned alongside).  All scattering paths associated with one user share
    that user's delay-Doppler pair.
    """
    y = np.zeros(model.stack_dim, complex)
    true_params = []
    for j, p in enumerate(params):
        k = model.sensing_users[j]
        a_rx = model.steering(p.theta)
        h_nlos_rx = chan.h_nlos[model.rx_ap, k]
        alphas = np.zeros(model.num_tx, complex)
        for t in range(model.num_tx):
            tx = model.tx_aps[t]
            sigma_bar = refl.sigma_bar[model.rx_ap, tx, k]
            phi_rx = chan.phi[model.rx_ap, k]
            beta_rx = chan.beta[model.rx_ap, k]
            h_los_tx = chan.h_los[tx, k]
            h_nlos_tx = chan.h_nlos[tx, k]
            for jp, kp in enumerate(model.sensing_users):
                a_ll, a_ln, a_nl, a_nn = alpha_coefficients(
                    sigma_bar, model.rician_factor, phi_rx, beta_rx,
                    h_los_tx, h_nlos_tx, model.w_sens[t, kp])
                s = model.replica(model.sens_symbols[t, jp], p.taus[t], p.nus[t])
                y += np.kron(s, (a_ll + a_ln) * a_rx + (a_nl + a_nn) * h_nlos_rx)
                if jp == j:
                    alphas[t] = a_ll
            if model.include_comm_reflections:
                for ip, i in enumerate(model.comm_users):
                    a_ll, a_ln, a_nl, a_nn = alpha_coefficients(
                        sigma_bar, model.rician_factor, phi_rx, beta_rx,
                        h_los_tx, h_nlos_tx, model.w_comm[t, i])
                    s = model.replica(model.comm_symbols[ip], p.taus[t], p.nus[t])
                    y += np.kron(s, (a_ll + a_ln) * a_rx + (a_nl + a_nn) * h_nlos_rx)
        true_params.append(replace(p, alphas=alphas))
    if noise:
        scale = np.sqrt(model.noise_power / 2.0)
        y += scale * (rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size))
    return y, true_params


# ---------------------------------------------------------------------------
# WNLS estimator


def detection_threshold(num_tx: int) -> float:
    """Fitted-energy level that separates real echoes from pure-noise fits.

    Fitting one complex coefficient per Tx AP, tuned over the coarse grid,
    captures about five whitened-noise units per path on pure noise; four
    standard deviations of margin keep false detections rare.
    """
    base = 5.0 * num_tx
    return base + 4.0 * np.sqrt(base)


@dataclass
class SearchSpan:
    """Half-widths and grid sizes of the per-user coarse search box."""

    tau: float
    nu: float
    theta: float
    n_tau: int = 13
    n_nu: int = 13
    n_theta: int = 13


@dataclass
class WnlsResult:
    estimates: list[UserEchoParams]
    converged: bool
    cost: float
    fit_gains: list[float] = field(default_factory=list)   # weighted energy captured per user
    path_gains: list[np.ndarray] = field(default_factory=list)  # per (user, tx path)
    warnings: list[str] = field(default_factory=list)


def _profiled_fit(model: EchoModel, cov: CovarianceModel, y: np.ndarray,
                  user_pos: int, taus, nus, theta,
                  uhy: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Closed-form weighted LS for the path coefficients at fixed kinematics.

    Returns the coefficient vector and the (weighted) cost reduction it
    achieves; larger reduction means a better grid point.  All inner products
    run through the Kronecker factorization.
    """
    t_count = model.num_tx
    n_ant = model.num_antennas
    a_rx = model.steering(theta)
    s_mat = np.stack([model.replica(model.sens_symbols[t, user_pos], taus[t], nus[t])
                      for t in range(t_count)])                       # (T, Td)
    bhb = (s_mat.conj() @ s_mat.T) * float(n_ant)
    y_a = y.reshape(-1, n_ant) @ a_rx.conj()                          # (Td,)
    bhy = s_mat.conj() @ y_a
    if cov.rank:
        uhb = ((cov._t_bank.conj() @ s_mat.T)[cov._t_idx]
               * (cov._s_bank.conj() @ a_rx)[cov._s_idx][:, None])    # (r, T)
    else:
        uhb = np.zeros((0, t_count), complex)
    if uhy is None:
        uhy = cov.project_stacked(y)
    gram = cov.weighted_gram(bhb, uhb)
    gram = (gram + gram.conj().T) / 2.0
    g = cov.weighted_dot(bhy, uhb, uhy)
    try:
        alphas = np.linalg.solve(gram, g)
    except np.linalg.LinAlgError:
        alphas = np.linalg.lstsq(gram, g, rcond=None)[0]
    reduction = float(np.real(g.conj() @ alphas))
    return alphas, reduction, np.real(np.diag(gram))


class _CoarseFilter:
    """Matched-filter delay/Doppler search with the replicas cached per user.

    The replicas depend only on the delay grid, not on the angle hypothesis,
    so one cache serves the whole angle sweep.  The statistic
    |b^H y|^2 / ||b||^2 factorizes over the Kronecker structure.
    """

    def __init__(self, model: EchoModel, user_pos: int, pred: UserEchoParams,
                 span: SearchSpan):
        self.model = model
        self.pred = pred
        nc, ns = model.grid_shape
        self.tau_grids = np.maximum(
            pred.taus[:, None] + np.linspace(-span.tau, span.tau, span.n_tau), 0.0)
        self.nu_grids = pred.nus[:, None] + np.linspace(-span.nu, span.nu, span.n_nu)
        reps = np.empty((model.num_tx, span.n_tau, ns, nc), complex)
        for t in range(model.num_tx):
            for i, tau in enumerate(self.tau_grids[t]):
                reps[t, i] = model.replica(model.sens_symbols[t, user_pos],
                                           tau, 0.0).reshape(ns, nc)
        self.reps = reps
        b_idx = np.arange(ns)
        # (T, Ns, n_nu) Doppler steering per path
        self.dopp = np.exp(2j * np.pi * b_idx[None, :, None] * model.symbol_time
                           * self.nu_grids[:, None, :])

    def picks(self, y: np.ndarray, theta: float, paths=None) -> tuple[np.ndarray, np.ndarray]:
        model = self.model
        nc, ns = model.grid_shape
        a_rx = model.steering(theta)
        y_a = (y.reshape(nc * ns, model.num_antennas) @ a_rx.conj()).reshape(ns, nc)
        taus_out = self.pred.taus.astype(float).copy()
        nus_out = self.pred.nus.astype(float).copy()
        path_list = range(model.num_tx) if paths is None else paths
        for t in path_list:
            z = np.einsum("ibm,bm->ib", self.reps[t].conj(), y_a)   # (n_tau, Ns)
            stats = np.abs(z @ self.dopp[t].conj()) ** 2            # (n_tau, n_nu)
            i, j = np.unravel_index(int(np.argmax(stats)), stats.shape)
            taus_out[t] = self.tau_grids[t, i]
            nus_out[t] = self.nu_grids[t, j]
        return taus_out, nus_out


def _refine_user(model: EchoModel, cov: CovarianceModel, y: np.ndarray,
                 user_pos: int, start: UserEchoParams, max_iters: int = 30
                 ) -> tuple[UserEchoParams, float, bool]:
    """Damped Gauss-Newton on the weighted cost with profiled coefficients.

    Steps that do not decrease the cost are halved away, so the cost is
    non-increasing across iterations by construction.
    """
    t_count = model.num_tx
    taus = start.taus.astype(float).copy()
    nus = start.nus.astype(float).copy()
    theta = float(start.theta)
    uhy = cov.project_stacked(y)
    alphas, red, _ = _profiled_fit(model, cov, y, user_pos, taus, nus, theta, uhy)
    base_cost = float((np.vdot(y, y).real
                       - np.real(uhy.conj() @ cov.core_solve(uhy))) / cov.sigma2)
    cost = base_cost - red
    converged = False
    # scales make the step-size test dimensionless across delay/Doppler/angle
    nc, ns = model.grid_shape
    scales = np.concatenate([
        np.full(t_count, 1.0 / (nc * model.subcarrier_spacing)),
        np.full(t_count, 1.0 / (ns * model.symbol_time)),
        [0.05],
    ])
    for _ in range(max_iters):
        p = UserEchoParams(taus=taus, nus=nus, theta=theta, alphas=alphas)
        tt, ss, cc, col = _user_gradient_terms(model, user_pos, p)
        terms = KronTerms(temporal=np.array(tt), spatial=np.array(ss),
                          coefs=np.array(cc, complex), column=np.array(col, int),
                          num_columns=4 * t_count + 1)
        r = y - mean_signal_single(model, user_pos, p)
        cmap = terms.column_map()
        uhg = cov.project_terms(terms) @ cmap if cov.rank else np.zeros((0, terms.num_columns), complex)
        h = 2.0 * np.real(cov.weighted_gram(terms.gram(), uhg))
        ghr = terms.dot_stacked(r)
        uhr = cov.project_stacked(r)
        g = -2.0 * np.real(cov.weighted_dot(ghr, uhg, uhr))
        d = np.sqrt(np.clip(np.diag(h), 1e-300, None))
        try:
            step = np.linalg.solve(h / np.outer(d, d) + 1e-9 * np.eye(h.shape[0]),
                                   -g / d) / d
        except np.linalg.LinAlgError:
            break
        kin_step = step[: 2 * t_count + 1]
        improved = False
        lam = 1.0
        for _ in range(10):
            new_taus = np.maximum(taus + lam * kin_step[:t_count], 0.0)
            new_nus = nus + lam * kin_step[t_count:2 * t_count]
            new_theta = float(np.clip(theta + lam * kin_step[2 * t_count],
                                      -np.pi / 2 + 1e-6, np.pi / 2 - 1e-6))
            new_alphas, new_red, _ = _profiled_fit(model, cov, y, user_pos,
                                                   new_taus, new_nus, new_theta, uhy)
            new_cost = base_cost - new_red
            if new_cost < cost - 1e-15 * abs(cost):
                taus, nus, theta, alphas, cost = new_taus, new_nus, new_theta, new_alphas, new_cost
                improved = True
                break
            lam /= 2.0
        rel_step = np.abs(lam * kin_step) / scales
        if not improved or np.max(rel_step) < 1e-9:
            converged = True
            break
    return UserEchoParams(taus=taus, nus=nus, theta=theta, alphas=alphas), cost, converged


def mean_signal_single(model: EchoModel, user_pos: int, p: UserEchoParams) -> np.ndarray:
    a_rx = model.steering(p.theta)
    out = np.zeros(model.stack_dim, complex)
    for t in range(model.num_tx):
        s = model.replica(model.sens_symbols[t, user_pos], p.taus[t], p.nus[t])
        out += p.alphas[t] * np.kron(s, a_rx)
    return out


def wnls_estimate(model: EchoModel, y: np.ndarray, cov: CovarianceModel,
                  predictions: list[UserEchoParams],
                  spans: list[SearchSpan] | SearchSpan,
                  order: list[int] | None = None,
                  refine_gate: float = 0.0) -> WnlsResult:
    """Weighted nonlinear least-squares estimate of all sensing users' parameters.

    Users are estimated sequentially (strongest predicted return first, unless
    ``order`` is given), each against the residual of the previously fitted
    users: a coarse matched-filter grid over angle and per-Tx-AP delay/Doppler
    seeds the fit, then a damped Gauss-Newton pass refines the weighted cost
    with the complex coefficients profiled out in closed form at every step.
    When the coarse fit captures less weighted energy than ``refine_gate`` the
    refinement is skipped (there is nothing above the noise to polish).
    """
    n_users = len(predictions)
    if isinstance(spans, SearchSpan):
        spans = [spans] * n_users
    if order is None:
        strength = [model.betas_rx[j] * np.sum(model.betas_tx[j]) for j in range(n_users)]
        order = list(np.argsort(strength)[::-1])
    estimates: list[UserEchoParams | None] = [None] * n_users
    gains = [0.0] * n_users
    path_gains: list[np.ndarray | None] = [None] * n_users
    warnings = []
    residual = y.copy()
    total_cost = np.nan
    all_converged = True
    for j in order:
        pred, span = predictions[j], spans[j]
        thetas = pred.theta + np.linspace(-span.theta, span.theta, span.n_theta)
        thetas = np.clip(thetas, -np.pi / 2 + 1e-6, np.pi / 2 - 1e-6)
        uhy = cov.project_stacked(residual)
        base = float((np.vdot(residual, residual).real
                      - np.real(uhy.conj() @ cov.core_solve(uhy))) / cov.sigma2)
        mf = _CoarseFilter(model, j, pred, span)
        best = None
        for theta in thetas:
            taus, nus = mf.picks(residual, theta)
            alphas, red, _ = _profiled_fit(model, cov, residual, j, taus, nus, theta, uhy)
            if best is None or red > best[0]:
                best = (red, theta, taus, nus, alphas)
        red, theta, taus, nus, alphas = best
        # successive-cancellation cleanup: re-pick each path against the
        # residual with the other paths removed, so a weak path cannot lock
        # onto a strong path's cross-ambiguity ridge
        a_rx = model.steering(theta)
        for _ in range(2):
            comps = np.stack([alphas[t] * np.kron(
                model.replica(model.sens_symbols[t, j], taus[t], nus[t]), a_rx)
                for t in range(model.num_tx)])
            total = comps.sum(axis=0)
            for t in np.argsort(np.abs(alphas))[::-1]:
                cleaned = residual - (total - comps[t])
                taus_t, nus_t = mf.picks(cleaned, theta, paths=[t])
                taus[t], nus[t] = taus_t[t], nus_t[t]
            alphas, red, _ = _profiled_fit(model, cov, residual, j, taus, nus, theta, uhy)
        start = UserEchoParams(taus=taus, nus=nus, theta=theta, alphas=alphas)
        if red >= refine_gate:
            est, cost, converged = _refine_user(model, cov, residual, j, start)
            if not converged:
                warnings.append(f"user {model.sensing_users[j]}: refinement hit the iteration cap")
                all_converged = False
        else:
            est, cost = start, base - red
        estimates[j] = est
        gains[j] = base - cost
        _, _, gram_diag = _profiled_fit(model, cov, residual, j, est.taus, est.nus,
                                        est.theta, uhy)
        path_gains[j] = np.abs(est.alphas) ** 2 * gram_diag
        residual = residual - mean_signal_single(model, j, est)
        total_cost = cost
    return WnlsResult(estimates=list(estimates), converged=all_converged,
                      cost=float(total_cost), fit_gains=gains,
                      path_gains=list(path_gains), warnings=warnings)


# ---------------------------------------------------------------------------
# Asymptotic covariance of the estimator


@dataclass
class AcmBlock:
    """Covariance over the stacked [delay-Doppler; angle] parameters at one Rx AP.

    ``matrix`` orders parameters as all users' (taus, nus) blocks first, then
    all users' angles, mirroring the nuisance-free information matrix.
    """

    matrix: np.ndarray
    num_tx: int
    sensing_users: list[int]

    def user_block(self, user_pos: int) -> np.ndarray:
        """Per-user block reordered to measurement order [taus, nus, theta]."""
        t = self.num_tx
        ks = len(self.sensing_users)
        idx = list(range(user_pos * 2 * t, (user_pos + 1) * 2 * t)) + [2 * t * ks + user_pos]
        return self.matrix[np.ix_(idx, idx)]


def acm(model: EchoModel, params: list[UserEchoParams],
        cov: CovarianceModel | None = None) -> AcmBlock:
    """Asymptotic covariance of the WNLS estimates with nuisance parameters removed.

    Builds the information matrix from the analytic mean gradients and the
    inverse received covariance, then removes the complex-coefficient block by
    its Schur complement.  Raises when that block is singular (degenerate
    geometry), naming the offending user.
    """
    if cov is None:
        cov = received_covariance(model, params)
    terms = gradient_terms(model, params)
    cmap = terms.column_map()
    uhg = (cov.project_terms(terms) @ cmap if cov.rank
           else np.zeros((0, terms.num_columns), complex))
    info = 2.0 * np.real(cov.weighted_gram(terms.gram(), uhg))

    t = model.num_tx
    per_user = 4 * t + 1
    eta_idx, theta_idx, alpha_idx = [], [], []
    for j in range(len(params)):
        base = j * per_user
        eta_idx.extend(range(base, base + 2 * t))
        theta_idx.append(base + 2 * t)
        alpha_idx.extend(range(base + 2 * t + 1, base + per_user))
    keep = eta_idx + theta_idx
    a_kk = info[np.ix_(keep, keep)]
    a_ka = info[np.ix_(keep, alpha_idx)]
    a_aa = info[np.ix_(alpha_idx, alpha_idx)]
    try:
        schur = a_kk - a_ka @ cho_solve(cho_factor(a_aa), a_ka.T)
    except np.linalg.LinAlgError:
        for j, p in enumerate(params):
            block = info[np.ix_(alpha_idx[j * 2 * t:(j + 1) * 2 * t],
                                alpha_idx[j * 2 * t:(j + 1) * 2 * t])]
            if np.linalg.cond(block) > 1e12:
                raise EstimationError(
                    f"singular coefficient block for user {model.sensing_users[j]}; "
                    "the geometry does not excite its echo") from None
        raise EstimationError("singular coefficient block in the information matrix") from None
    try:
        matrix = np.linalg.inv(schur)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"information matrix is singular: {exc}") from exc
    matrix = (matrix + matrix.T) / 2.0
    return AcmBlock(matrix=matrix, num_tx=t, sensing_users=list(model.sensing_users))
