"""Epoch loop, Monte-Carlo sweeps and artifact export.

Each epoch follows the frame structure: decide sensing per user from the
predicted angle variance, then either run the sensing chain (Rx-AP selection,
echo synthesis, parameter estimation, filter update) or only propagate the
filters, and finally form predictive precoders and report the communication
performance of the active users.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import beamforming as bf
from . import channel as ch
from . import estimation as est
from . import evaluation as ev
from . import management as mgmt
from . import scenario as sc
from . import tracking as tr
from . import waveform as wf

PACKAGE_VERSION = "0.1.0"

CSV_HEADER = ["epoch", "user", "scheme", "precoder", "sinr_db", "se_bps_hz",
              "sensing", "var_pred_deg2", "px_true", "px_est",
              "theta_true_deg", "theta_est_deg"]

PRECODERS = ("mmse", "zf", "mr")


@dataclass
class RunOptions:
    scheme: str = wf.SCHEME_SS_SEW
    precoder: str = "mmse"
    trials: int = 1
    perfect_csi: bool = False
    baseline: str | None = None        # None | "conventional" | "single-tx"
    collect_series: bool = True

    def __post_init__(self):
        self.scheme = wf.normalize_scheme(self.scheme)
        if self.precoder not in PRECODERS:
            raise ValueError(f"unknown precoder {self.precoder!r}; expected {PRECODERS}")
        if self.baseline not in (None, "conventional", "single-tx"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass
class RunArtifacts:
    rows: list[list]
    summary: dict
    manifest: dict
    se_matrix: np.ndarray | None = None        # (epochs, K) per trial stacked
    sensing_matrix: np.ndarray | None = None   # (epochs, K) bools
    tracking_log: list[dict] = field(default_factory=list)


def _config_hash(config: sc.ScenarioConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def trial_seed(base_seed: int, trial: int) -> int:
    return int(base_seed) + 1000003 * int(trial)


# ---------------------------------------------------------------------------
# Per-epoch helpers


class _EpochContext:
    """Caches the per-epoch quantities shared by precoding, selection and echoes."""

    def __init__(self, config, geometry, options, epoch, truths, tracks, threshold):
        self.config = config
        self.geometry = geometry
        self.options = options
        self.epoch = epoch
        self.truths = truths
        self.tracks = tracks
        self.threshold = threshold
        self.probes = {}            # user -> probe x position during acquisition
        positions = np.array([t.p_x for t in truths])
        self.chan, self.refl = ch.channels_for_epoch(config, geometry, positions, epoch)
        self.allocation = wf.allocate_subcarriers(options.scheme,
                                                  config.subcarrier_fraction,
                                                  config.num_subcarriers)
        self._data_grids = None
        self._banks = {}

    @property
    def data_grids(self) -> np.ndarray:
        """Per-user data grids for this epoch, shape (K, N_c, N_s)."""
        if self._data_grids is None:
            cfg = self.config
            rng = sc.stream(cfg.rng_seed, "data", self.epoch)
            grids = [wf.data_symbol_grid(k, cfg.num_subcarriers, cfg.num_symbols,
                                         rng, self.options.scheme, self.allocation).symbols
                     for k in range(cfg.num_users)]
            self._data_grids = np.array(grids)
        return self._data_grids

    def sensing_grid(self, tx_ap: int) -> np.ndarray:
        cfg = self.config
        alloc = self.allocation if self.options.scheme == wf.SCHEME_SES else None
        return wf.sensing_code_grid(tx_ap, cfg.num_subcarriers, cfg.num_symbols,
                                    self.options.scheme, alloc).symbols

    def predicted_tx_channels(self, tx_aps: np.ndarray) -> list[bf.PredictedChannel]:
        cfg, geom = self.config, self.geometry
        out = []
        for k in range(cfg.num_users):
            if self.options.perfect_csi:
                # benchmark with perfect kinematic knowledge: exact gain and
                # angle per AP, but no LOS phase (sensing cannot observe it)
                h_parts = []
                betas = []
                for ap in tx_aps:
                    a = ch.array_response(self.chan.theta[ap, k], geom.antennas_per_ap,
                                          geom.antenna_spacing_ratio)
                    h_parts.append(np.sqrt(self.chan.beta[ap, k]) * a)
                    betas.append(self.chan.beta[ap, k])
                dim = len(tx_aps) * geom.antennas_per_ap
                out.append(bf.PredictedChannel(
                    h_bar=np.concatenate(h_parts), beta_hat=np.array(betas),
                    error_cov=np.zeros((dim, dim), complex)))
            else:
                out.append(bf.predicted_channel(self.tracks[k], geom, tx_aps,
                                                cfg.road_offset, cfg.wavelength))
        return out

    def precoder_bank(self, tx_aps: np.ndarray, comm_users, sensing_users) -> bf.PrecoderBank:
        key = (tuple(int(a) for a in tx_aps), tuple(sorted(comm_users)),
               tuple(sorted(sensing_users)))
        if key in self._banks:
            return self._banks[key]
        cfg = self.config
        tx_aps = np.asarray(tx_aps, int)
        channels = self.predicted_tx_channels(tx_aps)
        totals = np.array([chn.beta_hat.sum() for chn in channels])
        denom_set = np.asarray(comm_users if len(comm_users) else sensing_users, int)
        rho = bf.power_allocation(totals, cfg.per_ap_power, denom_set)
        q = rho / cfg.noise_power
        if self.options.precoder == "mmse":
            w_bar = bf.mmse_precoder(channels, q, cfg.rician_factor, cfg.noise_power)
        elif self.options.precoder == "zf":
            w_bar = bf.zf_precoder(channels)
        else:
            w_bar = bf.mr_precoder(channels)
        for k, probe_px in self.probes.items():
            # acquisition probe: conjugate beam toward the scanned position
            w_bar[k] = self._probe_direction(probe_px, tx_aps)
        bank = bf.normalize_precoders(w_bar, rho, cfg.power_fraction, tx_aps,
                                      cfg.num_aps, cfg.antennas_per_ap,
                                      self.options.scheme)
        if self.options.baseline is None:
            # a sensing user has no concurrent downlink, so its reserved
            # communication power would idle: its beam senses at full power
            bank = replace(bank, w_sens=bank.w_total)
        bank = self._cap_per_ap_power(bank, comm_users, sensing_users, tx_aps)
        self._banks[key] = bank
        return bank

    def _probe_direction(self, probe_px: float, tx_aps: np.ndarray) -> np.ndarray:
        cfg, geom = self.config, self.geometry
        parts = []
        for ap in tx_aps:
            delta = probe_px - geom.ap_positions[ap]
            r = np.hypot(delta, cfg.road_offset)
            theta = np.arctan(delta / cfg.road_offset)
            a = ch.array_response(theta, geom.antennas_per_ap, geom.antenna_spacing_ratio)
            parts.append(np.sqrt(ch.path_loss(r, cfg.wavelength)) * a)
        return np.concatenate(parts).conj()

    def _cap_per_ap_power(self, bank, comm_users, sensing_users, tx_aps):
        cfg = self.config
        if self.options.scheme == wf.SCHEME_SES:
            weights = (1.0 - cfg.subcarrier_fraction, cfg.subcarrier_fraction)
        else:
            weights = (1.0, 1.0)
        load = bf.per_ap_load(bank, np.asarray(comm_users, int),
                              np.asarray(sensing_users, int), *weights)
        peak = load.max() if load.size else 0.0
        if peak <= cfg.per_ap_power * (1.0 + 1e-12):
            return bank
        scale = np.sqrt(cfg.per_ap_power / peak)
        return bf.PrecoderBank(w_total=bank.w_total * scale, w_comm=bank.w_comm * scale,
                               w_sens=bank.w_sens * scale, rho=bank.rho * scale**2,
                               tx_aps=bank.tx_aps, num_antennas=bank.num_antennas)

    def true_channels_stacked(self) -> np.ndarray:
        return np.stack([self.chan.stacked(k) for k in range(self.config.num_users)])


def _sensing_waveforms(ctx: _EpochContext, tx_aps, sensing_users, pairing) -> np.ndarray:
    """Waveform grids per (tx position, sensing user position)."""
    cfg = ctx.config
    nc, ns = cfg.num_subcarriers, cfg.num_symbols
    t_count, ks = len(tx_aps), len(sensing_users)
    out = np.empty((t_count, ks, nc, ns), complex)
    inverse_pairing = {}
    for user, targets in (pairing or {}).items():
        for tgt in targets:
            inverse_pairing[tgt] = user
    for tpos, ap in enumerate(tx_aps):
        code = ctx.sensing_grid(ap)
        for jpos, k in enumerate(sensing_users):
            if ctx.options.scheme == wf.SCHEME_SS_SW and k in inverse_pairing:
                out[tpos, jpos] = ctx.data_grids[inverse_pairing[k]]
            else:
                out[tpos, jpos] = code
    return out


def build_echo_model(ctx: _EpochContext, rx_ap: int, tx_aps: np.ndarray,
                     sensing_users, comm_users, bank: bf.PrecoderBank,
                     pairing, predicted: bool) -> est.EchoModel:
    """Echo model at one Rx AP, at either the true or the tracked geometry."""
    cfg, geom = ctx.config, ctx.geometry
    tx_aps = np.asarray(tx_aps, int)
    ks = len(sensing_users)
    t_count = tx_aps.size
    betas_rx = np.empty(ks)
    betas_tx = np.empty((ks, t_count))
    thetas_tx = np.empty((ks, t_count))
    for j, k in enumerate(sensing_users):
        if predicted:
            px = ctx.tracks[k].mean[0]
            deltas = px - geom.ap_positions
            ranges = np.hypot(deltas, cfg.road_offset)
            betas = ch.path_loss(ranges, cfg.wavelength)
            thetas = np.arctan(deltas / cfg.road_offset)
            betas_rx[j] = betas[rx_ap]
            betas_tx[j] = betas[tx_aps]
            thetas_tx[j] = thetas[tx_aps]
        else:
            betas_rx[j] = ctx.chan.beta[rx_ap, k]
            betas_tx[j] = ctx.chan.beta[tx_aps, k]
            thetas_tx[j] = ctx.chan.theta[tx_aps, k]
    comm_grids = (np.array([ctx.data_grids[i] for i in comm_users])
                  if len(comm_users) else
                  np.zeros((0, cfg.num_subcarriers, cfg.num_symbols), complex))
    return est.EchoModel(
        rx_ap=int(rx_ap), tx_aps=tx_aps,
        sensing_users=list(sensing_users), comm_users=list(comm_users),
        num_antennas=cfg.antennas_per_ap, noise_power=cfg.noise_power,
        rician_factor=cfg.rician_factor,
        refl_second_moment=ch.reflection_second_moment(cfg.rcs_mean, cfg.wavelength),
        subcarrier_spacing=cfg.subcarrier_spacing, symbol_time=cfg.symbol_duration,
        d_over_lambda=cfg.antenna_spacing_ratio,
        betas_rx=betas_rx, betas_tx=betas_tx, thetas_tx=thetas_tx,
        w_sens=bank.slices("sens")[tx_aps], w_comm=bank.slices("comm")[tx_aps],
        sens_symbols=_sensing_waveforms(ctx, tx_aps, sensing_users, pairing),
        comm_symbols=comm_grids,
        include_comm_reflections=(ctx.options.scheme != wf.SCHEME_SES),
    )


def _echo_params(ctx: _EpochContext, rx_ap: int, tx_aps, sensing_users,
                 predicted: bool) -> list[est.UserEchoParams]:
    cfg, geom = ctx.config, ctx.geometry
    params = []
    for k in sensing_users:
        if predicted:
            x = ctx.tracks[k].mean
            if k in ctx.probes:
                # search around the scanned hypothesis, not the stale track
                x = np.array([ctx.probes[k], x[1]])
        else:
            x = np.array([ctx.truths[k].p_x, ctx.truths[k].v_x])
        m = tr.measurement_model(x, geom, tx_aps, rx_ap, cfg.wavelength, cfg.road_offset)
        t_count = len(tx_aps)
        params.append(est.UserEchoParams(taus=m[:t_count], nus=m[t_count:2 * t_count],
                                         theta=float(m[2 * t_count])))
    return params


def _grid_points(span: float, resolution: float, cap: int = 61) -> int:
    """Odd grid size giving at most half-resolution spacing over [-span, span]."""
    n = 2 * int(np.ceil(2.0 * span / resolution)) + 1
    return int(np.clip(n, 13, cap))


def _search_spans(ctx: _EpochContext, rx_ap: int, tx_aps, sensing_users,
                  threshold) -> list[est.SearchSpan]:
    """Coarse-search boxes: at least three cells, grown to the track's 3-sigma.

    Grid spacing stays at half the correlation resolution in every axis so the
    matched filter cannot step over a mainlobe.
    """
    cfg, geom = ctx.config, ctx.geometry
    tau_cell = 1.0 / (cfg.num_subcarriers * cfg.subcarrier_spacing)
    nu_cell = 1.0 / (cfg.num_symbols * cfg.symbol_duration)
    spans = []
    for k in sensing_users:
        track = ctx.tracks[k]
        x = track.mean
        cov = track.cov
        if k in ctx.probes:
            # hypothesis search: the box asserts "within one scan step of the
            # probe", whatever the (possibly inflated) track covariance says
            x = np.array([ctx.probes[k], x[1]])
            spacing = _SCAN_PATTERN_SPACING * cfg.road_offset * threshold.hpbw_rad
            cov = np.diag([spacing**2, cfg.init_velocity_variance])
        h = tr.measurement_jacobian(x, geom, tx_aps, rx_ap,
                                    cfg.wavelength, cfg.road_offset)
        s = h @ cov @ h.T
        sd = np.sqrt(np.clip(np.diag(s), 0.0, None))
        t_count = len(tx_aps)
        tau_span = max(3.0 * tau_cell, 3.0 * sd[:t_count].max())
        nu_span = max(3.0 * nu_cell, 3.0 * sd[t_count:2 * t_count].max())
        theta_span = max(3.0 * threshold.hpbw_rad, 3.0 * sd[2 * t_count])
        spans.append(est.SearchSpan(
            tau=tau_span, nu=nu_span, theta=theta_span,
            n_tau=_grid_points(tau_span, tau_cell),
            n_nu=_grid_points(nu_span, nu_cell),
            n_theta=_grid_points(theta_span, threshold.hpbw_rad),
        ))
    return spans


def _check_cp_budget(ctx: _EpochContext, params: list[est.UserEchoParams]):
    budget = ctx.config.cp_delay_budget
    for p in params:
        if np.any(p.taus >= budget):
            raise est.EstimationError(
                f"epoch {ctx.epoch}: bistatic delay {p.taus.max():.3e} s exceeds the "
                f"CP budget {budget:.3e} s; shrink the deployment or extend the CP")


# ---------------------------------------------------------------------------
# Trial loop


def run_trial(config: sc.ScenarioConfig, geometry: sc.NetworkGeometry,
              options: RunOptions, seed: int) -> dict:
    cfg = sc.with_overrides(config, rng_seed=seed)
    threshold = mgmt.sensing_threshold(cfg.antennas_per_ap, cfg.antenna_spacing_ratio,
                                       cfg.outage_probability)
    seeds = sc.init_users(cfg)
    truths = [s.truth for s in seeds]
    tracks = [tr.EkfState(mean=s.prior_mean.copy(), cov=s.prior_cov.copy())
              for s in seeds]
    clock = sc.EpochClock(num_users=cfg.num_users)
    k_all = list(range(cfg.num_users))

    rows: list[list] = []
    se_matrix = np.full((cfg.num_epochs, cfg.num_users), np.nan)
    sinr_matrix = np.full((cfg.num_epochs, cfg.num_users), np.nan)
    sensing_matrix = np.zeros((cfg.num_epochs, cfg.num_users), bool)
    update_epochs = []
    scan_counters = [0] * cfg.num_users

    for epoch in range(cfg.num_epochs):
        ctx = _EpochContext(cfg, geometry, options, epoch, truths, tracks, threshold)

        decisions = {}
        for k in k_all:
            sense, info = mgmt.sensing_decision(tracks[k], geometry.ap_positions,
                                                cfg.road_offset, threshold.gamma_rad2)
            if options.perfect_csi:
                sense = False
            if options.baseline in ("conventional", "single-tx"):
                sense = True
            decisions[k] = (sense, info)

        if options.baseline in ("conventional", "single-tx"):
            sensing_users = list(k_all)
            comm_users = list(k_all)
        else:
            sensing_users = [k for k in k_all if decisions[k][0]]
            comm_users = [k for k in k_all if not decisions[k][0]]

        pairing = None
        if sensing_users:
            omega_sel, bank, pairing = _sensing_epoch(ctx, sensing_users, comm_users,
                                                      threshold, update_epochs,
                                                      scan_counters)
        else:
            omega_sel = mgmt.no_sensing_selection(cfg.num_aps)
            bank = ctx.precoder_bank(np.arange(cfg.num_aps), comm_users, sensing_users)

        h_stack = ctx.true_channels_stacked()
        sinr = ev.epoch_sinr(h_stack, bank, omega_sel.omega, cfg.antennas_per_ap,
                             cfg.noise_power, options.scheme,
                             np.array(comm_users, int), np.array(sensing_users, int),
                             pairing)
        for k in k_all:
            sensing_matrix[epoch, k] = k in sensing_users
            if k in sinr:
                sinr_matrix[epoch, k] = sinr[k]
                se_matrix[epoch, k] = ev.spectral_efficiency(
                    sinr[k], options.scheme, cfg.subcarrier_fraction)

        for k in k_all:
            info = decisions[k][1]
            ap = info["ap"]
            theta_true = np.arctan((truths[k].p_x - geometry.ap_positions[ap])
                                   / cfg.road_offset)
            theta_est = np.arctan((tracks[k].mean[0] - geometry.ap_positions[ap])
                                  / cfg.road_offset)
            rows.append([
                epoch, k, options.scheme, options.precoder,
                _fmt(10 * np.log10(sinr_matrix[epoch, k])
                     if np.isfinite(sinr_matrix[epoch, k]) else np.nan),
                _fmt(se_matrix[epoch, k]),
                int(sensing_matrix[epoch, k]),
                _fmt(np.degrees(1.0) ** 2 * info["var_rad2"]),
                _fmt(truths[k].p_x), _fmt(tracks[k].mean[0]),
                _fmt(np.degrees(theta_true)), _fmt(np.degrees(theta_est)),
            ])
            if k in sensing_users:
                clock.mark_sensed(k)
            else:
                clock.mark_on(k)

        rng_truth = [sc.stream(cfg.rng_seed, "truth", k, epoch) for k in k_all]
        truths = [sc.step_ground_truth(truths[k], cfg.epoch_step, cfg.process_noise,
                                       rng_truth[k]) for k in k_all]
        tracks = [tr.ekf_predict(tracks[k], cfg.epoch_step, cfg.process_noise)
                  for k in k_all]
        clock.advance()

    return {
        "rows": rows,
        "se_matrix": se_matrix,
        "sinr_matrix": sinr_matrix,
        "sensing_matrix": sensing_matrix,
        "update_epochs": update_epochs,
    }


_SCAN_PATTERN_SPACING = 0.7   # probe step in units of p_y * HPBW


def _scan_offset(counter: int) -> int:
    """Center-out scan order 0, +1, -1, +2, -2, ..."""
    step = (counter + 1) // 2
    return step if counter % 2 == 1 else -step


def _acquisition_probes(ctx: _EpochContext, sensing_users, threshold, scan_counters):
    """Probe positions for users whose angle uncertainty exceeds the beamwidth.

    While the predicted angle error is wider than half the main lobe, tracked
    beams are likely to miss; the probe sweeps position hypotheses around the
    predicted position in beamwidth-sized steps until an echo is detected.
    """
    cfg, geom = ctx.config, ctx.geometry
    probes = {}
    for k in sensing_users:
        track = ctx.tracks[k]
        ap = mgmt.nearest_ap(geom.ap_positions, track.mean[0])
        _, var = tr.angle_from_state(track, geom.ap_positions[ap], cfg.road_offset)
        # scan when the beam would likely miss, or after repeated failed dwells
        if np.sqrt(var) <= threshold.hpbw_rad / 2.0 and scan_counters[k] < 3:
            continue
        spacing = _SCAN_PATTERN_SPACING * cfg.road_offset * threshold.hpbw_rad
        # the ring keeps widening with consecutive misses so that a track lost
        # with a collapsed covariance is still re-acquired eventually
        if abs(_scan_offset(scan_counters[k])) * spacing > cfg.ap_span:
            scan_counters[k] = 0
        offset = _scan_offset(scan_counters[k])
        probes[k] = track.mean[0] + offset * spacing
    return probes


def _sensing_epoch(ctx: _EpochContext, sensing_users, comm_users, threshold,
                   update_epochs, scan_counters
                   ) -> tuple[mgmt.SelectionMatrix, bf.PrecoderBank, dict | None]:
    cfg, geom = ctx.config, ctx.geometry
    all_aps = np.arange(cfg.num_aps)
    ctx.probes = _acquisition_probes(ctx, sensing_users, threshold, scan_counters)
    bank_all = ctx.precoder_bank(all_aps, comm_users, sensing_users)
    channels_lkn = ctx.chan.h

    if ctx.options.baseline == "single-tx":
        omega = np.zeros(cfg.num_aps, int)
        omega[1:] = 1   # every AP but the first is a receive head
        selection = mgmt.SelectionMatrix(omega)
    elif all(k in ctx.probes for k in sensing_users):
        # pure acquisition: the covariance-based objective is meaningless until
        # an echo has been seen, so simply listen at each scanned user's nearest AP
        rx = sorted({mgmt.nearest_ap(geom.ap_positions, ctx.probes[k])
                     for k in sensing_users})
        rx = rx[: cfg.num_aps - 1]   # always keep at least one Tx AP
        omega = np.zeros(cfg.num_aps, int)
        omega[rx] = 1
        selection = mgmt.SelectionMatrix(omega)
    else:
        ranking = mgmt.ap_utility(channels_lkn, bank_all.slices("comm"), comm_users,
                                  cfg.utility_threshold)
        candidates = ranking.candidates
        if ranking.cutoff == 0:
            # nobody is communicating; rank by the sensing beams instead, and
            # bound the all-sensing burst's search to the strongest four APs
            ranking = mgmt.ap_utility(channels_lkn, bank_all.slices("sens"),
                                      sensing_users, cfg.utility_threshold)
            candidates = ranking.candidates[:4]

        if comm_users:
            omega_ref = np.ones(cfg.num_aps, int)
            omega_ref[candidates] = 0
            rate_floor = _hypothesis_min_rate(ctx, omega_ref, comm_users, sensing_users)
        else:
            rate_floor = 0.0

        def min_rate_fn(omega):
            if not comm_users:
                return np.inf
            return _hypothesis_min_rate(ctx, omega, comm_users, sensing_users)

        def objective_fn(omega):
            return _hypothesis_objective(ctx, omega, sensing_users, comm_users)

        outcome = mgmt.select_rx_aps(cfg.num_aps, list(candidates), objective_fn,
                                     min_rate_fn, rate_floor)
        selection = outcome.selection

    tx_aps = selection.tx_aps
    bank = ctx.precoder_bank(tx_aps, comm_users, sensing_users)
    pairing = _pairing(ctx, bank, comm_users, sensing_users)

    # measurement chain per selected Rx AP, gated by per-path echo detection
    rx_list = list(selection.rx_aps)
    t_count = len(tx_aps)
    pure_acquisition = all(k in ctx.probes for k in sensing_users)
    # below ~30 captured noise units a nonlinear fit leaves the small-error
    # regime and its covariance bound stops describing the actual errors
    path_level = max(30.0, 2.0 * est.detection_threshold(1))
    per_user_z = {k: [] for k in sensing_users}       # measurement segments
    per_user_r = {k: [] for k in sensing_users}       # matching noise blocks
    per_user_seg = {k: [] for k in sensing_users}     # (rx, kept path indices)
    for rx in rx_list:
        model_true = build_echo_model(ctx, rx, tx_aps, sensing_users, comm_users,
                                      bank, pairing, predicted=False)
        true_params = _echo_params(ctx, rx, tx_aps, sensing_users, predicted=False)
        _check_cp_budget(ctx, true_params)
        rng_noise = sc.stream(cfg.rng_seed, "noise", ctx.epoch, rx)
        y, _ = est.synthesize_received(model_true, true_params, ctx.chan, ctx.refl,
                                       rng_noise)
        model_pred = build_echo_model(ctx, rx, tx_aps, sensing_users, comm_users,
                                      bank, pairing, predicted=True)
        pred_params = _echo_params(ctx, rx, tx_aps, sensing_users, predicted=True)
        if pure_acquisition:
            # the predicted geometry is known-unreliable while scanning, so the
            # whitening it would imply is noise-only (and far cheaper)
            cov = est.identity_covariance(cfg.noise_power)
        else:
            cov = est.received_covariance(model_pred, pred_params)
        spans = _search_spans(ctx, rx, tx_aps, sensing_users, threshold)
        result = est.wnls_estimate(model_pred, y, cov, pred_params, spans,
                                   refine_gate=est.detection_threshold(t_count))
        if not any(np.any(g >= path_level) for g in result.path_gains):
            continue
        if pure_acquisition:
            cov = est.received_covariance(model_pred, pred_params)
        acm_block = est.acm(model_pred, result.estimates, cov)
        for j, k in enumerate(sensing_users):
            kept = np.flatnonzero(result.path_gains[j] >= path_level)
            if kept.size == 0:
                continue
            p = result.estimates[j]
            idx = np.concatenate([kept, t_count + kept, [2 * t_count]])
            z_full = np.concatenate([p.taus, p.nus, [p.theta]])
            per_user_z[k].append(z_full[idx])
            per_user_r[k].append(acm_block.user_block(j)[np.ix_(idx, idx)])
            per_user_seg[k].append((rx, idx))

    spacing = _SCAN_PATTERN_SPACING * cfg.road_offset * threshold.hpbw_rad
    for k in sensing_users:
        if not per_user_z[k]:
            # nothing rose above the noise: no update, advance the scan; an
            # empty dwell is evidence against the track, so grow its covariance
            scan_counters[k] += 1
            if k in ctx.probes:
                ctx.tracks[k].cov = ctx.tracks[k].cov + np.diag(
                    [spacing**2, (spacing / 10.0) ** 2])
            continue
        z = np.concatenate(per_user_z[k])
        r = np.zeros((z.size, z.size))
        offset = 0
        for (rx, idx), blk in zip(per_user_seg[k], per_user_r[k]):
            r[offset:offset + idx.size, offset:offset + idx.size] = blk
            offset += idx.size
        segments = list(per_user_seg[k])

        def h_fn(x, segments=segments):
            return np.concatenate([
                tr.measurement_model(x, geom, tx_aps, rx, cfg.wavelength,
                                     cfg.road_offset)[idx]
                for rx, idx in segments])

        def jac_fn(x, segments=segments):
            return np.vstack([
                tr.measurement_jacobian(x, geom, tx_aps, rx, cfg.wavelength,
                                        cfg.road_offset)[idx]
                for rx, idx in segments])

        mean = ctx.tracks[k].mean
        gate = np.inf if k in ctx.probes else 5.0
        ctx.tracks[k] = tr.ekf_update(ctx.tracks[k], z, h_fn(mean), jac_fn(mean), r,
                                      ctx.epoch, gate_sigmas=gate,
                                      measurement_fn=h_fn, jacobian_fn=jac_fn,
                                      max_iters=15)
        scan_counters[k] = 0
        update_epochs.append((ctx.epoch, k))
    return selection, bank, pairing


def _pairing(ctx, bank, comm_users, sensing_users):
    if ctx.options.scheme != wf.SCHEME_SS_SW or not sensing_users or not comm_users:
        return None
    h_stack = ctx.true_channels_stacked()
    pairing, _ = bf.pair_targets_shared_waveform(h_stack, bank.w_sens,
                                                 np.array(comm_users, int),
                                                 np.array(sensing_users, int))
    return pairing


def _hypothesis_min_rate(ctx, omega, comm_users, sensing_users) -> float:
    cfg = ctx.config
    tx_aps = np.flatnonzero(np.asarray(omega) == 0)
    bank = ctx.precoder_bank(tx_aps, comm_users, sensing_users)
    pairing = _pairing(ctx, bank, comm_users, sensing_users)
    sinr = ev.epoch_sinr(ctx.true_channels_stacked(), bank, omega,
                         cfg.antennas_per_ap, cfg.noise_power, ctx.options.scheme,
                         np.array(comm_users, int), np.array(sensing_users, int),
                         pairing)
    rates = [np.log2(1.0 + sinr[k]) for k in comm_users]
    return mgmt.min_rate(rates)


def _hypothesis_objective(ctx, omega, sensing_users, comm_users) -> float:
    """Sum of predicted angle variances after a hypothetical update under omega."""
    cfg, geom = ctx.config, ctx.geometry
    selection = mgmt.SelectionMatrix(np.asarray(omega, int))
    tx_aps = selection.tx_aps
    rx_list = list(selection.rx_aps)
    bank = ctx.precoder_bank(tx_aps, comm_users, sensing_users)
    pairing = _pairing(ctx, bank, comm_users, sensing_users)
    blocks = {k: [] for k in sensing_users}
    for rx in rx_list:
        model = build_echo_model(ctx, rx, tx_aps, sensing_users, comm_users,
                                 bank, pairing, predicted=True)
        params = est.with_expected_alphas(
            model, _echo_params(ctx, rx, tx_aps, sensing_users, predicted=True))
        try:
            acm_block = est.acm(model, params)
        except est.EstimationError:
            return np.inf
        for j, k in enumerate(sensing_users):
            blocks[k].append(acm_block.user_block(j))
    total = 0.0
    m = 2 * len(tx_aps) + 1
    for k in sensing_users:
        r = np.zeros((m * len(rx_list), m * len(rx_list)))
        for i, blk in enumerate(blocks[k]):
            r[i * m:(i + 1) * m, i * m:(i + 1) * m] = blk
        z_pred, jac = tr.stack_measurement_model(ctx.tracks[k].mean, geom, tx_aps,
                                                 rx_list, cfg.wavelength,
                                                 cfg.road_offset)
        try:
            hypo = tr.ekf_update(ctx.tracks[k], z_pred, z_pred, jac, r, ctx.epoch,
                                 gate_sigmas=np.inf)
        except tr.TrackingError:
            return np.inf
        ap = mgmt.nearest_ap(geom.ap_positions, hypo.mean[0])
        _, var = tr.angle_from_state(hypo, geom.ap_positions[ap], cfg.road_offset)
        total += var
    return total


def _fmt(x) -> str:
    """Deterministic CSV cell: empty for missing, repr for floats."""
    if x is None:
        return ""
    if isinstance(x, float) and not np.isfinite(x):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# ---------------------------------------------------------------------------
# Public entry points


def run_epoch_loop(config: sc.ScenarioConfig, options: RunOptions | None = None,
                   geometry: sc.NetworkGeometry | None = None) -> RunArtifacts:
    """Run the full scenario for the configured number of epochs and trials."""
    options = options or RunOptions()
    if (options.scheme == wf.SCHEME_SES
            and not np.isclose(config.power_fraction, config.subcarrier_fraction)):
        raise sc.ScenarioError(
            "separate subcarriers requires power_fraction == subcarrier_fraction "
            f"(got {config.power_fraction} vs {config.subcarrier_fraction})")
    if options.baseline == "single-tx":
        config = sc.with_overrides(config, num_aps=2, antennas_per_ap=40)
        geometry = sc.NetworkGeometry(
            ap_positions=np.array([config.ap_span / 2.0, config.ap_span / 2.0 + 10.0]),
            antennas_per_ap=40, wavelength=config.wavelength,
            antenna_spacing_ratio=config.antenna_spacing_ratio)
    if geometry is None:
        geometry = sc.geometry_from_config(config)

    all_rows: list[list] = []
    se_stacks, sensing_stacks = [], []
    update_epochs = []
    for trial in range(options.trials):
        out = run_trial(config, geometry, options, trial_seed(config.rng_seed, trial))
        all_rows.extend(out["rows"])
        se_stacks.append(out["se_matrix"])
        sensing_stacks.append(out["sensing_matrix"])
        update_epochs.extend(out["update_epochs"])

    se_matrix = np.concatenate(se_stacks, axis=0) if se_stacks else None
    sensing_matrix = np.concatenate(sensing_stacks, axis=0) if sensing_stacks else None
    summary = _summarize(config, options, se_stacks, sensing_stacks)
    manifest = {
        "config": asdict(config),
        "config_hash": _config_hash(config),
        "seed": config.rng_seed,
        "options": {"scheme": options.scheme, "precoder": options.precoder,
                    "trials": options.trials, "perfect_csi": options.perfect_csi,
                    "baseline": options.baseline},
        "version": PACKAGE_VERSION,
    }
    return RunArtifacts(rows=all_rows, summary=summary, manifest=manifest,
                        se_matrix=se_matrix if options.collect_series else None,
                        sensing_matrix=sensing_matrix if options.collect_series else None,
                        tracking_log=[{"epoch": e, "user": k} for e, k in update_epochs])


def _summarize(config, options, se_stacks, sensing_stacks) -> dict:
    if not se_stacks or se_stacks[0].size == 0:
        return {"scheme": options.scheme, "precoder": options.precoder,
                "epochs": config.num_epochs, "users": config.num_users,
                "trials": options.trials, "sensing_fraction": None,
                "mean_sum_se": None, "mean_user_se": None,
                "sensing_fraction_post500": None}
    se = np.concatenate(se_stacks, axis=0)
    sensing = np.concatenate(sensing_stacks, axis=0)
    post = slice(min(500, max(se_stacks[0].shape[0] - 1, 0)), None)
    post_fracs = [s[post].mean() for s in sensing_stacks if s[post].size]
    sum_se = np.nansum(se, axis=1)
    return {
        "scheme": options.scheme,
        "precoder": options.precoder,
        "epochs": config.num_epochs,
        "users": config.num_users,
        "trials": options.trials,
        "sensing_fraction": float(sensing.mean()),
        "sensing_fraction_post500": float(np.mean(post_fracs)) if post_fracs else None,
        "mean_sum_se": float(np.nanmean(sum_se)) if np.isfinite(sum_se).any() else None,
        "mean_user_se": float(np.nanmean(se)) if np.isfinite(se).any() else None,
    }


def run_sweep(config: sc.ScenarioConfig, axis: str, values, options: RunOptions | None = None
              ) -> dict:
    """Independent runs along one axis with per-point seed derivation."""
    options = options or RunOptions()
    axis_map = {"num_users": "num_users", "num_antennas": "antennas_per_ap",
                "precoder": None, "scheme": None}
    if axis not in axis_map:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(axis_map)}")
    points = []
    for i, value in enumerate(values):
        cfg = sc.with_overrides(config, rng_seed=trial_seed(config.rng_seed, 7919 * (i + 1)))
        opts = RunOptions(scheme=options.scheme, precoder=options.precoder,
                          trials=options.trials, perfect_csi=options.perfect_csi,
                          baseline=options.baseline, collect_series=False)
        if axis == "precoder":
            opts.precoder = value
        elif axis == "scheme":
            opts.scheme = wf.normalize_scheme(value)
        else:
            overrides = {axis_map[axis]: int(value)}
            if axis == "num_users" and cfg.user_positions is not None:
                # pinned start positions cannot follow a changing user count
                overrides["user_positions"] = None
            cfg = sc.with_overrides(cfg, **overrides)
        art = run_epoch_loop(cfg, opts)
        point = dict(art.summary)
        point["axis"] = axis
        point["value"] = value if axis in ("precoder", "scheme") else int(value)
        points.append(point)
    return {"axis": axis, "points": points,
            "base_config_hash": _config_hash(config)}


def export(artifacts: RunArtifacts, out_dir) -> dict[str, Path]:
    """Write epochs.csv, summary.json and manifest.json; re-export is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "epochs": out / "epochs.csv",
        "summary": out / "summary.json",
        "manifest": out / "manifest.json",
    }
    with open(paths["epochs"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(artifacts.rows)
    paths["summary"].write_text(json.dumps(artifacts.summary, sort_keys=True, indent=2) + "\n")
    paths["manifest"].write_text(json.dumps(artifacts.manifest, sort_keys=True, indent=2) + "\n")
    return paths
