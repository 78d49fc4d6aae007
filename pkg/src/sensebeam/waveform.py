"""OFDM grids, sensing codes, subcarrier allocation and delayed/Doppler replicas.

Everything here is a pure phase or linear transform on the time-frequency
grid: norms are preserved exactly and the cyclic prefix never enters any
correlation (the CP only sets the delay budget of the model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEME_SS_SW = "ss-sw"    # shared subcarriers, shared waveform
SCHEME_SS_SEW = "ss-sew"  # shared subcarriers, separate sensing waveform
SCHEME_SES = "ses"        # separate subcarriers
SCHEMES = (SCHEME_SS_SW, SCHEME_SS_SEW, SCHEME_SES)

BARKER13 = np.array([1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1], dtype=float)


def normalize_scheme(scheme: str) -> str:
    s = str(scheme).lower().replace("_", "-")
    if s not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return s


@dataclass
class OfdmGrid:
    """Time-frequency symbol grid gamma[a, b] for one owner (user or Tx AP)."""

    symbols: np.ndarray   # (N_c, N_s) complex
    scheme: str
    owner: int            # user index for data, Tx-AP index for sensing codes
    role: str             # "data" | "sensing"

    @property
    def num_subcarriers(self) -> int:
        return self.symbols.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.symbols.shape[1]


@dataclass
class SubcarrierAllocation:
    """Role of every subcarrier under a transmission scheme."""

    scheme: str
    num_subcarriers: int
    sensing: np.ndarray        # bool mask (N_c,)
    communication: np.ndarray  # bool mask (N_c,)

    @property
    def num_sensing(self) -> int:
        return int(self.sensing.sum())


def allocate_subcarriers(scheme: str, mu_c: float, num_subcarriers: int) -> SubcarrierAllocation:
    """Partition subcarriers: SeS reserves the lowest round(mu_c*N_c) adjacent
    ones (at least one) for sensing; the shared schemes use every subcarrier
    for both roles."""
    scheme = normalize_scheme(scheme)
    nc = num_subcarriers
    if scheme == SCHEME_SES:
        if not 0 < mu_c < 1:
            raise ValueError("mu_c must be in (0, 1) for separate subcarriers")
        n_sens = max(1, int(np.rint(mu_c * nc)))
        sensing = np.zeros(nc, bool)
        sensing[:n_sens] = True
        return SubcarrierAllocation(scheme, nc, sensing, ~sensing)
    full = np.ones(nc, bool)
    return SubcarrierAllocation(scheme, nc, full.copy(), full.copy())


def generate_ofdm_time_samples(grid: OfdmGrid, symbol: int) -> np.ndarray:
    """Time samples of one OFDM symbol, (1/sqrt(N_c)) sum_a gamma[a] e^{j2pi a m/N_c}."""
    nc, ns = grid.symbols.shape
    if not 0 <= symbol < ns:
        raise IndexError(f"symbol index {symbol} out of range [0, {ns})")
    return np.fft.ifft(grid.symbols[:, symbol]) * np.sqrt(nc)


def sensing_code_grid(tx_ap: int, num_subcarriers: int, num_symbols: int,
                      scheme: str = SCHEME_SS_SEW,
                      allocation: SubcarrierAllocation | None = None) -> OfdmGrid:
    """Barker-13 coded pulse train along the symbol axis, cyclically shifted per
    Tx AP for low inter-AP cross-correlation and repeated over the sensing
    subcarriers."""
    if num_symbols < 13:
        raise ValueError(f"need at least 13 OFDM symbols for the Barker-13 code, got {num_symbols}")
    shift = tx_ap % BARKER13.size
    code = np.roll(BARKER13, -shift)
    chips = code[np.arange(num_symbols) % BARKER13.size]
    symbols = np.tile(chips[None, :], (num_subcarriers, 1)).astype(complex)
    if allocation is not None:
        symbols[~allocation.sensing, :] = 0.0
    return OfdmGrid(symbols=symbols, scheme=normalize_scheme(scheme), owner=tx_ap, role="sensing")


def data_symbol_grid(user: int, num_subcarriers: int, num_symbols: int,
                     rng: np.random.Generator, scheme: str = SCHEME_SS_SEW,
                     allocation: SubcarrierAllocation | None = None) -> OfdmGrid:
    """Unit-power QPSK data grid for one user.

    All Tx APs reuse the same grid for a given user (joint coherent
    transmission), which is why the grid is keyed by user, not by AP.
    """
    quadrant = rng.integers(0, 4, size=(num_subcarriers, num_symbols))
    symbols = np.exp(1j * (np.pi / 4.0 + np.pi / 2.0 * quadrant))
    if allocation is not None:
        symbols = symbols.copy()
        symbols[~allocation.communication, :] = 0.0
    return OfdmGrid(symbols=symbols, scheme=normalize_scheme(scheme), owner=user, role="data")


def barker_autocorrelation_sidelobe(code: np.ndarray = BARKER13) -> float:
    """Largest aperiodic autocorrelation sidelobe magnitude of a code."""
    full = np.correlate(code, code, mode="full")
    center = code.size - 1
    side = np.delete(full, center)
    return float(np.max(np.abs(side)))


# ---------------------------------------------------------------------------
# Delayed / Doppler-shifted echo replicas


def symbol_duration(num_subcarriers: int, cp_length: int, subcarrier_spacing: float) -> float:
    return 1.0 / subcarrier_spacing + cp_length / (num_subcarriers * subcarrier_spacing)


def echo_replica(grid: OfdmGrid, tau: float, nu: float, subcarrier_spacing: float,
                 cp_length: int, check_cp: bool = True) -> np.ndarray:
    """Stacked time samples of the delayed, Doppler-shifted waveform.

    The delay rotates subcarrier a by exp(-j 2 pi a df tau) and the Doppler
    rotates symbol b by exp(j 2 pi b T_sym nu); the result is stacked with the
    symbol index slow and the time sample fast, matching the received-signal
    stacking.  A delay beyond the CP budget invalidates the phase model and
    raises.
    """
    nc, ns = grid.symbols.shape
    if tau < 0:
        raise ValueError("delay must be nonnegative")
    budget = cp_length / (nc * subcarrier_spacing)
    if check_cp and tau >= budget:
        raise ValueError(
            f"bistatic delay {tau:.3e} s exceeds the CP budget {budget:.3e} s; "
            "the inter-symbol-interference-free model no longer holds"
        )
    return _replica_from_symbols(grid.symbols, tau, nu, subcarrier_spacing,
                                 symbol_duration(nc, cp_length, subcarrier_spacing))


def _replica_from_symbols(symbols: np.ndarray, tau: float, nu: float,
                          df: float, t_sym: float) -> np.ndarray:
    nc, ns = symbols.shape
    a = np.arange(nc)
    b = np.arange(ns)
    delayed = symbols * np.exp(-2j * np.pi * a * df * tau)[:, None]
    time = np.fft.ifft(delayed, axis=0) * np.sqrt(nc)          # (N_c, N_s)
    time = time * np.exp(2j * np.pi * b * t_sym * nu)[None, :]
    return time.T.reshape(-1)                                  # symbol-major stack


def replica_delay_derivative(symbols: np.ndarray, tau: float, nu: float,
                             df: float, t_sym: float) -> np.ndarray:
    """d/d tau of the stacked replica (per-subcarrier factor -j 2 pi a df)."""
    nc = symbols.shape[0]
    a = np.arange(nc)
    weighted = symbols * (-2j * np.pi * a * df)[:, None]
    return _replica_from_symbols(weighted, tau, nu, df, t_sym)


def replica_doppler_derivative(symbols: np.ndarray, tau: float, nu: float,
                               df: float, t_sym: float) -> np.ndarray:
    """d/d nu of the stacked replica (per-symbol factor j 2 pi b T_sym)."""
    nc, ns = symbols.shape
    base = _replica_from_symbols(symbols, tau, nu, df, t_sym).reshape(ns, nc)
    b = np.arange(ns)
    return (base * (2j * np.pi * b * t_sym)[:, None]).reshape(-1)
