"""OFDM baseband waveform: QAM mapping, IDFT symbols, cyclic prefix, STS
preamble, pilot-bearing frames and the legitimate receiver's demodulator.

Frequency-domain vectors are kept in FFT order (bin 0 is DC, negative
subcarriers wrap to the top). Subcarriers are addressed by signed index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SizeError

C_LIGHT = 299_792_458.0

DEFAULT_USED = tuple(range(-26, 0)) + tuple(range(1, 27))
DEFAULT_PILOTS = (-24, -20, -16, -12, -8, -4, 4, 8, 12, 16, 20, 24)

# 802.11 short training sequence, nonzero entries only (before scaling).
_STS_VALUES = {
    -24: 1 + 1j, -20: -1 - 1j, -16: 1 + 1j, -12: -1 - 1j, -8: -1 - 1j, -4: 1 + 1j,
    4: -1 - 1j, 8: -1 - 1j, 12: 1 + 1j, 16: 1 + 1j, 20: 1 + 1j, 24: 1 + 1j,
}


@dataclass(frozen=True)
class OfdmConfig:
    n_fft: int = 64
    used_subcarriers: tuple = DEFAULT_USED
    pilot_subcarriers: tuple = DEFAULT_PILOTS
    f_c: float = 5.2e9
    f_s: float = 20e6
    cp_len: int = 16
    qam_order: int = 4
    sts_repeats: int = 10
    sts_symbol_len: int = 16
    pilot_seed: int = 0x5EED

    def __post_init__(self):
        object.__setattr__(self, "used_subcarriers", tuple(int(k) for k in self.used_subcarriers))
        object.__setattr__(self, "pilot_subcarriers", tuple(int(k) for k in self.pilot_subcarriers))
        half = self.n_fft // 2
        if self.n_fft < 2:
            raise ConfigError(f"n_fft must be >= 2, got {self.n_fft}")
        if any(not -half <= k < half for k in self.used_subcarriers):
            raise ConfigError("used subcarriers must lie in [-n_fft/2, n_fft/2)")
        if len(set(self.used_subcarriers)) != len(self.used_subcarriers):
            raise ConfigError("duplicate used subcarriers")
        if not set(self.pilot_subcarriers) <= set(self.used_subcarriers):
            raise ConfigError("pilot subcarriers must be a subset of the used subcarriers")
        if self.qam_order not in (2, 4, 16, 64):
            raise ConfigError(f"qam_order must be one of 2, 4, 16, 64, got {self.qam_order}")
        if not 0 <= self.cp_len < self.n_fft:
            raise ConfigError("cp_len must satisfy 0 <= cp_len < n_fft")
        if self.f_s <= 0 or self.f_c <= 0:
            raise ConfigError("f_s and f_c must be positive")
        if self.sts_symbol_len < 1 or self.n_fft % self.sts_symbol_len:
            raise ConfigError("sts_symbol_len must divide n_fft")
        if self.sts_repeats < 0:
            raise ConfigError("sts_repeats must be non-negative")

    @property
    def sample_period(self) -> float:
        return 1.0 / self.f_s

    @property
    def symbol_duration(self) -> float:
        return self.n_fft / self.f_s

    @property
    def symbol_len(self) -> int:
        """Samples per CP-prefixed payload symbol."""
        return self.n_fft + self.cp_len

    @property
    def sts_len(self) -> int:
        return self.sts_repeats * self.sts_symbol_len

    @property
    def data_subcarriers(self) -> tuple:
        pilots = set(self.pilot_subcarriers)
        return tuple(k for k in self.used_subcarriers if k not in pilots)

    @property
    def bits_per_qam(self) -> int:
        return int(np.log2(self.qam_order))

    @property
    def bits_per_symbol(self) -> int:
        return len(self.data_subcarriers) * self.bits_per_qam

    @property
    def offset_tolerance_hz(self) -> float:
        """Largest aggregate offset the STS correlator resolves unambiguously."""
        return self.f_s / (2 * self.sts_symbol_len)

    def subcarrier_freq(self, k) -> np.ndarray:
        return self.f_s * np.asarray(k, dtype=float) / self.n_fft

    def fft_index(self, k) -> np.ndarray:
        return np.mod(np.asarray(k, dtype=int), self.n_fft)


@dataclass(frozen=True, eq=False)
class BasebandSignal:
    samples: np.ndarray
    f_s: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.complex128).reshape(-1)
        if x.size == 0:
            raise SizeError("baseband signal must be non-empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("baseband signal contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def time(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.f_s

    def with_samples(self, samples) -> BasebandSignal:
        return BasebandSignal(samples, self.f_s)


@dataclass(frozen=True, eq=False)
class FrequencyDomainSymbol:
    bins: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bins", np.asarray(self.bins, dtype=np.complex128).reshape(-1))

    def unused_are_zero(self, cfg: OfdmConfig) -> bool:
        mask = np.ones(cfg.n_fft, dtype=bool)
        mask[cfg.fft_index(cfg.used_subcarriers)] = False
        return bool(np.all(self.bins[mask] == 0))


@dataclass(frozen=True, eq=False)
class Frame:
    sts: BasebandSignal
    payload_symbols: list
    pilot_reference: np.ndarray  # (n_symbols, n_pilots), columns follow cfg.pilot_subcarriers
    payload_bits: np.ndarray
    cfg: OfdmConfig = field(repr=False, default=None)

    @property
    def n_symbols(self) -> int:
        return len(self.payload_symbols)

    def pilot(self, symbol_index: int, k: int) -> complex:
        col = self.cfg.pilot_subcarriers.index(k)
        return complex(self.pilot_reference[symbol_index, col])

    def to_signal(self) -> BasebandSignal:
        parts = [self.sts.samples] + [s.samples for s in self.payload_symbols]
        return BasebandSignal(np.concatenate(parts), self.sts.f_s)


# --- QAM -------------------------------------------------------------------

def _pam_levels(n_bits: int):
    """Gray-labelled PAM levels ordered from most positive to most negative."""
    n_levels = 1 << n_bits
    idx = np.arange(n_levels)
    levels = (n_levels - 1 - 2 * idx).astype(float)
    labels = idx ^ (idx >> 1)
    return levels, labels


def _axis_bits(qam_order: int) -> tuple:
    if qam_order == 2:
        return 1, 0
    m = int(np.log2(qam_order))
    return m // 2, m // 2


def qam_scale(qam_order: int) -> float:
    """Factor that brings the integer constellation to unit average power."""
    if qam_order == 2:
        return 1.0
    return float(np.sqrt(2.0 * (qam_order - 1) / 3.0))


def constellation(qam_order: int) -> np.ndarray:
    """All points, indexed by the integer formed from their bit labels (MSB first)."""
    m = int(np.log2(qam_order))
    labels = np.arange(qam_order)
    bits = (labels[:, None] >> np.arange(m - 1, -1, -1)) & 1
    return map_bits_to_qam(bits.reshape(-1), qam_order)


def _bits_to_int(bits: np.ndarray) -> np.ndarray:
    if bits.shape[1] == 0:
        return np.zeros(bits.shape[0], dtype=int)
    weights = 1 << np.arange(bits.shape[1] - 1, -1, -1)
    return bits @ weights


def map_bits_to_qam(bits, qam_order: int) -> np.ndarray:
    """Gray-map bits to unit-average-power QAM points.

    The first half of each group of bits selects the in-phase level and the
    second half the quadrature level. A leading 0 bit maps to the positive
    half-plane, so ``[0, 0]`` in QPSK is ``(1+1j)/sqrt(2)``.
    """
    bits = np.asarray(bits, dtype=int).reshape(-1)
    if qam_order not in (2, 4, 16, 64):
        raise ConfigError(f"unsupported qam_order {qam_order}")
    m = int(np.log2(qam_order))
    if bits.size % m:
        raise SizeError(f"{bits.size} bits is not a multiple of {m} bits per symbol")
    groups = bits.reshape(-1, m)
    bi, bq = _axis_bits(qam_order)

    def axis(chunk, n):
        if n == 0:
            return np.zeros(chunk.shape[0])
        levels, labels = _pam_levels(n)
        lookup = np.empty(1 << n)
        lookup[labels] = levels
        return lookup[_bits_to_int(chunk)]

    i = axis(groups[:, :bi], bi)
    q = axis(groups[:, bi:], bq)
    return (i + 1j * q) / qam_scale(qam_order)


def demap_qam(symbols, qam_order: int) -> np.ndarray:
    """Hard-decision inverse of :func:`map_bits_to_qam`."""
    s = np.asarray(symbols, dtype=np.complex128).reshape(-1) * qam_scale(qam_order)
    bi, bq = _axis_bits(qam_order)

    def axis(values, n):
        levels, labels = _pam_levels(n)
        top = (1 << n) - 1
        idx = np.clip(np.rint((top - values) / 2.0), 0, top).astype(int)
        lab = labels[idx]
        return (lab[:, None] >> np.arange(n - 1, -1, -1)) & 1

    out = [axis(s.real, bi)]
    if bq:
        out.append(axis(s.imag, bq))
    return np.concatenate(out, axis=1).reshape(-1)


# --- symbols ---------------------------------------------------------------

def ofdm_modulate(sym: FrequencyDomainSymbol, cfg: OfdmConfig) -> BasebandSignal:
    """Unitary IDFT, x[n] = N^-1/2 sum_k X[k] exp(j 2 pi n k / N)."""
    if sym.bins.size != cfg.n_fft:
        raise SizeError(f"expected {cfg.n_fft} bins, got {sym.bins.size}")
    return BasebandSignal(np.fft.ifft(sym.bins, norm="ortho"), cfg.f_s)


def ofdm_demodulate(sig: BasebandSignal, cfg: OfdmConfig) -> FrequencyDomainSymbol:
    if len(sig) != cfg.n_fft:
        raise SizeError(f"expected {cfg.n_fft} samples (CP stripped), got {len(sig)}")
    return FrequencyDomainSymbol(np.fft.fft(sig.samples, norm="ortho"))


def add_cyclic_prefix(sig: BasebandSignal, cp_len: int) -> BasebandSignal:
    if not 0 <= cp_len < len(sig):
        raise SizeError(f"cp_len {cp_len} must be below the signal length {len(sig)}")
    if cp_len == 0:
        return sig
    x = sig.samples
    return sig.with_samples(np.concatenate([x[-cp_len:], x]))


def place_bins(cfg: OfdmConfig, values: dict) -> FrequencyDomainSymbol:
    bins = np.zeros(cfg.n_fft, dtype=np.complex128)
    for k, v in values.items():
        bins[int(k) % cfg.n_fft] = v
    return FrequencyDomainSymbol(bins)


# --- preamble and frame ----------------------------------------------------

def sts_sequence(cfg: OfdmConfig) -> dict:
    """Frequency-domain short training sequence on the pilot subcarriers.

    Bins come from the 802.11 table when present, otherwise from a fixed
    QPSK pattern. The scale gives the preamble the same mean power as a
    payload symbol with unit-power points on every used subcarrier.
    """
    step = cfg.n_fft // cfg.sts_symbol_len
    bad = [k for k in cfg.pilot_subcarriers if k % step]
    if bad:
        raise ConfigError(f"STS subcarriers {bad} are not multiples of {step}; periodicity would break")
    scale = np.sqrt(len(cfg.used_subcarriers) / (2.0 * len(cfg.pilot_subcarriers)))
    alt = [1 + 1j, -1 - 1j]
    return {
        k: scale * _STS_VALUES.get(k, alt[i % 2])
        for i, k in enumerate(cfg.pilot_subcarriers)
    }


def build_sts(cfg: OfdmConfig) -> BasebandSignal:
    if cfg.sts_repeats < 2:
        raise ConfigError("the STS needs at least two repetitions")
    full = ofdm_modulate(place_bins(cfg, sts_sequence(cfg)), cfg).samples
    short = full[: cfg.sts_symbol_len]
    return BasebandSignal(np.tile(short, cfg.sts_repeats), cfg.f_s)


def pilot_values(cfg: OfdmConfig, n_symbols: int) -> np.ndarray:
    """Known unit-power QPSK pilots, shape (n_symbols, n_pilots).

    The draw is row-major from a fixed seed, so any prefix of rows is
    identical regardless of ``n_symbols``.
    """
    rng = np.random.default_rng(cfg.pilot_seed)
    bits = rng.integers(0, 2, size=(n_symbols, len(cfg.pilot_subcarriers), 2))
    return map_bits_to_qam(bits.reshape(-1), 4).reshape(n_symbols, len(cfg.pilot_subcarriers))


def _symbol_bins(cfg, data_points, pilots) -> FrequencyDomainSymbol:
    bins = np.zeros(cfg.n_fft, dtype=np.complex128)
    bins[cfg.fft_index(cfg.data_subcarriers)] = data_points
    bins[cfg.fft_index(cfg.pilot_subcarriers)] = pilots
    return FrequencyDomainSymbol(bins)


def build_frame(cfg: OfdmConfig, payload_bits, n_symbols: int) -> Frame:
    bits = np.asarray(payload_bits, dtype=np.int8).reshape(-1)
    need = n_symbols * cfg.bits_per_symbol
    if bits.size != need:
        raise SizeError(f"{n_symbols} symbols need {need} payload bits, got {bits.size}")
    pilots = pilot_values(cfg, n_symbols)
    points = map_bits_to_qam(bits, cfg.qam_order).reshape(n_symbols, len(cfg.data_subcarriers))
    symbols = [
        add_cyclic_prefix(ofdm_modulate(_symbol_bins(cfg, points[m], pilots[m]), cfg), cfg.cp_len)
        for m in range(n_symbols)
    ]
    return Frame(build_sts(cfg), symbols, pilots, bits, cfg)


def random_frame(cfg: OfdmConfig, n_symbols: int, rng) -> Frame:
    rng = np.random.default_rng(rng)
    return build_frame(cfg, rng.integers(0, 2, n_symbols * cfg.bits_per_symbol), n_symbols)


def pilot_reference_signal(cfg: OfdmConfig, n_symbols: int) -> BasebandSignal:
    """The part of a frame a third party knows: STS plus pilot-only payload symbols."""
    pilots = pilot_values(cfg, n_symbols)
    zeros = np.zeros(len(cfg.data_subcarriers))
    parts = [build_sts(cfg).samples]
    for m in range(n_symbols):
        sym = ofdm_modulate(_symbol_bins(cfg, zeros, pilots[m]), cfg)
        parts.append(add_cyclic_prefix(sym, cfg.cp_len).samples)
    return BasebandSignal(np.concatenate(parts), cfg.f_s)


def frame_symbol_count(cfg: OfdmConfig, n_samples: int) -> int:
    return max(0, (n_samples - cfg.sts_len) // cfg.symbol_len)


def window_backoff(cfg: OfdmConfig) -> int:
    """Samples by which the FFT window is pulled back into the cyclic prefix."""
    return cfg.cp_len // 4


def payload_spectra(sig: BasebandSignal, cfg: OfdmConfig, n_symbols: int | None = None) -> np.ndarray:
    """FFT of every payload symbol, shape (n_symbols, n_fft).

    The window starts ``window_backoff`` samples before the end of the
    cyclic prefix; the resulting linear phase is removed here.
    """
    if n_symbols is None:
        n_symbols = frame_symbol_count(cfg, len(sig))
    x = sig.samples
    need = cfg.sts_len + n_symbols * cfg.symbol_len
    if x.size < need:
        raise SizeError(f"signal has {x.size} samples, frame needs {need}")
    b = window_backoff(cfg)
    start = cfg.sts_len + np.arange(n_symbols) * cfg.symbol_len + cfg.cp_len - b
    blocks = x[start[:, None] + np.arange(cfg.n_fft)[None, :]]
    spectra = np.fft.fft(blocks, axis=1, norm="ortho")
    k = np.fft.fftfreq(cfg.n_fft, 1.0 / cfg.n_fft)
    return spectra * np.exp(2j * np.pi * k * b / cfg.n_fft)


def _track_flat_channel(hp: np.ndarray, pilot_k: np.ndarray):
    """Fit h(m, k) = a * exp(j (c k + (b + d k) m)) to per-pilot estimates.

    b, d: residual frequency and timing drift per symbol. c: timing slope.
    """
    n_sym = hp.shape[0]
    # d is physically tiny and its lag-one estimate is dominated by noise,
    # so start from zero and let the joint refinement pick it up.
    b = d = 0.0
    if n_sym >= 2:
        b = float(np.angle(np.sum(np.conj(hp[:-1]) * hp[1:])))
    m = np.arange(n_sym)[:, None]
    h0 = np.mean(hp * np.exp(-1j * (b + d * pilot_k[None, :]) * m), axis=0)
    order = np.argsort(pilot_k)
    ks, hs = pilot_k[order], h0[order]
    c = 0.0
    if ks.size >= 2:
        dk = np.diff(ks)
        ang = np.angle(np.conj(hs[:-1]) * hs[1:])
        c = float(np.sum(dk * ang) / np.sum(dk * dk))
    a = np.mean(h0 * np.exp(-1j * c * pilot_k))
    # The lag-one start is noisy at low SNR and its slope error grows with m;
    # refine all phase terms jointly against every pilot.
    k = np.broadcast_to(pilot_k[None, :], hp.shape).ravel()
    mm = np.broadcast_to(m, hp.shape).ravel()
    design = np.column_stack([np.ones_like(k), k, mm, k * mm])
    for _ in range(3):
        model = a * np.exp(1j * (c * k + (b + d * k) * mm))
        resid = hp.ravel() * np.conj(model)
        w = np.sqrt(np.abs(resid))
        step = np.linalg.lstsq(design * w[:, None], np.angle(resid) * w, rcond=None)[0]
        a = a * np.exp(1j * step[0])
        c, b, d = c + step[1], b + step[2], d + step[3]
    a = np.mean(hp.ravel() * np.exp(-1j * (c * k + (b + d * k) * mm)))
    return a, b, c, d


def receive_payload(sig: BasebandSignal, cfg: OfdmConfig, n_symbols: int | None = None) -> np.ndarray:
    """Demodulate an aligned, offset-corrected frame back to payload bits.

    Flat-fading equalisation from the known pilots, tracking residual
    frequency and timing drift across the frame.
    """
    spectra = payload_spectra(sig, cfg, n_symbols)
    n_sym = spectra.shape[0]
    if n_sym == 0:
        return np.zeros(0, dtype=np.int8)
    pilots = pilot_values(cfg, n_sym)
    pk = np.asarray(cfg.pilot_subcarriers, dtype=float)
    hp = spectra[:, cfg.fft_index(cfg.pilot_subcarriers)] / pilots
    a, b, c, d = _track_flat_channel(hp, pk)
    dk = np.asarray(cfg.data_subcarriers, dtype=float)
    m = np.arange(n_sym)[:, None]
    h = a * np.exp(1j * (c * dk[None, :] + (b + d * dk[None, :]) * m))
    eq = spectra[:, cfg.fft_index(cfg.data_subcarriers)] / h
    return demap_qam(eq.reshape(-1), cfg.qam_order).astype(np.int8)
