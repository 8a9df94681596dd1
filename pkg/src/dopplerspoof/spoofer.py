"""Doppler spoofing filter (DSF).

The transmitter makes subcarrier k look shifted by (f_c + f_k) * dv / c,
exactly what a source moving dv faster would produce. A linear-phase
Kaiser-windowed FIR is the filtering stage (unit magnitude over the used band,
constant group delay). A resampler plus a carrier mixer then apply the
subcarrier-dependent shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DesignError, ToleranceError
from .ofdm_phy import C_LIGHT, BasebandSignal, OfdmConfig
from .resample import doppler_shift

PASSBAND_RIPPLE_DB = 0.1
PHASE_LINEARITY_RAD = 1e-3


@dataclass(frozen=True)
class SpoofParams:
    v_sp: float
    v_re_known: float | None = None

    @property
    def delta_v(self) -> float:
        """Speed the filter must add on top of the channel."""
        return self.v_sp if self.v_re_known is None else self.v_sp - self.v_re_known


@dataclass(frozen=True, eq=False)
class DsfFilter:
    taps: np.ndarray
    group_delay: float
    design_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float).reshape(-1)
        if not np.array_equal(taps, taps[::-1]):
            raise DesignError("DSF taps must be symmetric")
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size

    def response(self, f_norm) -> np.ndarray:
        """H at normalised frequencies f/f_s (signed)."""
        f_norm = np.asarray(f_norm, dtype=float)
        n = np.arange(self.taps.size)
        return np.exp(-2j * np.pi * np.multiply.outer(f_norm, n)) @ self.taps


def _used_band_edge(cfg: OfdmConfig) -> float:
    return max(abs(k) for k in cfg.used_subcarriers) / cfg.n_fft


def passband_phase_residual(filt: DsfFilter, f_norm) -> float:
    """Largest deviation of the unwrapped phase from its best-fit line."""
    f_norm = np.sort(np.asarray(f_norm, dtype=float))
    phase = np.unwrap(np.angle(filt.response(f_norm)))
    coef = np.polyfit(f_norm, phase, 1)
    return float(np.max(np.abs(phase - np.polyval(coef, f_norm))))


def design_dsf(cfg: OfdmConfig, order: int = 64, kaiser_beta: float = 5.0) -> DsfFilter:
    """Kaiser-window lowpass whose passband holds every used subcarrier.

    ``order`` is the tap count; an even count gives the Type II structure,
    which places a zero at f_s/2. The cutoff sits midway between the used
    band edge and Nyquist.
    """
    if order < 8:
        raise ConfigError(f"DSF order must be >= 8, got {order}")
    edge = _used_band_edge(cfg)
    cutoff = 0.5 * (edge + 0.5)
    n = np.arange(order) - (order - 1) / 2
    taps = 2 * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(order, kaiser_beta)
    taps /= taps.sum()
    taps = 0.5 * (taps + taps[::-1])
    filt = DsfFilter(taps, (order - 1) / 2, {
        "passband_edge": edge, "cutoff": cutoff, "kaiser_beta": kaiser_beta, "order": order,
        "type": "II" if order % 2 == 0 else "I",
    })
    used = np.asarray(cfg.used_subcarriers) / cfg.n_fft
    ripple = float(np.max(np.abs(20 * np.log10(np.abs(filt.response(used))))))
    if ripple > PASSBAND_RIPPLE_DB:
        raise DesignError(
            f"passband ripple {ripple:.3f} dB exceeds {PASSBAND_RIPPLE_DB} dB at order {order}",
            ripple_db=ripple)
    filt.design_meta["ripple_db"] = ripple
    return filt


def max_offset_hz(cfg: OfdmConfig, v: float) -> float:
    """Largest |(f_c + f_k) v / c| over the used subcarriers."""
    f = cfg.f_c + cfg.subcarrier_freq(cfg.used_subcarriers)
    return float(np.max(np.abs(f * v / C_LIGHT)))


def check_tolerance(cfg: OfdmConfig, sp: SpoofParams) -> None:
    # The known-speed scheme makes v_sp the aggregate; the simple scheme only
    # controls its own contribution, which is v_sp as well.
    offset = max_offset_hz(cfg, sp.v_sp)
    if offset > cfg.offset_tolerance_hz:
        raise ToleranceError(
            f"spoofed shift reaches {offset / 1e3:.1f} kHz, beyond the "
            f"{cfg.offset_tolerance_hz / 1e3:.1f} kHz the receiver can absorb")


def apply_spoof(sig: BasebandSignal, sp: SpoofParams, cfg: OfdmConfig, filt: DsfFilter) -> BasebandSignal:
    """Filter, then shift every subcarrier by (f_c + f_k) * dv / c.

    The output is the full convolution, ``len(filt) - 1`` samples longer than
    the input and delayed by ``filt.group_delay``.
    """
    if sig.f_s != cfg.f_s:
        raise ConfigError(f"signal sampled at {sig.f_s} Hz, config expects {cfg.f_s} Hz")
    check_tolerance(cfg, sp)
    y = np.convolve(sig.samples, filt.taps)
    return BasebandSignal(doppler_shift(y, cfg.f_s, cfg.f_c, sp.delta_v / C_LIGHT), cfg.f_s)


def simple_spoof(sig: BasebandSignal, v_sp: float, cfg: OfdmConfig, filt: DsfFilter) -> BasebandSignal:
    """Spoof without knowing the real speed; an observer then reads v_sp + v_re."""
    return apply_spoof(sig, SpoofParams(v_sp), cfg, filt)


def write_taps(path, filt: DsfFilter) -> None:
    Path(path).write_text("".join(f"{t!r}\n" for t in filt.taps.tolist()))


def read_taps(path) -> np.ndarray:
    return np.array([float(line) for line in Path(path).read_text().split()])
