"""Wideband Doppler as time scaling: windowed-sinc fractional resampling plus
a carrier mixer."""
from __future__ import annotations

import numpy as np
from scipy.special import i0

KERNEL_TAPS = 32
KAISER_BETA = 9.0
_CHUNK = 1 << 15


def fractional_resample(x, factor: float, taps: int = KERNEL_TAPS, beta: float = KAISER_BETA) -> np.ndarray:
    """Evaluate ``x`` at instants ``n * factor`` for n = 0..len(x)-1.

    A factor above one compresses time, scaling every frequency in the
    band by ``factor``. Samples outside the input are treated as zero.
    """
    x = np.asarray(x, dtype=np.complex128)
    if factor == 1.0:
        return x.copy()
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(x.size, dtype=np.complex128)
    for lo in range(0, x.size, _CHUNK):
        t = np.arange(lo, min(lo + _CHUNK, x.size)) * factor
        base = np.floor(t).astype(np.int64)
        d = offsets[None, :] - (t - base)[:, None]
        window = i0(beta * np.sqrt(np.clip(1.0 - (d / half) ** 2, 0.0, None))) / i0(beta)
        idx = base[:, None] + offsets[None, :]
        inside = (idx >= 0) & (idx < x.size)
        taps_in = np.where(inside, x[np.clip(idx, 0, x.size - 1)], 0.0)
        out[lo:lo + t.size] = np.sum(taps_in * np.sinc(d) * window, axis=1)
    return out


def doppler_shift(x, f_s: float, f_c: float, beta_v: float) -> np.ndarray:
    """Shift every baseband frequency f to (f_c + f) * (1 + beta_v) - f_c.

    ``beta_v`` is the radial speed over c, positive when approaching.
    """
    y = fractional_resample(x, 1.0 + beta_v)
    if beta_v == 0.0:
        return y
    n = np.arange(y.size)
    return y * np.exp(2j * np.pi * f_c * beta_v * n / f_s)
