"""Flat Rician channel with motion-induced wideband Doppler, carrier frequency
offset and AWGN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ofdm_phy import C_LIGHT, BasebandSignal, OfdmConfig
from .resample import fractional_resample

K_LOS_ONLY = 1e12


def speed_for_doppler(f_d: float, f_c: float) -> float:
    """Radial speed whose carrier Doppler is ``f_d`` Hz."""
    return f_d * C_LIGHT / f_c


def doppler_for_speed(v: float, f_c: float) -> float:
    return f_c * v / C_LIGHT


@dataclass(frozen=True)
class ChannelParams:
    k_factor: float = K_LOS_ONLY
    p_r: float = 1.0
    v_re: float = 0.0
    f_cfo: float = 0.0
    r_0: float = 0.0
    snr_db: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if not self.k_factor >= 0:
            raise ConfigError(f"Rician K must be >= 0, got {self.k_factor}")
        if not self.p_r > 0:
            raise ConfigError(f"received power must be positive, got {self.p_r}")

    @property
    def los_power(self) -> float:
        if math.isinf(self.k_factor):
            return self.p_r
        return self.k_factor * self.p_r / (self.k_factor + 1)

    @property
    def scatter_power(self) -> float:
        if math.isinf(self.k_factor):
            return 0.0
        return self.p_r / (self.k_factor + 1)

    def doppler_hz(self, f_c: float) -> float:
        return doppler_for_speed(self.v_re, f_c)


@dataclass(frozen=True)
class ChannelRealization:
    h: complex
    phi: float


def draw_realization(params: ChannelParams, cfg: OfdmConfig, rng) -> ChannelRealization:
    """Draw the LOS phase and fold in the fixed path-length rotation."""
    phi = float(rng.uniform(0.0, 2 * np.pi))
    h = np.sqrt(params.p_r) * np.exp(1j * phi) * np.exp(-2j * np.pi * cfg.f_c * params.r_0 / C_LIGHT)
    return ChannelRealization(complex(h), phi)


def draw_rician_gain(params: ChannelParams, n: int, cfg: OfdmConfig, rng=None,
                     realization: ChannelRealization | None = None) -> np.ndarray:
    """Per-sample complex gain: a rotating LOS term plus an independent
    complex Gaussian scatter term of power p_r/(K+1)."""
    if n < 1:
        raise ConfigError("need at least one sample")
    rng = np.random.default_rng(params.seed if rng is None else rng)
    if realization is None:
        realization = draw_realization(params, cfg, rng)
    g = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
    t = np.arange(n) / cfg.f_s
    f_d = params.doppler_hz(cfg.f_c)
    los = np.sqrt(params.los_power / params.p_r) * realization.h * np.exp(2j * np.pi * f_d * t)
    return los + np.sqrt(params.scatter_power) * g


def add_awgn(sig: BasebandSignal, snr_db: float, signal_power: float, seed) -> BasebandSignal:
    if math.isinf(snr_db) and snr_db > 0:
        return sig
    if not signal_power > 0:
        raise ConfigError("signal power must be positive")
    rng = np.random.default_rng(seed)
    var = signal_power / 10 ** (snr_db / 10)
    n = len(sig)
    w = np.sqrt(var / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return sig.with_samples(sig.samples + w)


def apply_channel(sig: BasebandSignal, params: ChannelParams, cfg: OfdmConfig,
                  return_realization: bool = False):
    """Received signal h x((1 + v/c) t) exp(j 2 pi (f_CFO + f_c v/c) t) + w(t).

    Time scaling gives every subcarrier its own (f_c + f_k) v / c shift; the
    carrier part rides on the LOS rotation of the gain. AWGN is scaled to
    the mean power of the noiseless output.
    """
    if sig.f_s != cfg.f_s:
        raise ConfigError(f"signal sampled at {sig.f_s} Hz, config expects {cfg.f_s} Hz")
    rng = np.random.default_rng(params.seed)
    real = draw_realization(params, cfg, rng)
    x = fractional_resample(sig.samples, 1.0 + params.v_re / C_LIGHT)
    gains = draw_rician_gain(params, x.size, cfg, rng, realization=real)
    t = np.arange(x.size) / cfg.f_s
    y = x * gains * np.exp(2j * np.pi * params.f_cfo * t)
    out = sig.with_samples(y)
    if not (math.isinf(params.snr_db) and params.snr_db > 0):
        out = add_awgn(out, params.snr_db, out.power(), rng)
    return (out, real) if return_realization else out
