"""Joint CFO/speed estimation by an eavesdropper and aggregate-offset
correction at the legitimate receiver.

The eavesdropper measures the frequency offset U_k seen on every pilot
subcarrier and fits U_k = f_CFO + (f_c + f_k) v / c. CFO moves all
subcarriers equally while motion scales with f_c + f_k, which is what
separates the two.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (AliasWarning, ConfigError, DegenerateGeometryError, FrameNotDetectedError,
                     SingularInnovationError, SizeError, UndefinedPhaseError, ValidationError,
                     ZeroPilotError)
from .ofdm_phy import (C_LIGHT, BasebandSignal, OfdmConfig, frame_symbol_count,
                       pilot_reference_signal, window_backoff)

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class EstimatorConfig:
    delay_d: int = 16
    pilot_bins: tuple = ()
    noise_cov_scale: float | None = None
    # Short symbols skipped at each end of the preamble. Filter and
    # resampler transients make the edge blocks non-periodic.
    sts_guard: int = 2

    def __post_init__(self):
        object.__setattr__(self, "pilot_bins", tuple(int(k) for k in self.pilot_bins))
        if self.delay_d <= 0:
            raise ConfigError(f"correlation delay must be positive, got {self.delay_d}")
        if self.sts_guard < 0:
            raise ConfigError(f"preamble guard must be >= 0, got {self.sts_guard}")

    @classmethod
    def for_config(cls, cfg: OfdmConfig, **kw) -> EstimatorConfig:
        kw.setdefault("delay_d", cfg.sts_symbol_len)
        kw.setdefault("pilot_bins", cfg.pilot_subcarriers)
        return cls(**kw)

    def validate(self, cfg: OfdmConfig) -> None:
        if not 0 < self.delay_d < cfg.n_fft:
            raise ConfigError(f"delay {self.delay_d} must lie in (0, {cfg.n_fft})")
        missing = set(self.pilot_bins) - set(cfg.pilot_subcarriers)
        if missing:
            raise ConfigError(f"bins {sorted(missing)} are not pilot subcarriers")
        if len(set(self.pilot_bins)) < 2:
            raise ConfigError("need at least two distinct pilot bins")
        kept = (cfg.sts_repeats - 2 * self.sts_guard) * cfg.sts_symbol_len
        if kept <= self.delay_d:
            raise ConfigError(f"guard of {self.sts_guard} short symbols leaves {kept} preamble "
                              f"samples, not enough for delay {self.delay_d}")


@dataclass(frozen=True, eq=False)
class SubcarrierStatistics:
    u: np.ndarray
    bins: tuple

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(-1)
        if u.size != len(self.bins):
            raise SizeError(f"{u.size} statistics for {len(self.bins)} bins")
        if not np.all(np.isfinite(u)):
            raise ValueError("subcarrier statistics must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "bins", tuple(int(k) for k in self.bins))


@dataclass(frozen=True, eq=False)
class EstimateResult:
    f_cfo_hat: float
    v_hat: float
    residual_norm: float
    covariance: np.ndarray


@dataclass(frozen=True, eq=False)
class LmmseState:
    z_hat: np.ndarray
    c_m: np.ndarray
    m: int = 0

    @property
    def f_cfo_hat(self) -> float:
        return float(self.z_hat[0])

    @property
    def v_hat(self) -> float:
        return float(self.z_hat[1])

    @property
    def trace(self) -> float:
        return float(np.trace(self.c_m))


# --- per-subcarrier chain --------------------------------------------------

def _blocks(cfg: OfdmConfig, n: int):
    """Yield (start, stop, fit_start, fit_stop) for the frame layout.

    Preamble blocks are one short symbol; payload blocks are one
    CP-prefixed symbol fitted over an n_fft window inside it.
    """
    pos = 0
    sts_end = min(n, cfg.sts_len)
    while pos < sts_end:
        stop = min(pos + cfg.sts_symbol_len, sts_end)
        yield pos, stop, pos, stop
        pos = stop
    b = window_backoff(cfg)
    while pos < n:
        stop = min(pos + cfg.symbol_len, n)
        lo = pos + cfg.cp_len - b
        if lo + cfg.n_fft <= stop:
            yield pos, stop, lo, lo + cfg.n_fft
        else:
            yield pos, stop, pos, stop
        pos = stop


def _block_coefficients(x: np.ndarray, k: int, cfg: OfdmConfig):
    """Least-squares amplitude of the bin-k tone exp(j 2 pi k n / N) per block."""
    tone = np.exp(2j * np.pi * k * np.arange(x.size) / cfg.n_fft)
    spans = list(_blocks(cfg, x.size))
    edges = np.array([(a, b) for _, _, a, b in spans], dtype=np.int64).ravel()
    # trailing zero so a window may end at x.size
    sums = np.add.reduceat(np.append(np.conj(tone) * x, 0), edges)[0::2]
    return sums / np.diff(edges)[0::2], spans, tone


def isolate_subcarrier(sig: BasebandSignal, k: int, cfg: OfdmConfig) -> BasebandSignal:
    """Brick-wall extraction of subcarrier k, block by block.

    Each short preamble symbol, and each payload symbol (over an n_fft
    window inside its CP-prefixed span), is projected onto the bin-k tone.
    Tones on other bins of the same grid are rejected exactly.
    """
    if k not in cfg.pilot_subcarriers:
        raise ConfigError(f"subcarrier {k} is not a pilot bin")
    coefs, spans, tone = _block_coefficients(sig.samples, k, cfg)
    out = np.empty_like(sig.samples)
    for c, (start, stop, _, _) in zip(coefs, spans):
        out[start:stop] = c * tone[start:stop]
    return sig.with_samples(out)


def matched_filter(y_k, x_k) -> np.ndarray:
    """z_k[n] = x_k*[n] y_k[n] / |x_k[n]|^2."""
    y = np.asarray(getattr(y_k, "samples", y_k), dtype=np.complex128)
    x = np.asarray(getattr(x_k, "samples", x_k), dtype=np.complex128)
    if x.shape != y.shape:
        raise SizeError(f"received {y.shape} and reference {x.shape} differ in length")
    power = np.abs(x) ** 2
    if np.any(power == 0):
        raise ZeroPilotError(f"reference is zero at {np.count_nonzero(power == 0)} samples")
    return np.conj(x) * y / power


def compute_statistic(z_k, delay_d: int, t_s: float, check_alias: bool = True) -> float:
    """Frequency offset in Hz from the phase of sum z*[n - D] z[n].

    Unambiguous for |offset| < 1 / (2 D t_s). With ``check_alias`` a lag-one
    correlation, whose range is D times wider, is compared against that
    bound and an :class:`AliasWarning` is issued when it is exceeded.
    """
    z = np.asarray(z_k, dtype=np.complex128)
    if z.size <= delay_d:
        raise SizeError(f"need more than {delay_d} samples, got {z.size}")
    s = np.vdot(z[:-delay_d], z[delay_d:])
    if abs(s) <= 1e-300 or abs(s) < 1e-14 * np.sum(np.abs(z) ** 2):
        raise UndefinedPhaseError("correlation sum vanishes; phase undefined")
    u = float(np.angle(s) / (2 * np.pi * delay_d * t_s))
    if check_alias and delay_d > 1:
        bound = 1.0 / (2 * delay_d * t_s)
        coarse = float(np.angle(np.vdot(z[:-1], z[1:])) / (2 * np.pi * t_s))
        if abs(coarse) > bound:
            warnings.warn(
                f"offset near {coarse / 1e3:.0f} kHz exceeds the {bound / 1e3:.0f} kHz range "
                f"of delay {delay_d}; estimate {u / 1e3:.0f} kHz is aliased",
                AliasWarning, stacklevel=2)
    return u


def design_matrix(cfg: OfdmConfig, bins) -> np.ndarray:
    """Rows [1, (f_c + f_k) / c]."""
    f = cfg.f_c + cfg.subcarrier_freq(bins)
    return np.column_stack([np.ones_like(f), f / C_LIGHT])


def solve_joint_ls(stats: SubcarrierStatistics, cfg: OfdmConfig) -> EstimateResult:
    """Least-squares (f_CFO, v) from per-subcarrier offsets.

    The speed column is rescaled by c / f_c and both columns are normalised
    before forming the 2x2 normal equations; the columns stay nearly
    collinear because f_k is much smaller than f_c.
    """
    if len(set(stats.bins)) < 2:
        raise DegenerateGeometryError("need at least two distinct pilot bins")
    a = design_matrix(cfg, stats.bins)
    scale = np.array([1.0, C_LIGHT / cfg.f_c])
    scale /= np.linalg.norm(a * scale, axis=0)
    b = a * scale
    gram = b.T @ b
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    cond = np.linalg.cond(gram) if det > 0 else np.inf
    if not cond < _COND_LIMIT:
        raise DegenerateGeometryError(f"pilot geometry is rank deficient (condition {cond:.3g})")
    y = np.linalg.solve(gram, b.T @ stats.u)
    z = scale * y
    resid = stats.u - a @ z
    dof = stats.u.size - 2
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = sigma2 * (scale[:, None] * np.linalg.inv(gram) * scale[None, :])
    return EstimateResult(float(z[0]), float(z[1]), float(np.linalg.norm(resid)), 0.5 * (cov + cov.T))


# --- recursive LMMSE -------------------------------------------------------

def _is_pd(m: np.ndarray) -> bool:
    if not np.allclose(m, m.T, rtol=1e-10, atol=0):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def lmmse_init(prior_z, prior_cov) -> LmmseState:
    z = np.asarray(prior_z, dtype=float).reshape(2)
    c = np.asarray(prior_cov, dtype=float).reshape(2, 2)
    if not _is_pd(c):
        raise ValidationError("prior covariance must be symmetric positive definite")
    return LmmseState(z, c, 0)


def lmmse_update(state: LmmseState, p_m, a, c_w) -> LmmseState:
    """One block of the recursion

        K_m = C A^T (A C A^T + C_w)^-1
        z_m = z + K_m (p_m - A z)
        C_m = (I - K_m A) C

    evaluated in square-root information form.
    """
    p = np.asarray(p_m, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float)
    c_w = np.asarray(c_w, dtype=float)
    if a.shape != (p.size, 2) or c_w.shape != (p.size, p.size):
        raise SizeError(f"inconsistent shapes: p {p.shape}, A {a.shape}, C_w {c_w.shape}")
    if not _is_pd(c_w):
        raise ValidationError("measurement noise covariance must be positive definite")
    c = state.c_m
    s = a @ c @ a.T + c_w
    cond = np.linalg.cond(s)
    if not cond < 1.0 / np.finfo(float).eps:
        raise SingularInnovationError(f"innovation covariance is singular (condition {cond:.3g})", cond)
    # Same posterior as the gain form, solved as a whitened least-squares
    # problem. (I - K A) C cancels badly when the prior is much wider than
    # the posterior.
    l_c = np.linalg.cholesky(c)
    l_w = np.linalg.cholesky(c_w)
    rows = np.vstack([solve_triangular(l_c, np.eye(2), lower=True), solve_triangular(l_w, a, lower=True)])
    rhs = np.concatenate([solve_triangular(l_c, state.z_hat, lower=True), solve_triangular(l_w, p, lower=True)])
    q, r = np.linalg.qr(rows)
    z = solve_triangular(r, q.T @ rhs)
    r_inv = solve_triangular(r, np.eye(2))
    c_new = r_inv @ r_inv.T
    return LmmseState(z, 0.5 * (c_new + c_new.T), state.m + 1)


def lmmse_from_first(stats: SubcarrierStatistics, cfg: OfdmConfig):
    """Start the recursion in the flat-prior limit.

    The least-squares fit of the first measurement and its covariance are
    the posterior after one block under an unbounded prior. Returns the
    state together with the white-noise covariance used for later blocks.
    """
    a = design_matrix(cfg, stats.bins)
    fit = solve_joint_ls(stats, cfg)
    sigma2 = fit.residual_norm ** 2 / max(stats.u.size - 2, 1)
    floor = (1e-9 * max(1.0, float(np.max(np.abs(stats.u))))) ** 2
    sigma2 = max(sigma2, floor)
    cov = sigma2 * np.linalg.inv(a.T @ a)
    state = LmmseState(np.array([fit.f_cfo_hat, fit.v_hat]), 0.5 * (cov + cov.T), 1)
    return state, sigma2 * np.eye(stats.u.size)


def run_lmmse(measurements, cfg: OfdmConfig, noise_var: float | None = None) -> list:
    """Recursive estimate after each measurement block; flat prior."""
    state, c_w = lmmse_from_first(measurements[0], cfg)
    if noise_var is not None:
        c_w = noise_var * np.eye(c_w.shape[0])
    states = [state]
    for meas in measurements[1:]:
        a = design_matrix(cfg, meas.bins)
        state = lmmse_update(state, meas.u, a, c_w)
        states.append(state)
    return states


# --- legitimate receiver ---------------------------------------------------

def sts_correlation(x: np.ndarray, cfg: OfdmConfig):
    """Return (offset_hz, normalised correlation magnitude) over the preamble."""
    sts = x[: cfg.sts_len]
    lag = cfg.sts_symbol_len
    if sts.size <= lag:
        raise SizeError("signal too short to hold a preamble")
    p = np.vdot(sts[:-lag], sts[lag:])
    energy = np.sqrt(np.sum(np.abs(sts[:-lag]) ** 2) * np.sum(np.abs(sts[lag:]) ** 2))
    metric = abs(p) / energy if energy > 0 else 0.0
    return float(np.angle(p) / (2 * np.pi * lag / cfg.f_s)), float(metric)


def moose_correct(frame_sig: BasebandSignal, cfg: OfdmConfig, threshold: float = 0.5):
    """Estimate one aggregate offset from the repeated short symbols and remove it.

    Returns ``(corrected, offset_hat_hz)``.
    """
    offset, metric = sts_correlation(frame_sig.samples, cfg)
    if metric < threshold:
        raise FrameNotDetectedError(
            f"preamble correlation {metric:.3f} below threshold {threshold}")
    n = np.arange(len(frame_sig))
    corrected = frame_sig.samples * np.exp(-2j * np.pi * offset * n / cfg.f_s)
    return frame_sig.with_samples(corrected), offset


# --- eavesdropper pipeline -------------------------------------------------

def _pair_offsets(z: np.ndarray, t_sym: float) -> np.ndarray:
    """Lag-one statistic for every pair of consecutive block values."""
    s = np.conj(z[:-1]) * z[1:]
    energy = np.abs(z[:-1]) ** 2 + np.abs(z[1:]) ** 2
    if np.any((np.abs(s) <= 1e-300) | (np.abs(s) < 1e-14 * energy)):
        raise UndefinedPhaseError("correlation sum vanishes; phase undefined")
    return np.angle(s) / (2 * np.pi * t_sym)


def subcarrier_measurements(sig: BasebandSignal, cfg: OfdmConfig, est: EstimatorConfig | None = None,
                            per_block: bool = False) -> list:
    """Per-pilot offset vectors, one per measurement block.

    The aggregate offset is first read from the preamble and removed, so the
    remaining per-subcarrier offsets are small and each pilot can be
    separated from its neighbours; the removed offset is added back to
    every statistic. The preamble gives one measurement (or one per pair of
    short symbols with ``per_block``) and every pair of consecutive payload
    symbols gives one more.
    """
    est = est or EstimatorConfig.for_config(cfg)
    est.validate(cfg)
    n_sym = frame_symbol_count(cfg, len(sig))
    coarse, f0 = moose_correct(sig, cfg, threshold=0.0)
    ref = pilot_reference_signal(cfg, n_sym).samples
    y = coarse.samples[: ref.size]
    if y.size < ref.size:
        y = np.concatenate([y, np.zeros(ref.size - y.size)])
    t_s = cfg.sample_period
    lag = est.delay_d
    n_sts = cfg.sts_repeats

    per_bin = []
    for k in est.pilot_bins:
        cy, spans, _ = _block_coefficients(y, k, cfg)
        cx, _, _ = _block_coefficients(ref, k, cfg)
        z_blocks = matched_filter(cy, cx)
        lengths = np.array([stop - start for start, stop, _, _ in spans])
        z = np.repeat(z_blocks, lengths)
        rows = []
        step = cfg.sts_symbol_len
        first, last = est.sts_guard, n_sts - est.sts_guard
        if per_block:
            for b in range(first + 1, last):
                rows.append(compute_statistic(z[(b - 1) * step:(b + 1) * step], lag, t_s))
        else:
            rows.append(compute_statistic(z[first * step:last * step], lag, t_s))
        rows.extend(_pair_offsets(z_blocks[n_sts:], cfg.symbol_len * t_s))
        per_bin.append(rows)
    u = f0 + np.asarray(per_bin).T
    return [SubcarrierStatistics(row, est.pilot_bins) for row in u]


def estimate_speed_pipeline(sig: BasebandSignal, cfg: OfdmConfig,
                            est: EstimatorConfig | None = None) -> EstimateResult:
    """Isolate, matched-filter and correlate every pilot, then solve for (f_CFO, v)."""
    meas = subcarrier_measurements(sig, cfg, est)
    mean_u = np.mean([m.u for m in meas], axis=0)
    return solve_joint_ls(SubcarrierStatistics(mean_u, meas[0].bins), cfg)
