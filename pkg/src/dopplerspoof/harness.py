"""Seeded Monte Carlo experiments: BER sweeps, periodograms, estimation traces
and the DSF frequency response, all written as CSV."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps
from statsmodels.stats.proportion import confint_proportions_2indep

from .channel import ChannelParams, apply_channel, doppler_for_speed, speed_for_doppler
from .errors import ConfigError
from .estimators import (EstimatorConfig, estimate_speed_pipeline, moose_correct, run_lmmse,
                         subcarrier_measurements)
from .iqfile import read_keyvalue
from .ofdm_phy import C_LIGHT, BasebandSignal, OfdmConfig, random_frame, receive_payload
from .spoofer import DsfFilter, SpoofParams, apply_spoof, check_tolerance, design_dsf, write_taps

KINDS = ("ber", "periodogram", "estimate", "filter-report")
DEFAULT_SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
# Payload symbols per frame when the experiment does not set them.
DEFAULT_SYMBOLS = {"ber": 50, "periodogram": 400, "estimate": 0, "filter-report": 0}
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

BER_COLUMNS = ("snr_db", "doppler_hz_real", "doppler_hz_artificial", "bits_tested", "bit_errors", "ber")
PSD_COLUMNS = ("freq_hz", "psd_db")
SUMMARY_COLUMNS = ("snr_db", "n_trials", "mean_phase_error_rad", "median_v_hat_mps", "v_true_mps")
TRACE_COLUMNS = ("symbol_index", "f_cfo_hat_hz", "v_hat_mps", "trace_c_m")
PHASE_COLUMNS = ("snr_db", "time_s", "phi_hat_rad", "phi_re_rad", "phi_true_rad")
FILTER_COLUMNS = ("f_norm", "mag_db", "phase_rad")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "ber"
    snr_grid_db: tuple = DEFAULT_SNR_GRID
    n_trials: int = 1
    channel: ChannelParams = field(default_factory=ChannelParams)
    spoof: SpoofParams | None = None
    cfg: OfdmConfig = field(default_factory=OfdmConfig)
    est: EstimatorConfig = field(default_factory=EstimatorConfig)
    seed: int = 0
    out_path: str | None = None
    n_symbols: int | None = None
    min_bits: int = 100_000
    dsf_order: int = 64
    kaiser_beta: float = 5.0
    detect_threshold: float = 0.2
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.kind in ("ber", "estimate") and not self.snr_grid_db:
            raise ConfigError(f"{self.kind} needs a non-empty SNR grid")
        if any(math.isnan(s) for s in self.snr_grid_db):
            raise ConfigError("SNR grid contains NaN")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.n_symbols is not None and self.n_symbols < 0:
            raise ConfigError("n_symbols must be >= 0")
        if self.min_bits < 1 or self.workers < 1:
            raise ConfigError("min_bits and workers must be positive")
        if not self.est.pilot_bins:
            object.__setattr__(self, "est", EstimatorConfig.for_config(
                self.cfg, delay_d=self.est.delay_d, sts_guard=self.est.sts_guard,
                noise_cov_scale=self.est.noise_cov_scale))
        self.est.validate(self.cfg)

    @property
    def symbols_per_frame(self) -> int:
        return DEFAULT_SYMBOLS[self.kind] if self.n_symbols is None else self.n_symbols

    @property
    def v_true(self) -> float:
        """Aggregate speed an observer should read."""
        dv = 0.0 if self.spoof is None else self.spoof.delta_v
        return self.channel.v_re + dv

    def spec_hash(self) -> str:
        d = dataclasses.asdict(self)
        for key in ("out_path", "workers"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class BerRecord:
    snr_db: float
    doppler_hz_real: float
    doppler_hz_artificial: float
    bits_tested: int
    bit_errors: int

    def __post_init__(self):
        if self.bits_tested <= 0:
            raise ConfigError("a BER cell needs at least one bit")

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_tested

    def row(self):
        return (self.snr_db, self.doppler_hz_real, self.doppler_hz_artificial,
                self.bits_tested, self.bit_errors, self.ber)


# --- seeding and parallel map -----------------------------------------------

def trial_seed(master: int, *counters) -> np.random.SeedSequence:
    """Independent stream for one (cell, trial) coordinate of the master seed."""
    return np.random.SeedSequence(master, spawn_key=tuple(int(c) for c in counters))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def _map(fn, items, workers: int):
    # Results come back in submission order, so the reduction is seed-stable.
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# --- signal chain ------------------------------------------------------------

def check_aggregate(spec: ExperimentSpec) -> None:
    """The receiver must absorb the total offset, real plus artificial."""
    check_tolerance(spec.cfg, SpoofParams(spec.v_true))


def simulate_link(sig: BasebandSignal, cfg: OfdmConfig, channel: ChannelParams,
                  spoof: SpoofParams | None, filt: DsfFilter | None) -> BasebandSignal:
    """Spoof (when asked), advance by the filter's integer group delay, then
    pass the channel."""
    if spoof is not None:
        if filt is None:
            raise ConfigError("spoofing needs a designed filter")
        x = apply_spoof(sig, spoof, cfg, filt)
        sig = x.with_samples(x.samples[int(filt.group_delay):])
    return apply_channel(sig, channel, cfg)


def _filter_for(spec: ExperimentSpec) -> DsfFilter:
    return design_dsf(spec.cfg, spec.dsf_order, spec.kaiser_beta)


# --- BER ---------------------------------------------------------------------

def _ber_trial(job):
    spec, filt, snr, cell, trial = job
    cfg = spec.cfg
    frame = random_frame(cfg, spec.symbols_per_frame, trial_seed(spec.seed, _KIND_CODE["ber"], cell, trial, 0))
    chan_seed = _int_seed(trial_seed(spec.seed, _KIND_CODE["ber"], cell, trial, 1))
    x = frame.to_signal()
    errors = []
    # Both arms share bits, channel draws and noise; only the Doppler differs.
    arms = ((replace(spec.channel, v_re=0.0), SpoofParams(0.0)),
            (spec.channel, spec.spoof if spec.spoof is not None else SpoofParams(0.0)))
    for chan, sp in arms:
        y = simulate_link(x, cfg, replace(chan, snr_db=snr, seed=chan_seed), sp, filt)
        y, _ = moose_correct(y, cfg, threshold=spec.detect_threshold)
        bits = receive_payload(y, cfg, frame.n_symbols)
        errors.append(int(np.count_nonzero(bits != frame.payload_bits)))
    return errors


def run_ber(spec: ExperimentSpec) -> list:
    """Paired sweep: a clean reference cell (no Doppler) and the configured
    (real, artificial) Doppler cell at every SNR."""
    if spec.kind != "ber":
        raise ConfigError(f"run_ber needs kind 'ber', got {spec.kind!r}")
    if spec.symbols_per_frame < 1:
        raise ConfigError("BER frames need at least one payload symbol")
    check_aggregate(spec)
    cfg = spec.cfg
    filt = _filter_for(spec)
    bits_per_frame = spec.symbols_per_frame * cfg.bits_per_symbol
    n_frames = max(spec.n_trials, math.ceil(spec.min_bits / bits_per_frame))
    f_real = doppler_for_speed(spec.channel.v_re, cfg.f_c)
    f_art = 0.0 if spec.spoof is None else doppler_for_speed(spec.spoof.delta_v, cfg.f_c)

    records = []
    for cell, snr in enumerate(spec.snr_grid_db):
        jobs = [(spec, filt, snr, cell, t) for t in range(n_frames)]
        errs = np.array(_map(_ber_trial, jobs, spec.workers)).sum(axis=0)
        n_bits = n_frames * bits_per_frame
        records.append(BerRecord(snr, 0.0, 0.0, n_bits, int(errs[0])))
        records.append(BerRecord(snr, f_real, f_art, n_bits, int(errs[1])))
    return records


def ber_differences(records, alpha: float = 0.05) -> list:
    """Per SNR: (snr_db, ber_spoofed - ber_clean, ci_low, ci_high, inside).

    ``inside`` is True when the observed difference lies in the two-sided
    confidence interval of the difference of two binomial proportions, i.e.
    spoofing costs nothing detectable at that grid point.
    """
    out = []
    for clean, spoofed in zip(records[0::2], records[1::2]):
        lo, hi = confint_proportions_2indep(spoofed.bit_errors, spoofed.bits_tested,
                                            clean.bit_errors, clean.bits_tested,
                                            method="newcomb", compare="diff", alpha=alpha)
        diff = spoofed.ber - clean.ber
        # Newcomb's interval collapses to a point when both counts are zero.
        inside = bool(lo <= 0.0 <= hi) or (spoofed.bit_errors == clean.bit_errors)
        out.append((clean.snr_db, diff, float(lo), float(hi), inside))
    return out


def qpsk_awgn_ber(snr_db, cfg: OfdmConfig) -> np.ndarray:
    """Uncoded QPSK BER when the time-domain SNR is spread over all FFT bins.

    Only the used bins carry signal, so each one sees SNR * n_fft / n_used.
    """
    from scipy.special import erfc
    snr = 10 ** (np.asarray(snr_db, dtype=float) / 10) * cfg.n_fft / len(cfg.used_subcarriers)
    return 0.5 * erfc(np.sqrt(snr / 2))


# --- periodogram -------------------------------------------------------------

def periodogram(sig: BasebandSignal, nperseg: int = 1024):
    """Two-sided Welch PSD, frequencies ascending; returns (freq_hz, psd_db)."""
    f, p = sps.welch(sig.samples, fs=sig.f_s, window="hann", nperseg=nperseg,
                     return_onesided=False, detrend=False, scaling="density")
    f, p = np.fft.fftshift(f), np.fft.fftshift(p)
    return f, 10 * np.log10(np.maximum(p, 1e-300))


def band_edges(freq, psd_db, drop_db: float = 3.0):
    """Outermost frequencies where the PSD crosses ``drop_db`` below the
    in-band median, interpolated linearly between bins."""
    freq, psd_db = np.asarray(freq, dtype=float), np.asarray(psd_db, dtype=float)
    level = np.median(psd_db[psd_db > np.max(psd_db) - 30.0])
    above = np.flatnonzero(psd_db >= level - drop_db)
    if above.size == 0 or above[0] == 0 or above[-1] == freq.size - 1:
        raise ConfigError("occupied band touches the edge of the periodogram")
    thr = level - drop_db

    def cross(i_in, i_out):
        p0, p1 = psd_db[i_out], psd_db[i_in]
        w = (thr - p0) / (p1 - p0)
        return freq[i_out] + w * (freq[i_in] - freq[i_out])

    return cross(above[0], above[0] - 1), cross(above[-1], above[-1] + 1)


def band_center(freq, psd_db, drop_db: float = 3.0) -> float:
    lo, hi = band_edges(freq, psd_db, drop_db)
    return 0.5 * (lo + hi)


def periodogram_signal(spec: ExperimentSpec) -> BasebandSignal:
    cfg = spec.cfg
    snr = spec.snr_grid_db[0] if spec.snr_grid_db else math.inf
    frame = random_frame(cfg, spec.symbols_per_frame, trial_seed(spec.seed, _KIND_CODE["periodogram"], 0, 0, 0))
    chan = replace(spec.channel, snr_db=snr,
                   seed=_int_seed(trial_seed(spec.seed, _KIND_CODE["periodogram"], 0, 0, 1)))
    filt = _filter_for(spec) if spec.spoof is not None else None
    return simulate_link(frame.to_signal(), cfg, chan, spec.spoof, filt)


def run_periodogram(spec: ExperimentSpec):
    """Welch periodogram of the received (possibly spoofed) signal.

    Uses the first SNR of the grid (noiseless when the grid is empty).
    Resolution is f_s / 1024, under 20 kHz at 20 MHz.
    """
    if spec.kind != "periodogram":
        raise ConfigError(f"run_periodogram needs kind 'periodogram', got {spec.kind!r}")
    if spec.spoof is not None:
        check_aggregate(spec)
    return periodogram(periodogram_signal(spec))


# --- estimation --------------------------------------------------------------

def _estimate_trial(job):
    spec, filt, snr, cell, trial = job
    cfg = spec.cfg
    frame = random_frame(cfg, spec.symbols_per_frame, trial_seed(spec.seed, _KIND_CODE["estimate"], cell, trial, 0))
    chan = replace(spec.channel, snr_db=snr,
                   seed=_int_seed(trial_seed(spec.seed, _KIND_CODE["estimate"], cell, trial, 1)))
    y = simulate_link(frame.to_signal(), cfg, chan, spec.spoof, filt)
    states = run_lmmse(subcarrier_measurements(y, cfg, spec.est, per_block=True), cfg)
    pipe = estimate_speed_pipeline(y, cfg, spec.est)
    trace = [(s.f_cfo_hat, s.v_hat, s.trace) for s in states]
    return trace, pipe.v_hat


def doppler_phase(v: float, t, f_c: float) -> np.ndarray:
    """Phase accumulated by a carrier Doppler of speed ``v`` after time ``t``."""
    return 2 * np.pi * f_c * v * np.asarray(t, dtype=float) / C_LIGHT


def run_estimation(spec: ExperimentSpec) -> dict:
    """Per SNR: LMMSE over the preamble blocks and the batch pipeline on every trial.

    Returns a dict with ``summary`` rows, per-SNR ``traces`` (first trial)
    and ``phase`` rows comparing the estimated Doppler phase with the real
    and the aggregate (real plus artificial) phase over the preamble.
    """
    if spec.kind != "estimate":
        raise ConfigError(f"run_estimation needs kind 'estimate', got {spec.kind!r}")
    if spec.spoof is not None:
        check_aggregate(spec)
    cfg = spec.cfg
    filt = _filter_for(spec) if spec.spoof is not None else None
    t = np.arange(cfg.sts_len) * cfg.sample_period
    phi_true = doppler_phase(spec.v_true, t, cfg.f_c)
    phi_re = doppler_phase(spec.channel.v_re, t, cfg.f_c)

    summary, traces, phase = [], {}, []
    for cell, snr in enumerate(spec.snr_grid_db):
        jobs = [(spec, filt, snr, cell, k) for k in range(spec.n_trials)]
        results = _map(_estimate_trial, jobs, spec.workers)
        errors = []
        for trace, _ in results:
            phi_hat = doppler_phase(trace[-1][1], t, cfg.f_c)
            errors.append(float(np.mean(np.abs(phi_hat - phi_true))))
        v_pipe = np.array([v for _, v in results])
        summary.append((snr, spec.n_trials, float(np.mean(errors)), float(np.median(v_pipe)), spec.v_true))
        traces[snr] = [(i, *row) for i, row in enumerate(results[0][0])]
        phi_hat = doppler_phase(results[0][0][-1][1], t, cfg.f_c)
        phase.extend(zip([snr] * t.size, t, phi_hat, phi_re, phi_true))
    return {"summary": summary, "traces": traces, "phase": phase}


# --- filter report -------------------------------------------------------------

def filter_response(filt: DsfFilter, n_points: int = 1024):
    """(f_norm, mag_db, phase_rad) on a uniform grid over [-0.5, 0.5)."""
    f = (np.arange(n_points) - n_points // 2) / n_points
    h = filt.response(f)
    mag_db = 20 * np.log10(np.maximum(np.abs(h), 1e-15))
    return f, mag_db, np.angle(h)


def run_filter_report(spec: ExperimentSpec):
    if spec.kind != "filter-report":
        raise ConfigError(f"run_filter_report needs kind 'filter-report', got {spec.kind!r}")
    return _filter_for(spec)


# --- CSV output ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, spec: ExperimentSpec) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# spec_hash={spec.spec_hash()} seed={spec.seed} kind={spec.kind} "
                 f"qam_order={spec.cfg.qam_order}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Return (metadata line, header, rows of strings)."""
    lines = Path(path).read_text().splitlines()
    rows = list(csv.reader(lines[1:]))
    return lines[0], rows[0], rows[1:]


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(f"{out.stem}_{suffix}{out.suffix or '.csv'}")


def run_experiment(spec: ExperimentSpec) -> list:
    """Run ``spec`` and write its CSV files; returns the paths written."""
    if spec.out_path is None:
        raise ConfigError("an output path is required")
    out = Path(spec.out_path)
    if spec.kind == "ber":
        write_csv(out, BER_COLUMNS, [r.row() for r in run_ber(spec)], spec)
        return [out]
    if spec.kind == "periodogram":
        f, p = run_periodogram(spec)
        write_csv(out, PSD_COLUMNS, zip(f, p), spec)
        return [out]
    if spec.kind == "estimate":
        res = run_estimation(spec)
        write_csv(out, SUMMARY_COLUMNS, res["summary"], spec)
        paths = [out]
        for snr, rows in res["traces"].items():
            p = _sibling(out, f"trace_{snr:g}dB")
            write_csv(p, TRACE_COLUMNS, rows, spec)
            paths.append(p)
        p = _sibling(out, "phase")
        write_csv(p, PHASE_COLUMNS, res["phase"], spec)
        return paths + [p]
    filt = run_filter_report(spec)
    write_csv(out, FILTER_COLUMNS, zip(*filter_response(filt)), spec)
    taps = out.with_name(out.stem + "_taps.txt")
    write_taps(taps, filt)
    return [out, taps]


# --- key-value config ------------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(s) for s in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(s) for s in text.replace(",", " ").split())


_CFG_KEYS = {
    "n_fft": int, "f_c": float, "f_s": float, "cp_len": int, "qam_order": int,
    "sts_repeats": int, "sts_symbol_len": int, "pilot_seed": int,
    "used_subcarriers": _ints, "pilot_subcarriers": _ints,
}
_CHANNEL_KEYS = {"k_factor": float, "p_r": float, "f_cfo": float, "r_0": float}
_EST_KEYS = {"delay_d": int, "sts_guard": int}
_SPEC_KEYS = {
    "kind": str, "snr_grid_db": _floats, "n_trials": int, "seed": int, "out_path": str,
    "n_symbols": int, "min_bits": int, "dsf_order": int, "kaiser_beta": float,
    "detect_threshold": float, "workers": int,
}
# Speeds may be given in m/s or as the carrier Doppler they cause.
_SPEED_KEYS = ("v_re", "doppler_hz_real", "v_sp", "doppler_hz_spoof", "v_re_known", "doppler_hz_real_known")


def spec_from_mapping(values: dict, **overrides) -> ExperimentSpec:
    """Build a spec from string key-values (as read from a config file).

    ``overrides`` are already-typed values that win over the file.
    """
    values = dict(values)
    unknown = set(values) - set(_CFG_KEYS) - set(_CHANNEL_KEYS) - set(_EST_KEYS) - set(_SPEC_KEYS) - set(_SPEED_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    def take(table):
        out = {}
        for key, conv in table.items():
            if key in values:
                try:
                    out[key] = conv(values[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {values[key]!r}") from exc
        return out

    speeds = take({k: float for k in _SPEED_KEYS})
    speeds.update({k: v for k, v in overrides.items() if k in _SPEED_KEYS and v is not None})
    cfg = OfdmConfig(**take(_CFG_KEYS))
    for a, b in (("v_re", "doppler_hz_real"), ("v_sp", "doppler_hz_spoof"), ("v_re_known", "doppler_hz_real_known")):
        if a in speeds and b in speeds:
            raise ConfigError(f"give either {a} or {b}, not both")
        if b in speeds:
            speeds[a] = speed_for_doppler(speeds.pop(b), cfg.f_c)

    est_kw = take(_EST_KEYS)
    est = EstimatorConfig.for_config(cfg, **est_kw)
    channel = ChannelParams(v_re=speeds.get("v_re", 0.0), **take(_CHANNEL_KEYS))
    spoof = None
    if "v_sp" in speeds:
        spoof = SpoofParams(speeds["v_sp"], speeds.get("v_re_known"))
    kw = take(_SPEC_KEYS)
    kw.update({k: v for k, v in overrides.items() if k not in _SPEED_KEYS and v is not None})
    return ExperimentSpec(channel=channel, spoof=spoof, cfg=cfg, est=est, **kw)


def load_spec(path, **overrides) -> ExperimentSpec:
    return spec_from_mapping(read_keyvalue(Path(path).read_text()), **overrides)
