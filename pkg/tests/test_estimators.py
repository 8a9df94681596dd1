import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopplerspoof.channel import ChannelParams, apply_channel
from dopplerspoof.errors import (AliasWarning, ConfigError, DegenerateGeometryError, FrameNotDetectedError,
                                 SingularInnovationError, SizeError, UndefinedPhaseError, ValidationError,
                                 ZeroPilotError)
from dopplerspoof.estimators import (EstimatorConfig, LmmseState, SubcarrierStatistics, compute_statistic,
                                     design_matrix, estimate_speed_pipeline, isolate_subcarrier, lmmse_from_first,
                                     lmmse_init, lmmse_update, matched_filter, moose_correct, run_lmmse,
                                     solve_joint_ls, subcarrier_measurements)
from dopplerspoof.ofdm_phy import C_LIGHT, BasebandSignal, build_sts, random_frame
from dopplerspoof.spoofer import SpoofParams, apply_spoof, simple_spoof

from conftest import speed

T_S = 1 / 20e6


def model_u(cfg, f_cfo, v, bins=None):
    bins = cfg.pilot_subcarriers if bins is None else bins
    return f_cfo + (cfg.f_c + cfg.subcarrier_freq(bins)) * v / C_LIGHT


def stats_for(cfg, u, bins=None):
    return SubcarrierStatistics(u, cfg.pilot_subcarriers if bins is None else bins)


def aligned(y, dsf):
    return y.with_samples(y.samples[int(dsf.group_delay):])


# --- configuration ---------------------------------------------------------------

def test_config_validation(cfg):
    est = EstimatorConfig.for_config(cfg)
    assert est.delay_d == 16 and est.pilot_bins == cfg.pilot_subcarriers
    with pytest.raises(ConfigError):
        EstimatorConfig(delay_d=0)
    with pytest.raises(ConfigError):
        EstimatorConfig.for_config(cfg, delay_d=64).validate(cfg)
    with pytest.raises(ConfigError):
        EstimatorConfig.for_config(cfg, pilot_bins=(4, 5)).validate(cfg)
    with pytest.raises(ConfigError):
        EstimatorConfig.for_config(cfg, pilot_bins=(4,)).validate(cfg)
    with pytest.raises(ConfigError):
        EstimatorConfig.for_config(cfg, sts_guard=5).validate(cfg)


def test_statistics_type():
    with pytest.raises(SizeError):
        SubcarrierStatistics([1.0, 2.0], (4,))
    with pytest.raises(ValueError):
        SubcarrierStatistics([np.nan], (4,))


# --- subcarrier isolation and matched filter ---------------------------------------

def tone(cfg, k, n=160 + 4 * 80):
    return BasebandSignal(np.exp(2j * np.pi * k * np.arange(n) / cfg.n_fft), cfg.f_s)


def test_isolate_passes_own_tone(cfg):
    x = tone(cfg, 8)
    y = isolate_subcarrier(x, 8, cfg)
    assert y.power() == pytest.approx(x.power(), rel=0.01)


@pytest.mark.parametrize("other", [4, 12])
def test_isolate_rejects_neighbour(cfg, other):
    y = isolate_subcarrier(tone(cfg, other), 8, cfg)
    assert y.power() <= 1e-4 * tone(cfg, other).power()


def test_isolate_superposition(cfg):
    two = tone(cfg, 8).samples + 0.7j * tone(cfg, -16).samples
    y = isolate_subcarrier(BasebandSignal(two, cfg.f_s), 8, cfg)
    ref = isolate_subcarrier(tone(cfg, 8), 8, cfg)
    assert np.linalg.norm(y.samples - ref.samples) <= 0.01 * np.linalg.norm(ref.samples)


def test_isolate_rejects_non_pilot(cfg):
    with pytest.raises(ConfigError):
        isolate_subcarrier(tone(cfg, 5), 5, cfg)


def test_matched_filter(cfg, rng):
    x = rng.standard_normal(64) + 1j * rng.standard_normal(64) + 3
    assert np.allclose(matched_filter(x, x), 1.0)
    assert np.allclose(matched_filter(2j * x, x), 2j)
    n = np.arange(64)
    z = matched_filter(x * np.exp(2j * np.pi * 1e5 * n * T_S), x)
    assert np.allclose(np.diff(np.unwrap(np.angle(z))), 2 * np.pi * 1e5 * T_S)
    with pytest.raises(ZeroPilotError):
        matched_filter(x, np.zeros(64))
    with pytest.raises(SizeError):
        matched_filter(x[:10], x)


# --- correlation statistic --------------------------------------------------------

def test_statistic_constant():
    assert compute_statistic(np.ones(64), 16, T_S) == 0.0


def test_statistic_closed_form():
    n = np.arange(160)
    z = np.exp(2j * np.pi * 1e5 * n * T_S)
    assert compute_statistic(z, 16, T_S) == pytest.approx(1e5, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(-600e3, 600e3), d=st.sampled_from([1, 4, 16, 32]))
def test_statistic_within_range(theta, d):
    bound = 1 / (2 * d * T_S)
    if abs(theta) >= 0.99 * bound:
        return
    z = np.exp(2j * np.pi * theta * np.arange(200) * T_S)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert compute_statistic(z, d, T_S) == pytest.approx(theta, rel=1e-9, abs=1e-6)


def test_statistic_alias_flagged():
    z = np.exp(2j * np.pi * 700e3 * np.arange(160) * T_S)
    with pytest.warns(AliasWarning):
        u = compute_statistic(z, 16, T_S)
    assert u == pytest.approx(700e3 - 1.25e6, rel=1e-9)


def test_statistic_errors():
    with pytest.raises(SizeError):
        compute_statistic(np.ones(16), 16, T_S)
    with pytest.raises(UndefinedPhaseError):
        compute_statistic(np.zeros(64), 16, T_S)


# --- joint least squares -----------------------------------------------------------

def test_ls_exact(cfg):
    r = solve_joint_ls(stats_for(cfg, model_u(cfg, 1e3, 30.0)), cfg)
    assert r.f_cfo_hat == pytest.approx(1e3, rel=1e-6)
    assert r.v_hat == pytest.approx(30.0, rel=1e-6)
    assert r.residual_norm < 1e-6


def test_ls_zero(cfg):
    r = solve_joint_ls(stats_for(cfg, np.zeros(12)), cfg)
    assert r.f_cfo_hat == 0 and r.v_hat == 0


def test_ls_matches_svd_oracle(cfg, rng):
    u = model_u(cfg, 2e3, -45.0) + 50 * rng.standard_normal(12)
    r = solve_joint_ls(stats_for(cfg, u), cfg)
    f = cfg.f_c + 20e6 * np.asarray(cfg.pilot_subcarriers) / 64
    a = np.column_stack([np.ones(12), f / C_LIGHT])
    z, *_ = np.linalg.lstsq(a, u, rcond=None)
    assert r.f_cfo_hat == pytest.approx(z[0], rel=1e-9)
    assert r.v_hat == pytest.approx(z[1], rel=1e-9)
    assert r.residual_norm == pytest.approx(np.linalg.norm(u - a @ z), rel=1e-9)
    assert np.allclose(r.covariance, r.covariance.T)
    assert np.all(np.linalg.eigvalsh(r.covariance) >= 0)


@settings(max_examples=60, deadline=None)
@given(f_cfo=st.floats(-300e3, 300e3), v=st.floats(-3e4, 3e4))
def test_ls_recovers_any_pair(cfg, f_cfo, v):
    r = solve_joint_ls(stats_for(cfg, model_u(cfg, f_cfo, v)), cfg)
    scale = abs(f_cfo) + cfg.f_c * abs(v) / C_LIGHT + 1.0
    assert abs(r.f_cfo_hat - f_cfo) < 1e-7 * scale
    assert abs(r.v_hat - v) * cfg.f_c / C_LIGHT < 1e-7 * scale


def test_ls_degenerate(cfg):
    with pytest.raises(DegenerateGeometryError):
        solve_joint_ls(SubcarrierStatistics([1.0, 1.0], (4, 4)), cfg)


# --- recursive LMMSE -----------------------------------------------------------------

def test_lmmse_init(cfg):
    s = lmmse_init([0, 0], np.diag([1e10, 1e6]))
    assert s.m == 0 and s.trace == pytest.approx(1e10 + 1e6)
    with pytest.raises(ValidationError):
        lmmse_init([0, 0], np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        lmmse_init([0, 0], [[1, 2], [0, 1]])


def test_lmmse_zero_innovation(cfg):
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    s0 = lmmse_init([1e3, 30.0], np.diag([1e6, 1e2]))
    s1 = lmmse_update(s0, a @ s0.z_hat, a, np.eye(12))
    assert np.allclose(s1.z_hat, s0.z_hat)
    assert s1.trace < s0.trace


def test_lmmse_uninformative(cfg, rng):
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    s0 = lmmse_init([1e3, 30.0], np.diag([1e6, 1e2]))
    s1 = lmmse_update(s0, rng.standard_normal(12) * 1e4, a, 1e30 * np.eye(12))
    assert np.allclose(s1.z_hat, s0.z_hat, rtol=1e-12)
    assert np.allclose(s1.c_m, s0.c_m, rtol=1e-12)


def test_lmmse_shrinkage(cfg, rng):
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    truth = np.array([1e3, 30.0])
    cov = np.diag([1.0, 1e-4])
    s = lmmse_init(truth, cov)
    for _ in range(5):
        s = lmmse_update(s, a @ truth + 100 * rng.standard_normal(12), a, 1e4 * np.eye(12))
    assert np.all(np.abs(s.z_hat - truth) < 3 * np.sqrt(np.diag(cov)))


def test_lmmse_matches_batch_posterior(cfg, rng):
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    z0, c0 = np.array([0.0, 0.0]), np.diag([1e8, 1e4])
    c_w = 400.0 * np.eye(12)
    ps = [a @ [5e3, 120.0] + 20 * rng.standard_normal(12) for _ in range(10)]
    s = lmmse_init(z0, c0)
    traces = [s.trace]
    for p in ps:
        s = lmmse_update(s, p, a, c_w)
        traces.append(s.trace)
    info = np.linalg.inv(c0) + 10 * a.T @ np.linalg.inv(c_w) @ a
    rhs = np.linalg.inv(c0) @ z0 + sum(a.T @ np.linalg.inv(c_w) @ p for p in ps)
    batch = np.linalg.solve(info, rhs)
    assert np.allclose(s.z_hat, batch, rtol=1e-6)
    assert np.allclose(s.c_m, np.linalg.inv(info), rtol=1e-6)
    assert all(t1 <= t0 for t0, t1 in zip(traces, traces[1:]))


def test_lmmse_from_first_equals_stacked_ls(cfg, rng):
    ms = [stats_for(cfg, model_u(cfg, 5e3, 120.0) + 20 * rng.standard_normal(12)) for _ in range(10)]
    states = run_lmmse(ms, cfg)
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    z, *_ = np.linalg.lstsq(np.vstack([a] * 10), np.concatenate([m.u for m in ms]), rcond=None)
    assert np.allclose(states[-1].z_hat, z, rtol=1e-6)
    assert [s.m for s in states] == list(range(1, 11))
    assert all(b.trace <= a_.trace for a_, b in zip(states, states[1:]))


def test_lmmse_from_first_noise_floor(cfg):
    state, c_w = lmmse_from_first(stats_for(cfg, model_u(cfg, 1e3, 30.0)), cfg)
    assert np.all(np.linalg.eigvalsh(c_w) > 0)
    assert state.v_hat == pytest.approx(30.0, rel=1e-6)


def test_lmmse_errors(cfg):
    a = design_matrix(cfg, cfg.pilot_subcarriers)
    s = LmmseState(np.zeros(2), np.diag([1e30, 1e30]))
    with pytest.raises(SingularInnovationError):
        lmmse_update(s, np.zeros(12), a, 1e-10 * np.eye(12))
    with pytest.raises(SizeError):
        lmmse_update(s, np.zeros(11), a, np.eye(12))
    with pytest.raises(ValidationError):
        lmmse_update(s, np.zeros(12), a, -np.eye(12))


# --- legitimate receiver offset correction ------------------------------------------------

def test_moose_pure_cfo(cfg):
    sts = build_sts(cfg)
    n = np.arange(len(sts))
    y = sts.with_samples(sts.samples * np.exp(2j * np.pi * 1e5 * n * T_S))
    corrected, off = moose_correct(y, cfg)
    assert off == pytest.approx(1e5, rel=1e-6)
    ph = np.unwrap(np.angle(corrected.samples * np.conj(sts.samples)))
    assert np.max(np.abs(np.diff(ph))) < 1e-5


def test_moose_zero_offset(cfg):
    _, off = moose_correct(build_sts(cfg), cfg)
    assert abs(off) < 1e-6


def test_moose_aggregate(cfg, dsf, rng):
    v = speed(cfg, 250e3)
    x = random_frame(cfg, 4, rng).to_signal()
    y = apply_channel(aligned(simple_spoof(x, v, cfg, dsf), dsf), ChannelParams(v_re=v, snr_db=40), cfg)
    _, off = moose_correct(y, cfg)
    assert off == pytest.approx(500e3, rel=0.01)


def test_moose_rejects_noise(cfg, rng):
    w = BasebandSignal(rng.standard_normal(400) + 1j * rng.standard_normal(400), cfg.f_s)
    with pytest.raises(FrameNotDetectedError):
        moose_correct(w, cfg)


# --- end-to-end pipeline --------------------------------------------------------------------

def test_pipeline_exact_on_clean_frame(cfg, rng):
    r = estimate_speed_pipeline(random_frame(cfg, 10, rng).to_signal(), cfg)
    assert abs(r.f_cfo_hat) < 1e-3 and abs(r.v_hat) < 1e-3


def test_pipeline_real_speed(cfg, rng):
    v = speed(cfg, 200e3)
    vs = []
    for seed in range(5):
        x = random_frame(cfg, 100, rng).to_signal()
        y = apply_channel(x, ChannelParams(v_re=v, snr_db=40, seed=seed), cfg)
        vs.append(estimate_speed_pipeline(y, cfg).v_hat)
    assert np.median(vs) == pytest.approx(v, rel=0.02)


def test_pipeline_separates_cfo(cfg, rng):
    x = random_frame(cfg, 100, rng).to_signal()
    y = apply_channel(x, ChannelParams(f_cfo=150e3, snr_db=40, seed=1), cfg)
    r = estimate_speed_pipeline(y, cfg)
    sd = np.sqrt(np.diag(r.covariance))
    # CFO lands in f_cfo_hat; v_hat stays within its own noise bound
    assert abs(r.f_cfo_hat - 150e3) < 4 * sd[0]
    assert abs(r.v_hat) < 4 * sd[1]
    assert sd[1] < 0.02 * speed(cfg, 150e3)
    assert r.f_cfo_hat + cfg.f_c * r.v_hat / C_LIGHT == pytest.approx(150e3, abs=20.0)


def test_pipeline_sts_only_noiseless(cfg, dsf, rng):
    v = speed(cfg, 300e3)
    y = aligned(simple_spoof(random_frame(cfg, 0, rng).to_signal(), v, cfg, dsf), dsf)
    assert estimate_speed_pipeline(y, cfg).v_hat == pytest.approx(v, rel=0.02)


def test_spoof_indistinguishable_from_motion(cfg, dsf, rng):
    # (v_re, dv) and (v_re + dv, 0) give the same estimate
    v_re, dv = speed(cfg, 100e3), speed(cfg, 200e3)
    x = random_frame(cfg, 100, rng).to_signal()
    spoofed = apply_channel(aligned(simple_spoof(x, dv, cfg, dsf), dsf), ChannelParams(v_re=v_re, seed=4), cfg)
    moving = apply_channel(aligned(simple_spoof(x, 0.0, cfg, dsf), dsf),
                           ChannelParams(v_re=v_re + dv, seed=4), cfg)
    a, b = estimate_speed_pipeline(spoofed, cfg), estimate_speed_pipeline(moving, cfg)
    assert a.v_hat == pytest.approx(b.v_hat, rel=0.01)
    assert a.v_hat == pytest.approx(v_re + dv, rel=0.02)


def test_known_speed_scheme(cfg, dsf, rng):
    v_re, v_sp = speed(cfg, 250e3), speed(cfg, 500e3)
    x = random_frame(cfg, 100, rng).to_signal()
    y = apply_channel(aligned(apply_spoof(x, SpoofParams(v_sp, v_re), cfg, dsf), dsf),
                      ChannelParams(v_re=v_re, snr_db=40, seed=2), cfg)
    assert estimate_speed_pipeline(y, cfg).v_hat == pytest.approx(v_sp, rel=0.02)


def test_cancellation(cfg, dsf, rng):
    v_re = speed(cfg, 200e3)
    x = random_frame(cfg, 100, rng).to_signal()
    y = apply_channel(aligned(simple_spoof(x, -v_re, cfg, dsf), dsf), ChannelParams(v_re=v_re, seed=3), cfg)
    assert abs(estimate_speed_pipeline(y, cfg).v_hat) < 0.02 * v_re


def test_per_block_measurements(cfg, rng):
    y = random_frame(cfg, 5, rng).to_signal()
    ms = subcarrier_measurements(y, cfg, per_block=True)
    # 6 interior preamble blocks give 5 pairs, 5 payload symbols give 4
    assert len(ms) == 9
    assert len(subcarrier_measurements(y, cfg)) == 5
    assert math.isclose(np.max(np.abs([m.u for m in ms])), 0.0, abs_tol=1e-6)
