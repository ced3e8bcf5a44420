"""Tests for tap detection, the six channel features and selection statistics."""

import math

import numpy as np
import pytest

from uwauth.channel import PowerDelayProfile
from uwauth.errors import DegenerateDataError, ParameterError
from uwauth.features import (
    TAP_MIN_SEPARATION_S,
    TapSet,
    avg_path_delay,
    avg_tap_power,
    calibrate_threshold,
    coherence_time,
    detect_taps,
    extract_packet_features,
    jain_index,
    num_taps,
    rms_delay_spread,
    sample_noise_taps,
    smoothed_power,
    spatial_metric,
    symbol_power,
)


def pdp(delays, mags, t=0.0, noise=0.01):
    return PowerDelayProfile(
        symbol_time=t,
        tap_delays=np.asarray(delays, dtype=float),
        tap_magnitudes=np.asarray(mags, dtype=float),
        noise_floor=noise,
    )


THREE_TAP = pdp([0.0, 2e-3, 5e-3], [1.0, 0.5, 0.25])


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def test_detect_taps_keeps_everything_above_threshold():
    taps = detect_taps(THREE_TAP, 0.1)
    assert num_taps(taps) == 3


def test_detect_taps_filters_weak_taps():
    taps = detect_taps(THREE_TAP, 0.6)
    assert num_taps(taps) == 1
    assert taps.magnitudes[0] == 1.0


def test_detect_taps_empty_signals_none():
    assert detect_taps(THREE_TAP, 2.0) is None


def test_detect_taps_requires_positive_threshold():
    with pytest.raises(ParameterError):
        detect_taps(THREE_TAP, 0.0)


def test_detect_taps_monotone_in_threshold():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = rng.integers(1, 20)
        delays = np.cumsum(rng.uniform(1e-4, 1e-3, size=n))
        mags = rng.uniform(0.0, 1.0, size=n)
        profile = pdp(delays, mags)
        t1, t2 = sorted(rng.uniform(0.01, 0.9, size=2))
        low = detect_taps(profile, t1)
        high = detect_taps(profile, t2)
        n_low = 0 if low is None else num_taps(low)
        n_high = 0 if high is None else num_taps(high)
        assert n_high <= n_low


# ---------------------------------------------------------------------------
# Scalar features
# ---------------------------------------------------------------------------


def test_avg_tap_power_example():
    assert avg_tap_power(detect_taps(THREE_TAP, 0.1)) == pytest.approx(0.583333, abs=1e-6)


def test_avg_tap_power_single_tap_and_scaling():
    single = detect_taps(pdp([1e-3], [0.7]), 0.1)
    assert avg_tap_power(single) == pytest.approx(0.7)
    scaled = detect_taps(pdp([0.0, 2e-3, 5e-3], [3.0, 1.5, 0.75]), 0.3)
    assert avg_tap_power(scaled) == pytest.approx(3 * 0.583333, abs=1e-5)


def test_rms_delay_spread_example():
    taps = detect_taps(THREE_TAP, 0.1)
    assert rms_delay_spread(taps) == pytest.approx(math.sqrt((4e-6 + 25e-6) / 2), rel=1e-9)


def test_delay_features_two_taps():
    taps = detect_taps(pdp([0.0, 4e-3], [1.0, 1.0]), 0.1)
    assert rms_delay_spread(taps) == pytest.approx(4e-3)
    assert avg_path_delay(taps) == pytest.approx(4e-3)


def test_avg_path_delay_examples():
    taps = detect_taps(THREE_TAP, 0.1)
    assert avg_path_delay(taps) == pytest.approx(3.5e-3)
    uniform = detect_taps(pdp([0.0, 1e-3, 2e-3, 3e-3], np.ones(4)), 0.1)
    assert avg_path_delay(uniform) == pytest.approx(2e-3)


def test_delay_features_undefined_for_single_tap():
    taps = detect_taps(pdp([1e-3], [1.0]), 0.1)
    assert rms_delay_spread(taps) is None
    assert avg_path_delay(taps) is None


def test_rms_spread_dominates_avg_delay():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        n = int(rng.integers(2, 12))
        delays = np.cumsum(rng.uniform(1e-4, 5e-3, size=n))
        taps = TapSet(delays=delays, magnitudes=rng.uniform(0.1, 1.0, size=n))
        assert rms_delay_spread(taps) >= avg_path_delay(taps) - 1e-15


def test_smoothed_power_recursion():
    assert smoothed_power(4.0, None, 0.3) == 4.0
    assert smoothed_power(4.0, 2.0, 0.5) == 3.0
    assert smoothed_power(7.0, 3.0, 1.0) == 7.0
    value = 5.0
    for _ in range(20):
        value = smoothed_power(5.0, value, 0.4)
    assert value == pytest.approx(5.0)
    with pytest.raises(ParameterError):
        smoothed_power(1.0, 1.0, 1.5)


def test_scale_consistency_with_threshold():
    # Scaling magnitudes (and the threshold) leaves features 1/4/5 unchanged
    # and scales features 2/6 linearly.
    c = 3.7
    base = detect_taps(THREE_TAP, 0.1)
    scaled_pdp = pdp([0.0, 2e-3, 5e-3], c * np.array([1.0, 0.5, 0.25]))
    scaled = detect_taps(scaled_pdp, c * 0.1)
    assert num_taps(scaled) == num_taps(base)
    assert rms_delay_spread(scaled) == rms_delay_spread(base)
    assert avg_path_delay(scaled) == avg_path_delay(base)
    assert avg_tap_power(scaled) == pytest.approx(c * avg_tap_power(base))
    assert symbol_power(scaled) == pytest.approx(c * symbol_power(base))


# ---------------------------------------------------------------------------
# Coherence time
# ---------------------------------------------------------------------------


def grid_pdp(mags_by_bin, t):
    delays = np.nonzero(mags_by_bin)[0] * TAP_MIN_SEPARATION_S
    mags = np.asarray(mags_by_bin, dtype=float)[np.nonzero(mags_by_bin)[0]]
    return PowerDelayProfile(
        symbol_time=t, tap_delays=delays, tap_magnitudes=mags, noise_floor=0.0
    )


def test_coherence_identical_profiles_spans_observation():
    profiles = [grid_pdp([1.0, 0.0, 0.5, 0.25], t * 0.05) for t in range(8)]
    assert coherence_time(profiles) == pytest.approx(7 * 0.05)


def test_coherence_alternating_orthogonal_patterns():
    a = [1.0, 0.0, 1.0, 0.0]
    b = [0.0, 1.0, 0.0, 1.0]
    profiles = [grid_pdp(a if t % 2 == 0 else b, t * 0.05) for t in range(8)]
    assert coherence_time(profiles) == 0.0


def test_coherence_needs_two_profiles():
    assert coherence_time([THREE_TAP]) is None


def test_coherence_rotation_closed_form():
    # h_t = cos(w t) e1 + sin(w t) e2 with orthogonal patterns gives
    # NC(h_t, h_{t-d}) = cos(w d) exactly, crossing 0.9 at acos(0.9)/w.
    omega = 0.1
    dt = 0.05
    profiles = []
    for t in range(16):
        mags = np.zeros(8)
        mags[0] = math.cos(omega * t)
        mags[5] = math.sin(omega * t)
        profiles.append(grid_pdp(mags, t * dt))
    expected_steps = math.floor(math.acos(0.9) / omega)
    assert coherence_time(profiles) == pytest.approx(expected_steps * dt)


def test_coherence_ar1_crossing_matches_analytic():
    # Lognormal magnitudes driven by an AR(1) Gaussian with per-step
    # correlation rho have NC(d) = exp(v (rho^d - 1)) in closed form, so the
    # 0.9 crossing sits at log(1 + log(0.9)/v) / log(rho) steps.
    rho = 0.95
    vg = 0.35
    n_bins, n_t, dt = 64, 6000, 0.05
    rng = np.random.default_rng(123)
    g = rng.normal(0.0, math.sqrt(vg), size=(n_t, n_bins))
    for t in range(1, n_t):
        g[t] = rho * g[t - 1] + math.sqrt(1 - rho**2) * g[t]
    mags = np.exp(g)
    profiles = [grid_pdp(mags[t], t * dt) for t in range(n_t)]
    expected = math.log(1.0 + math.log(0.9) / vg) / math.log(rho)
    got = coherence_time(profiles) / dt
    assert abs(got - expected) <= 1.0


# ---------------------------------------------------------------------------
# Selection statistics
# ---------------------------------------------------------------------------


def test_jain_index_constant_series_is_one():
    assert jain_index(np.full(17, 3.3)) == pytest.approx(1.0)


def test_jain_index_one_hot():
    assert jain_index([1.0, 0.0, 0.0, 0.0]) == pytest.approx(0.25)


def test_jain_index_matches_formula_and_bounds():
    rng = np.random.default_rng(6)
    for _ in range(300):
        x = rng.uniform(0.01, 5.0, size=int(rng.integers(2, 40)))
        ji = jain_index(x)
        brute = float(np.sum(x)) ** 2 / (x.size * float(np.sum(x**2)))
        assert ji == pytest.approx(brute, rel=1e-12)
        assert 0.0 < ji <= 1.0
        # equality with one iff constant
        assert (ji == pytest.approx(1.0, abs=1e-12)) == bool(np.allclose(x, x[0]))


def test_jain_index_all_zero_is_undefined():
    assert jain_index(np.zeros(5)) is None
    with pytest.raises(DegenerateDataError):
        jain_index([])


def test_spatial_metric_constant_pair_vanishes():
    value = spatial_metric([np.full(10, 2.0), np.full(10, 2.0)])
    assert value == pytest.approx(0.0, abs=1e-12)


def test_spatial_metric_orthogonal_pair_vanishes():
    a = np.array([1.0, 0.0, 1.0, 0.0])
    b = np.array([0.0, 1.0, 0.0, 1.0])
    assert spatial_metric([a, b]) == pytest.approx(0.0, abs=1e-12)


def test_spatial_metric_matches_direct_formula():
    rng = np.random.default_rng(9)
    series = [rng.uniform(0.1, 2.0, size=25) for _ in range(3)]
    got = spatial_metric(series)
    total = 0.0
    pairs = 0
    for i in range(3):
        for j in range(i + 1, 3):
            xi, xj = series[i], series[j]
            corr = np.sum(xi * xj) / math.sqrt(np.sum(xi**2) * np.sum(xj**2))
            jain_i = np.sum(xi) ** 2 / (xi.size * np.sum(xi**2))
            jain_j = np.sum(xj) ** 2 / (xj.size * np.sum(xj**2))
            total += corr * (1 - jain_j) * (1 - jain_i)
            pairs += 1
    assert got == pytest.approx(total / pairs, rel=1e-12)


def test_spatial_metric_zero_energy_undefined():
    assert spatial_metric([np.zeros(5), np.ones(5)]) is None


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def test_threshold_calibration_hits_target_false_alarm_rate():
    noise_floor = 2e-4
    th = calibrate_threshold(noise_floor, pfa=1e-4, n_samples=2_000_000)
    fresh = sample_noise_taps(noise_floor, 2_000_000, np.random.default_rng(77))
    rate = float(np.mean(fresh > th))
    assert 0.5e-4 <= rate <= 1.5e-4


def test_threshold_zero_noise_floor():
    assert calibrate_threshold(0.0) == 0.0


def test_threshold_cached_and_deterministic():
    a = calibrate_threshold(3e-4, pfa=1e-4, n_samples=500_000)
    b = calibrate_threshold(3e-4, pfa=1e-4, n_samples=500_000)
    assert a == b


# ---------------------------------------------------------------------------
# Packet extraction
# ---------------------------------------------------------------------------


def test_extract_packet_features_shapes_and_smoothing_reset():
    profiles = [
        pdp([0.0, 2e-3], [1.0, 0.5], t=0.0),
        pdp([0.0, 3e-3], [0.8, 0.4], t=0.05),
        pdp([1e-3], [0.9], t=0.10),  # single tap: delay features skip it
    ]
    feats = extract_packet_features(profiles, 0.1, 0.5, feature_ids=(1, 2, 4, 5, 6))
    assert list(feats[1]) == [2.0, 2.0, 1.0]
    assert len(feats[4]) == 2 and len(feats[5]) == 2
    # feature 6 starts at the first symbol's power and smooths from there
    q = [1.5, 1.2, 0.9]
    assert feats[6][0] == pytest.approx(q[0])
    assert feats[6][1] == pytest.approx(0.5 * q[1] + 0.5 * q[0])
    assert feats[6][2] == pytest.approx(0.5 * q[2] + 0.5 * (0.5 * q[1] + 0.5 * q[0]))


def test_extract_packet_features_rejects_unknown_ids():
    with pytest.raises(ParameterError):
        extract_packet_features([THREE_TAP], 0.1, 0.5, feature_ids=(1, 9))
