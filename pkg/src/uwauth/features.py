"""Tap detection and channel-feature extraction from power-delay profiles.

Feature ids used throughout the package:

    1  number of detected taps
    2  average tap magnitude
    3  coherence time (per packet, seconds)
    4  relative RMS delay spread (seconds)
    5  average path delay relative to the first tap (seconds)
    6  smoothed received power (aggregate detected tap magnitude, recursively
       smoothed with a user weight alpha)

Features 4 and 5 need at least two taps and feature 3 at least two profiles;
extraction signals those undefined cases by returning ``None`` so callers can
skip the symbol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, ParameterError

# Delay resolution of a 10 kHz system: no two arrivals closer than 100 us.
TAP_MIN_SEPARATION_S = 1e-4

DEFAULT_FEATURE_SET = (1, 4, 6)
ALL_FEATURE_IDS = (1, 2, 3, 4, 5, 6)
PROXIMITY_FEATURE_ID = 6


@dataclass(frozen=True)
class TapSet:
    """Detected taps of one profile: parallel delay/magnitude arrays."""

    delays: np.ndarray
    magnitudes: np.ndarray

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=float)
        mags = np.asarray(self.magnitudes, dtype=float)
        if delays.size == 0 or delays.shape != mags.shape:
            raise DegenerateDataError("TapSet needs matching non-empty arrays")
        if np.any(np.diff(delays) <= 0):
            raise ParameterError("tap delays must be strictly increasing")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "magnitudes", mags)

    @property
    def tau0(self) -> float:
        return float(self.delays[0])

    def __len__(self) -> int:
        return int(self.delays.size)

    @classmethod
    def _trusted_build(cls, delays, magnitudes):
        """Validation-free constructor for masked subsets of already-validated
        profiles (order and non-emptiness hold by construction)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "delays", delays)
        object.__setattr__(obj, "magnitudes", magnitudes)
        return obj


@dataclass(frozen=True)
class FeatureSeries:
    """Time-indexed samples of one feature at one node, grouped by packet."""

    feature_id: int
    node_id: int
    samples: list  # of (packet_id, time, value)


def detect_taps(pdp, threshold: float) -> TapSet | None:
    """Keep taps whose magnitude strictly exceeds ``threshold``.

    Returns ``None`` when nothing exceeds the threshold (the caller skips the
    symbol).
    """
    if not threshold > 0.0:
        raise ParameterError(f"detection threshold must be positive, got {threshold}")
    mask = pdp.tap_magnitudes > threshold
    if not mask.all():
        if not mask.any():
            return None
        return TapSet._trusted_build(pdp.tap_delays[mask], pdp.tap_magnitudes[mask])
    return TapSet._trusted_build(pdp.tap_delays, pdp.tap_magnitudes)


def num_taps(taps: TapSet) -> int:
    return len(taps)


def avg_tap_power(taps: TapSet) -> float:
    return float(np.mean(taps.magnitudes))


def rms_delay_spread(taps: TapSet) -> float | None:
    """sqrt of the mean squared delay relative to the first tap; None if < 2 taps."""
    if len(taps) < 2:
        return None
    rel = taps.delays[1:] - taps.tau0
    return float(np.sqrt(np.mean(rel**2)))


def avg_path_delay(taps: TapSet) -> float | None:
    """Mean delay relative to the first tap; None if < 2 taps."""
    if len(taps) < 2:
        return None
    return float(np.mean(taps.delays[1:] - taps.tau0))


def smoothed_power(q_current: float, previous: float | None, alpha: float) -> float:
    """One step of the recursive power smoother; the first measurement passes
    through unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if previous is None:
        return float(q_current)
    return float(alpha * q_current + (1.0 - alpha) * previous)


def symbol_power(taps: TapSet) -> float:
    """Aggregate detected tap magnitude of one symbol (linear power proxy)."""
    return float(np.sum(taps.magnitudes))


# ---------------------------------------------------------------------------
# Coherence time
# ---------------------------------------------------------------------------


def _grid_vectors(profiles, grid_step: float) -> np.ndarray:
    """Bin each profile's taps onto a common delay grid; rows are profiles."""
    binned = []
    max_bin = 0
    for pdp in profiles:
        idx = np.round(pdp.tap_delays / grid_step).astype(int)
        binned.append((idx, pdp.tap_magnitudes))
        if idx.size:
            max_bin = max(max_bin, int(idx[-1]))
    out = np.zeros((len(profiles), max_bin + 1))
    for row, (idx, mags) in enumerate(binned):
        np.add.at(out[row], idx, mags)
    return out


def coherence_time(
    profiles,
    corr_threshold: float = 0.9,
    grid_step: float = TAP_MIN_SEPARATION_S,
) -> float | None:
    """Largest lag (seconds) up to which profiles stay correlated.

    Profiles must sit on a uniform time grid; each is zero-padded onto a
    common 100 us delay grid and compared by cosine similarity, averaged over
    all valid time pairs at each lag. The result is the largest lag such that
    every lag up to it keeps the average similarity above the threshold
    (0.0 when even the first lag fails, None for fewer than two profiles).
    """
    profiles = list(profiles)
    if len(profiles) < 2:
        return None
    times = np.array([p.symbol_time for p in profiles])
    steps = np.diff(times)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-12):
        raise ParameterError("coherence_time requires a uniform time grid")
    dt = float(steps[0])

    vecs = _grid_vectors(profiles, grid_step)
    norms = np.linalg.norm(vecs, axis=1)
    n = len(profiles)
    best = 0.0
    for lag in range(1, n):
        a = vecs[lag:]
        b = vecs[:-lag]
        denom = norms[lag:] * norms[:-lag]
        valid = denom > 0.0
        if not np.any(valid):
            break
        sims = np.sum(a[valid] * b[valid], axis=1) / denom[valid]
        if float(np.mean(sims)) <= corr_threshold:
            break
        best = lag * dt
    return best


# ---------------------------------------------------------------------------
# Feature-selection statistics
# ---------------------------------------------------------------------------


def jain_index(series) -> float | None:
    """Jain's fairness index (sum x)^2 / (T * sum x^2); None for an all-zero series."""
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise DegenerateDataError("jain_index: empty series")
    s2 = float(np.sum(x**2))
    if s2 == 0.0:
        return None
    return float(np.sum(x)) ** 2 / (x.size * s2)


def spatial_metric(series_list) -> float | None:
    """Spatial-dependency score over all unordered receiver pairs.

    For each pair, the normalized correlation of the two series is damped by
    (1 - Jain) of each series; small values mark features that vary across
    receivers while staying stable over time. Returns None when any series
    has zero energy.
    """
    series = [np.asarray(s, dtype=float) for s in series_list]
    if len(series) < 2:
        raise DegenerateDataError("spatial_metric needs at least two receivers")
    length = series[0].size
    if length < 2 or any(s.size != length for s in series):
        raise ParameterError("spatial_metric: series must share one length >= 2")
    total = 0.0
    pairs = 0
    for i in range(len(series)):
        for j in range(i + 1, len(series)):
            xi, xj = series[i], series[j]
            denom = math.sqrt(float(np.sum(xi**2)) * float(np.sum(xj**2)))
            if denom == 0.0:
                return None
            ji, jj = jain_index(xi), jain_index(xj)
            if ji is None or jj is None:
                return None
            corr = float(np.sum(xi * xj)) / denom
            total += corr * (1.0 - jj) * (1.0 - ji)
            pairs += 1
    return total / pairs


# ---------------------------------------------------------------------------
# Detection-threshold calibration
# ---------------------------------------------------------------------------

_CALIBRATION_SEED = 0x5EED_CA11
_threshold_cache: dict[tuple[float, float, int], float] = {}


def calibrate_threshold(
    noise_floor: float,
    pfa: float = 1e-4,
    n_samples: int = 10_000_000,
) -> float:
    """Detection threshold hitting the target false-alarm rate on noise taps.

    Noise tap magnitudes are modeled as Rayleigh with the given scale (envelope
    of complex Gaussian noise at the matched-filter output); the threshold is
    the empirical (1 - pfa) quantile of a large seeded draw, cached per
    (noise_floor, pfa, n_samples) so repeated scenarios reuse it.
    """
    if noise_floor < 0.0:
        raise ParameterError(f"noise floor must be >= 0, got {noise_floor}")
    if noise_floor == 0.0:
        return 0.0
    key = (float(noise_floor), float(pfa), int(n_samples))
    cached = _threshold_cache.get(key)
    if cached is not None:
        return cached
    rng = np.random.default_rng(_CALIBRATION_SEED)
    draws = rng.rayleigh(scale=noise_floor, size=n_samples)
    th = float(np.quantile(draws, 1.0 - pfa))
    _threshold_cache[key] = th
    return th


def sample_noise_taps(
    noise_floor: float, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Fresh noise-only tap magnitudes under the calibration model."""
    return rng.rayleigh(scale=noise_floor, size=n_samples)


# ---------------------------------------------------------------------------
# Per-packet extraction pipeline
# ---------------------------------------------------------------------------


def extract_packet_features(
    profiles,
    threshold: float,
    alpha: float,
    feature_ids=DEFAULT_FEATURE_SET,
) -> dict[int, np.ndarray]:
    """Extract the requested features from one packet's per-symbol profiles.

    The feature-6 smoothing state starts fresh at the first symbol of the
    packet. Symbols where a feature is undefined (no taps detected, single
    tap for the delay features) contribute no sample for that feature.
    """
    wanted = set(feature_ids)
    unknown = wanted.difference(ALL_FEATURE_IDS)
    if unknown:
        raise ParameterError(f"unknown feature ids: {sorted(unknown)}")
    out: dict[int, list[float]] = {i: [] for i in wanted}
    smoothed = None
    for pdp in profiles:
        taps = detect_taps(pdp, threshold) if threshold > 0.0 else detect_taps(pdp, 1e-300)
        if taps is None:
            continue
        if 1 in wanted:
            out[1].append(float(num_taps(taps)))
        if 2 in wanted:
            out[2].append(avg_tap_power(taps))
        if 4 in wanted:
            v = rms_delay_spread(taps)
            if v is not None:
                out[4].append(v)
        if 5 in wanted:
            v = avg_path_delay(taps)
            if v is not None:
                out[5].append(v)
        if 6 in wanted:
            smoothed = smoothed_power(symbol_power(taps), smoothed, alpha)
            out[6].append(smoothed)
    if 3 in wanted:
        v = coherence_time(profiles)
        if v is not None:
            out[3].append(v)
    return {i: np.asarray(vals, dtype=float) for i, vals in out.items()}
