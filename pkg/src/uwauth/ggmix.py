"""Generalized-Gaussian primitives and a two-component, packet-grouped EM estimator.

The density handled throughout is the three-parameter generalized Gaussian

    p(x | mu, sigma, beta) = beta / (2 sigma Gamma(1/beta)) * exp(-(|x - mu| / sigma)**beta)

with location ``mu``, scale ``sigma`` (not the standard deviation) and shape
``beta``; beta=1 is Laplace, beta=2 Gaussian, beta -> inf approaches uniform.

The mixture estimator groups samples by packet: every sample of one packet is
constrained to carry the same latent component label, so E-step posteriors are
per packet and M-step responsibilities weight whole packets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .errors import ComponentCollapseError, DegenerateDataError, ParameterError

# Shape bounds keep Gamma(1/beta) representable and the M-step roots
# well-conditioned; Laplace, Gaussian and the near-uniform regime lie inside.
BETA_MIN = 0.3
BETA_MAX = 10.0

_LOG2 = math.log(2.0)


def _digamma(x: float) -> float:
    """Scalar digamma via upward recurrence plus the asymptotic series."""
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    return acc + (
        math.log(x)
        - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0))
    )


def _trigamma(x: float) -> float:
    """Scalar trigamma via upward recurrence plus the asymptotic series."""
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    return acc + inv * (
        1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0))
    )


@dataclass(frozen=True)
class GGParams:
    """Location/scale/shape triple of one generalized-Gaussian density.

    ``sigma`` is the GG scale parameter; the variance of the distribution is
    ``sigma**2 * Gamma(3/beta) / Gamma(1/beta)``.
    """

    mu: float
    sigma: float
    beta: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ParameterError(f"mu must be finite, got {self.mu}")
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ParameterError(f"sigma must be positive and finite, got {self.sigma}")
        if not (BETA_MIN <= self.beta <= BETA_MAX):
            raise ParameterError(
                f"beta must lie in [{BETA_MIN}, {BETA_MAX}], got {self.beta}"
            )

    @property
    def variance(self) -> float:
        return self.sigma**2 * math.exp(
            special.gammaln(3.0 / self.beta) - special.gammaln(1.0 / self.beta)
        )

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class HypothesisParams:
    """One mixture component: a GG density plus its mixture prior."""

    omega: GGParams
    k: float

    def __post_init__(self):
        if not (0.0 <= self.k <= 1.0):
            raise ParameterError(f"mixture prior must lie in [0, 1], got {self.k}")


@dataclass(frozen=True)
class PacketSamples:
    """Feature samples extracted from one packet, keyed by its packet id."""

    packet_id: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise DegenerateDataError(
                f"packet {self.packet_id}: values must be a non-empty 1-d array"
            )
        if not np.all(np.isfinite(values)):
            raise ParameterError(f"packet {self.packet_id}: non-finite sample")
        if self.packet_id < 0:
            raise ParameterError(f"packet id must be non-negative, got {self.packet_id}")
        object.__setattr__(self, "values", values)


@dataclass
class EMConfig:
    """Stopping and guard knobs for :func:`em_fit`."""

    tol: float = 1e-6
    max_iters: int = 100
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX
    # A component collapses when its total packet-responsibility mass falls
    # below mass_floor_per_packet * (number of packets).
    mass_floor_per_packet: float = 1e-3
    # Samples within this many scales of mu contribute zero to the mu root
    # function (removable |x-mu|**(beta-2) singularity for beta < 1).
    mu_singularity_guard: float = 1e-12
    # Rounds of the location/scale-shape cycle per M-step. The scale-shape
    # block is maximized jointly, so one round per M-step is already exact up
    # to the weak location coupling.
    coordinate_rounds: int = 1


@dataclass
class MixtureEstimate:
    """Result of one EM fit.

    ``posteriors`` maps packet id to the posterior probability of component 0;
    the component-1 posterior is its complement by construction.
    """

    components: tuple[HypothesisParams, HypothesisParams]
    posteriors: dict[int, float]
    log_likelihood_trace: list[float]
    iterations: int
    converged: bool = True


# ---------------------------------------------------------------------------
# Density evaluation and sampling
# ---------------------------------------------------------------------------


def _log_density(x: np.ndarray, mu: float, sigma: float, beta: float) -> np.ndarray:
    """Unvalidated vectorized log density; callers guarantee valid parameters."""
    z = np.abs(np.asarray(x, dtype=float) - mu) / sigma
    return (
        math.log(beta)
        - _LOG2
        - math.log(sigma)
        - special.gammaln(1.0 / beta)
        - z**beta
    )


def gg_log_pdf(x, omega: GGParams):
    """Log of the GG density, stable for |x - mu|/sigma up to ~1e3.

    Accepts a scalar or an array of evaluation points.
    """
    out = _log_density(x, omega.mu, omega.sigma, omega.beta)
    return float(out) if np.isscalar(x) else out


def gg_pdf(x, omega: GGParams):
    """GG density at ``x``; scalar in, scalar out."""
    out = np.exp(_log_density(x, omega.mu, omega.sigma, omega.beta))
    return float(out) if np.isscalar(x) else out


def gg_sample(omega: GGParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` variates via the gamma transform.

    If G ~ Gamma(1/beta, 1) and s is a fair sign, then mu + sigma * s * G**(1/beta)
    has the GG(mu, sigma, beta) law.
    """
    g = rng.gamma(1.0 / omega.beta, 1.0, size=size)
    signs = rng.integers(0, 2, size=size) * 2 - 1
    return omega.mu + omega.sigma * signs * g ** (1.0 / omega.beta)


# ---------------------------------------------------------------------------
# Moment-matching initialization
# ---------------------------------------------------------------------------


def excess_kurtosis_of_beta(beta: float) -> float:
    """Excess kurtosis of a GG with the given shape; strictly decreasing in beta."""
    return (
        math.exp(
            special.gammaln(5.0 / beta)
            + special.gammaln(1.0 / beta)
            - 2.0 * special.gammaln(3.0 / beta)
        )
        - 3.0
    )


def beta_from_excess_kurtosis(g2: float) -> float:
    """Invert the kurtosis relation, clamping to [BETA_MIN, BETA_MAX]."""
    if g2 >= excess_kurtosis_of_beta(BETA_MIN):
        return BETA_MIN
    if g2 <= excess_kurtosis_of_beta(BETA_MAX):
        return BETA_MAX
    return float(
        optimize.brentq(
            lambda b: excess_kurtosis_of_beta(b) - g2,
            BETA_MIN,
            BETA_MAX,
            xtol=1e-12,
            rtol=8.9e-16,
        )
    )


def moment_init(samples) -> GGParams:
    """Moment-match a single GG component to raw samples.

    The mean gives mu, the shape solves the excess-kurtosis relation, and the
    scale follows from the variance identity.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 8:
        raise DegenerateDataError(f"moment_init needs >= 8 samples, got {x.size}")
    mu = float(np.mean(x))
    centered = x - mu
    var = float(np.mean(centered**2))
    if var <= 0.0:
        raise DegenerateDataError("moment_init: sample variance is zero")
    g2 = float(np.mean(centered**4)) / var**2 - 3.0
    beta = beta_from_excess_kurtosis(g2)
    sigma = math.sqrt(var) * math.exp(
        0.5 * (special.gammaln(1.0 / beta) - special.gammaln(3.0 / beta))
    )
    return GGParams(mu=mu, sigma=sigma, beta=beta)


# ---------------------------------------------------------------------------
# 1-d two-cluster split
# ---------------------------------------------------------------------------


def kmeans_two(samples, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Split 1-d samples into the two clusters minimizing within-cluster SS.

    In one dimension the optimal two-means partition is a threshold on the
    sorted values, found exactly by a prefix-sum scan, so the result is
    deterministic for any seed. Returns two index arrays into ``samples``;
    the cluster with the smaller centroid comes first.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 2 or np.all(x == x[0]):
        raise DegenerateDataError("kmeans_two needs at least two distinct values")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = xs.size
    csum = np.cumsum(xs)
    csq = np.cumsum(xs**2)
    splits = np.arange(1, n)  # left cluster = xs[:k]
    left_n = splits.astype(float)
    right_n = n - left_n
    left_ss = csq[splits - 1] - csum[splits - 1] ** 2 / left_n
    right_sum = csum[-1] - csum[splits - 1]
    right_ss = (csq[-1] - csq[splits - 1]) - right_sum**2 / right_n
    k = int(splits[np.argmin(left_ss + right_ss)])
    return order[:k].copy(), order[k:].copy()


def kmeans_moment_init(
    samples, seed=None
) -> tuple[HypothesisParams, HypothesisParams]:
    """Two-component init: k-means split, per-cluster moment matching, priors
    from cluster fractions.

    Clusters too small or too flat for moment matching fall back to a Gaussian
    shape with a floored scale so EM always has a valid starting point.
    """
    x = np.asarray(samples, dtype=float)
    idx0, idx1 = kmeans_two(x, seed=seed)
    spread = float(np.max(x) - np.min(x))
    components = []
    for idx in (idx0, idx1):
        cluster = x[idx]
        try:
            omega = moment_init(cluster)
        except DegenerateDataError:
            mu = float(np.mean(cluster))
            std = float(np.std(cluster))
            sigma = max(std, 1e-3 * spread, 1e-12) * math.sqrt(2.0)
            omega = GGParams(mu=mu, sigma=sigma, beta=2.0)
        components.append(omega)
    frac0 = float(np.clip(idx0.size / x.size, 1e-3, 1.0 - 1e-3))
    return (
        HypothesisParams(omega=components[0], k=frac0),
        HypothesisParams(omega=components[1], k=1.0 - frac0),
    )


# ---------------------------------------------------------------------------
# Packet-grouped EM
# ---------------------------------------------------------------------------


def _packet_log_liks(
    concat: np.ndarray, boundaries: np.ndarray, mu: float, sigma: float, beta: float
) -> np.ndarray:
    """Per-packet sums of the log density over concatenated samples."""
    return np.add.reduceat(_log_density(concat, mu, sigma, beta), boundaries)


def _e_step(concat, boundaries, thetas, log_k):
    """Packet posteriors for component 0, the grouped log-likelihood, and the
    per-component per-packet log-likelihood terms."""
    ll = np.stack(
        [_packet_log_liks(concat, boundaries, *thetas[m]) for m in (0, 1)]
    )
    a = ll + np.array([[log_k[0]], [log_k[1]]])
    top = np.max(a, axis=0)
    lse = top + np.log(np.exp(a[0] - top) + np.exp(a[1] - top))
    gamma0 = np.exp(a[0] - lse)
    return gamma0, float(np.sum(lse)), ll


def _weighted_q(w, absdev, sigma, beta, wsum=None):
    """Expected complete log-likelihood terms that depend on one component."""
    if wsum is None:
        wsum = float(np.sum(w))
    return (
        wsum * (math.log(beta) - math.log(sigma) - special.gammaln(1.0 / beta))
        - float(np.dot(w, (absdev / sigma) ** beta))
    )


def _solve_mu(concat, w, mu_old, sigma_old, beta_old, guard, wsum=None):
    """Stationary point of the weighted location equation for fixed shape.

    Root of sum_x w * sign(x - mu) * |x - mu|**(beta - 1), bracketed by the
    weighted sample range and found by bracket-safeguarded Newton steps.
    For beta < 1 the objective may be multimodal, so the root is only
    accepted when it does not lower the objective.
    """
    if wsum is None:
        wsum = float(np.sum(w))
    if beta_old == 2.0:
        return float(np.dot(w, concat)) / wsum

    active = w > 1e-12 * np.max(w)
    lo = float(np.min(concat[active]))
    hi = float(np.max(concat[active]))
    if hi <= lo:
        return lo

    cutoff = guard * sigma_old
    masked = beta_old < 1.0

    def h_and_slope(mu):
        d = concat - mu
        a = np.abs(d)
        if masked:
            keep = a > cutoff
            d, a, wk = d[keep], a[keep], w[keep]
        else:
            wk = w
        # a**(beta-1) carrying the sign of d, via one power evaluation
        pw = a ** (beta_old - 2.0)
        wpw = wk * pw
        val = float(np.dot(wpw, d))
        slope = -(beta_old - 1.0) * float(np.sum(wpw))
        return val, slope

    # Newton from the previous location (or the weighted mean when that sits
    # outside the bracket), kept inside the shrinking bracket.
    mu = mu_old if lo < mu_old < hi else float(np.dot(w, concat)) / wsum
    mu = min(max(mu, lo), hi)
    blo, bhi = lo, hi
    tol = 1e-9 * (1.0 + (hi - lo))
    for _ in range(60):
        val, slope = h_and_slope(mu)
        if val > 0.0:
            blo = mu
        elif val < 0.0:
            bhi = mu
        else:
            break
        step = val / slope if slope < 0.0 else None
        nxt = mu - step if step is not None else 0.5 * (blo + bhi)
        if not blo < nxt < bhi:
            nxt = 0.5 * (blo + bhi)
        if abs(nxt - mu) <= tol:
            mu = nxt
            break
        mu = nxt
    mu_new = mu
    if beta_old >= 1.0:
        return mu_new
    # Non-concave regime: keep whichever location is better.
    q_new = -float(np.sum(w * np.abs(concat - mu_new) ** beta_old))
    q_old = -float(np.sum(w * np.abs(concat - mu_old) ** beta_old))
    return mu_new if q_new >= q_old else mu_old


def _solve_sigma(absdev, w, beta_old, sigma_bounds):
    """Exact maximizer of the scale given location and shape.

    Returns the scale plus a flag telling whether the bounds clamped it (only
    then can the update fail to improve the objective).
    """
    wsum = float(np.sum(w))
    mean_pow = float(np.dot(w, absdev**beta_old)) / wsum
    if mean_pow <= 0.0:
        return sigma_bounds[0], True
    sigma = (beta_old * mean_pow) ** (1.0 / beta_old)
    clamped = not sigma_bounds[0] < sigma < sigma_bounds[1]
    return float(np.clip(sigma, *sigma_bounds)), clamped


def _solve_scale_shape(
    absdev, w, sigma_old, beta_old, sigma_bounds, cfg: EMConfig, wsum=None, q_ref=None
):
    """Joint maximizer of the scale/shape block at a fixed location.

    Substituting the closed-form scale into the objective reduces the block to
    a one-dimensional profile problem in the shape, solved by bracketed Newton
    on the profile score

        g(b) = 1/b + (log(b m0 / W) + digamma(1/b)) / b**2 - m1 / (b m0)

    with m_k = sum_i w_i |x_i - mu|**b log^k|x_i - mu| and W the total weight.
    At the solution both the scale and the shape stationarity conditions hold
    simultaneously; the update is kept only if it does not drop the objective
    below ``q_ref`` (the pre-update value; shape bounds or a multimodal
    profile can otherwise cause a downhill step).
    """
    if wsum is None:
        wsum = float(np.sum(w))
    pos = absdev > 0.0
    wp = w[pos]
    if wp.size == 0 or float(np.sum(wp)) <= 0.0:
        return sigma_bounds[0], beta_old
    la = np.log(absdev[pos])
    wla = wp * la
    wla2 = wla * la

    def moments(beta):
        e = np.exp(beta * la)
        return float(np.dot(wp, e)), float(np.dot(wla, e)), float(np.dot(wla2, e))

    def profile_g(beta):
        m0, m1, m2 = moments(beta)
        if m0 <= 0.0:
            return math.inf, math.inf
        inv = 1.0 / beta
        core = math.log(beta * m0 / wsum) + _digamma(inv)
        g = inv + core * inv * inv - m1 / (beta * m0)
        dcore = inv + m1 / m0 - _trigamma(inv) * inv * inv
        dg = (
            -inv * inv
            - 2.0 * core * inv**3
            + dcore * inv * inv
            - m2 / (beta * m0)
            + m1 * inv * inv / m0
            + m1 * m1 / (beta * m0 * m0)
        )
        return g, dg

    g_lo, _ = profile_g(cfg.beta_min)
    g_hi, _ = profile_g(cfg.beta_max)
    if g_lo <= 0.0 and g_hi <= 0.0:
        beta = cfg.beta_min
    elif g_lo >= 0.0 and g_hi >= 0.0:
        beta = cfg.beta_max
    else:
        blo, bhi = cfg.beta_min, cfg.beta_max
        beta = min(max(beta_old, blo), bhi)
        for _ in range(60):
            val, slope = profile_g(beta)
            if val > 0.0:
                blo = beta
            elif val < 0.0:
                bhi = beta
            else:
                break
            nxt = beta - val / slope if slope < 0.0 else 0.5 * (blo + bhi)
            if not blo < nxt < bhi:
                nxt = 0.5 * (blo + bhi)
            if abs(nxt - beta) <= 1e-7:
                beta = nxt
                break
            beta = nxt
    m0, _, _ = moments(beta)
    sigma_free = (beta * m0 / wsum) ** (1.0 / beta)
    sigma = float(np.clip(sigma_free, *sigma_bounds))
    # Guard against bound clamping and profile multimodality. The objective at
    # the unclamped profile optimum is available in closed form; only the
    # clamped case needs an explicit evaluation.
    if sigma == sigma_free:
        q_new = (
            wsum * (math.log(beta) - math.log(sigma) - special.gammaln(1.0 / beta))
            - wsum / beta
        )
    else:
        q_new = _weighted_q(w, absdev, sigma, beta, wsum)
    if q_ref is None:
        q_ref = _weighted_q(
            w,
            absdev,
            min(max(sigma_old, sigma_bounds[0]), sigma_bounds[1]),
            beta_old,
            wsum,
        )
    if q_new < q_ref:
        return min(max(sigma_old, sigma_bounds[0]), sigma_bounds[1]), beta_old
    return sigma, beta


def em_fit(
    history,
    init: tuple[HypothesisParams, HypothesisParams],
    config: EMConfig | None = None,
) -> MixtureEstimate:
    """Fit the two-component packet-grouped GG mixture by EM.

    Parameters
    ----------
    history : sequence of PacketSamples
        Ordered packet history with strictly increasing packet ids.
    init : pair of HypothesisParams
        Starting components; their priors must sum to one.
    config : EMConfig, optional

    The E-step computes per-packet posteriors in the log domain (the product
    over a packet's samples keeps all of its samples on one component); the
    M-step updates each component's prior, then location, scale and shape in
    that order, each update guarded so the expected complete log-likelihood
    never decreases. Iteration stops on a relative log-likelihood change
    below ``config.tol`` or at ``config.max_iters``.

    Raises
    ------
    ComponentCollapseError
        When a component's responsibility mass drops below the floor; callers
        typically restart from a fresh k-means init.
    """
    cfg = config or EMConfig()
    packets = list(history)
    if not packets:
        raise DegenerateDataError("em_fit: empty history")
    ids = [p.packet_id for p in packets]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ParameterError("em_fit: packet ids must be strictly increasing")
    if abs(init[0].k + init[1].k - 1.0) > 1e-9:
        raise ParameterError("em_fit: init priors must sum to 1")

    concat = np.concatenate([p.values for p in packets])
    counts = np.array([p.values.size for p in packets])
    boundaries = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n_packets = len(packets)
    spread = float(np.max(concat) - np.min(concat))
    if spread <= 0.0:
        raise DegenerateDataError("em_fit: all samples identical")
    sigma_bounds = (1e-6 * spread, 10.0 * spread)
    mass_floor = cfg.mass_floor_per_packet * n_packets

    thetas = [
        (init[m].omega.mu, init[m].omega.sigma, init[m].omega.beta) for m in (0, 1)
    ]
    k = [init[0].k, init[1].k]

    def log_priors():
        return [math.log(k[m]) if k[m] > 0.0 else -math.inf for m in (0, 1)]

    trace: list[float] = []
    gamma0 = None
    converged = False
    iterations = 0
    for _ in range(cfg.max_iters):
        gamma0, ll, packet_lls = _e_step(concat, boundaries, thetas, log_priors())
        trace.append(ll)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) <= cfg.tol * (
            1.0 + abs(trace[-1])
        ):
            converged = True
            break

        iterations += 1
        gammas = (gamma0, 1.0 - gamma0)
        masses = [float(np.sum(g)) for g in gammas]
        for m in (0, 1):
            if masses[m] < mass_floor:
                raise ComponentCollapseError(m, masses[m], mass_floor)
        k = [masses[m] / n_packets for m in (0, 1)]
        for m in (0, 1):
            w = np.repeat(gammas[m], counts)
            wsum = float(np.dot(gammas[m], counts))
            # Pre-update objective of this component under the new weights,
            # in the convention of _weighted_q (which drops the log 2 term).
            q_ref = float(np.dot(gammas[m], packet_lls[m])) + wsum * _LOG2
            mu, sigma, beta = thetas[m]
            for _round in range(max(1, cfg.coordinate_rounds)):
                mu_prev, beta_prev = mu, beta
                mu = _solve_mu(
                    concat, w, mu, sigma, beta, cfg.mu_singularity_guard, wsum
                )
                absdev = np.abs(concat - mu)
                sigma, beta = _solve_scale_shape(
                    absdev, w, sigma, beta, sigma_bounds, cfg, wsum,
                    q_ref if _round == 0 else None,
                )
                if (
                    abs(mu - mu_prev) <= 1e-7 * (sigma + abs(mu_prev))
                    and abs(beta - beta_prev) <= 1e-7 * beta_prev
                ):
                    break
            thetas[m] = (mu, sigma, beta)

    if not converged:
        gamma0, ll, _ = _e_step(concat, boundaries, thetas, log_priors())
        trace.append(ll)

    components = tuple(
        HypothesisParams(omega=GGParams(*thetas[m]), k=float(np.clip(k[m], 0.0, 1.0)))
        for m in (0, 1)
    )
    posteriors = {p.packet_id: float(g) for p, g in zip(packets, gamma0)}
    return MixtureEstimate(
        components=components,
        posteriors=posteriors,
        log_likelihood_trace=trace,
        iterations=iterations,
        converged=converged,
    )


def packet_posterior(
    packet: PacketSamples, components: tuple[HypothesisParams, HypothesisParams]
) -> float:
    """Posterior probability that ``packet`` belongs to component 0.

    Computed in the log domain; the two posteriors sum to one exactly.
    """
    a = []
    for comp in components:
        ll = float(np.sum(_log_density(packet.values, comp.omega.mu, comp.omega.sigma, comp.omega.beta)))
        a.append((math.log(comp.k) if comp.k > 0.0 else -math.inf) + ll)
    top = max(a)
    if not math.isfinite(top):
        raise ParameterError("packet_posterior: both priors are zero")
    lse = top + math.log(math.exp(a[0] - top) + math.exp(a[1] - top))
    return math.exp(a[0] - lse)
