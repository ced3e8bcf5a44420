"""Information-theoretic bounds, ROC construction and threshold selection.

KL divergences between generalized-Gaussian feature laws drive two things:
the false-alarm/missed-detection feasibility bound obtained from the data
processing inequality, and Chernoff-Stein style error exponents for the
hypothesis-association and sign-correction steps of the fusion protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .errors import DegenerateDataError, NumericsError, ParameterError
from .ggmix import GGParams, _log_density

AUTHENTIC = "legitimate"
ATTACK = "attacker"


@dataclass(frozen=True)
class RocCurve:
    """Empirical operating points, sorted by threshold.

    Conventions follow the decide rule "authentic iff psi >= lambda":
    ``p_fa`` is the fraction of authentic packets flagged fake and ``p_tp``
    the fraction of attack packets flagged fake, so both grow with lambda,
    from (0, 0) at -inf to (1, 1) at +inf.
    """

    lambdas: np.ndarray
    p_fa: np.ndarray
    p_tp: np.ndarray


@dataclass(frozen=True)
class BoundCurve:
    """Maximal feasible true-positive rate per false-alarm rate at a given KL."""

    kl: float
    p_fa: np.ndarray
    p_tp: np.ndarray


# ---------------------------------------------------------------------------
# KL divergences
# ---------------------------------------------------------------------------


def _gg_tail_halfwidth(omega: GGParams, tail_mass: float) -> float:
    """Half-width around mu containing all but ``tail_mass`` of the density."""
    z = special.gammainccinv(1.0 / omega.beta, tail_mass) ** (1.0 / omega.beta)
    return float(omega.sigma * z)


def kl_gg_numeric(omega0: GGParams, omega1: GGParams) -> float:
    """KL divergence D(p0 || p1) between two GG laws by adaptive quadrature.

    The integrand is split at both means (the density kinks there for shapes
    below one) and integrated over a finite core covering all but ~1e-12 of
    p0's mass plus the two analytic tails.
    """
    def integrand(x):
        with np.errstate(over="ignore", invalid="ignore"):
            lp0 = _log_density(x, omega0.mu, omega0.sigma, omega0.beta)
            lp1 = _log_density(x, omega1.mu, omega1.sigma, omega1.beta)
            p0 = np.exp(lp0)
            # Where p0 underflows to zero the contribution is zero even if
            # lp1 overflowed to -inf (0 * inf would otherwise yield NaN).
            out = np.where(p0 > 0.0, p0 * (lp0 - lp1), 0.0)
        return out if np.ndim(x) else float(out)

    half = _gg_tail_halfwidth(omega0, 1e-12)
    lo = min(omega0.mu - half, omega1.mu - abs(omega1.sigma))
    hi = max(omega0.mu + half, omega1.mu + abs(omega1.sigma))
    interior = sorted({omega0.mu, omega1.mu} - {lo, hi})

    total = 0.0
    err = 0.0
    core, core_err = integrate.quad(
        integrand,
        lo,
        hi,
        points=interior or None,
        limit=400,
        epsabs=1e-11,
        epsrel=1e-10,
    )
    total += core
    err += core_err
    # Beyond the 1e-12 mass cut the integrand decays superexponentially; the
    # tails only need explicit integration while they are still resolvable.
    for a, b, probe in ((-np.inf, lo, lo), (hi, np.inf, hi)):
        if abs(float(integrand(probe))) < 1e-18:
            continue
        with np.errstate(over="ignore"):
            tail, tail_err = integrate.quad(
                integrand, a, b, limit=200, epsabs=1e-12, epsrel=1e-10
            )
        total += tail
        err += tail_err
    if not math.isfinite(total) or err > max(1e-8, 1e-6 * abs(total)):
        raise NumericsError(
            f"KL quadrature did not converge: value={total!r}, abserr={err:.3e}, "
            f"omega0={omega0}, omega1={omega1}"
        )
    if total < -1e-8:
        raise NumericsError(f"KL quadrature returned {total:.3e} < -1e-8")
    return max(total, 0.0)


def kl_gaussian_closed(omega0: GGParams, omega1: GGParams) -> float:
    """Closed-form KL for the Gaussian special case (both shapes exactly 2).

    The GG scale maps to a Gaussian of variance sigma**2 / 2; the result must
    agree with :func:`kl_gg_numeric` to 1e-6.
    """
    if abs(omega0.beta - 2.0) > 1e-12 or abs(omega1.beta - 2.0) > 1e-12:
        raise ParameterError("kl_gaussian_closed requires both shapes equal to 2")
    dmu = omega1.mu - omega0.mu
    return (
        math.log(omega1.sigma / omega0.sigma)
        + omega0.sigma**2 / (2.0 * omega1.sigma**2)
        + dmu**2 / omega1.sigma**2
        - 0.5
    )


def kl_equal_mean_closed(omega0: GGParams, omega1: GGParams) -> float:
    """Closed-form KL for equal means and arbitrary shapes.

    Uses the generalized-Gamma result

        D = log(b0 s1 G(1/b1) / (b1 s0 G(1/b0)))
            + (s0/s1)**b1 * G((b1+1)/b0) / G(1/b0) - 1/b0

    which reduces to the Gaussian form when both shapes are 2 and agrees with
    quadrature on its whole domain.
    """
    scale = max(abs(omega0.mu), abs(omega1.mu), 1.0)
    if abs(omega0.mu - omega1.mu) > 1e-12 * scale:
        raise ParameterError("kl_equal_mean_closed requires equal means")
    b0, b1 = omega0.beta, omega1.beta
    s0, s1 = omega0.sigma, omega1.sigma
    return (
        math.log(b0 * s1 / (b1 * s0))
        + special.gammaln(1.0 / b1)
        - special.gammaln(1.0 / b0)
        + (s0 / s1) ** b1
        * math.exp(special.gammaln((b1 + 1.0) / b0) - special.gammaln(1.0 / b0))
        - 1.0 / b0
    )


def total_divergence(pairs, samples_per_packet: int) -> float:
    """Per-packet divergence: |T| times the sum of per-(feature, node) KLs."""
    pairs = list(pairs)
    if not pairs:
        raise DegenerateDataError("total_divergence: empty pair set")
    return samples_per_packet * sum(kl_gg_numeric(w0, w1) for w0, w1 in pairs)


@dataclass(frozen=True)
class ChernoffExponents:
    association_exponent: float
    sign_exponent: float
    p_es: float | None


def chernoff_exponents(pairs_by_node, pi_by_node=None) -> ChernoffExponents:
    """Error exponents of the association and sign-correction steps.

    ``pairs_by_node`` maps node id to its per-feature (omega0, omega1) pairs.
    The association error decays with the full summed divergence per sample;
    the sign error with the weakest node's feature-summed divergence. When
    per-node sign-flip probabilities ``pi_by_node`` are given, the probability
    that at least one node reports a wrong sign is 1 - prod(1 - pi_n).
    """
    if not pairs_by_node:
        raise DegenerateDataError("chernoff_exponents: empty pair set")
    per_node = {
        n: sum(kl_gg_numeric(w0, w1) for w0, w1 in pairs)
        for n, pairs in pairs_by_node.items()
    }
    association = sum(per_node.values())
    sign = min(per_node.values())
    p_es = None
    if pi_by_node is not None:
        prod = 1.0
        for n in pairs_by_node:
            pi = pi_by_node[n]
            if not 0.0 <= pi <= 1.0:
                raise ParameterError(f"pi[{n}] must lie in [0, 1], got {pi}")
            prod *= 1.0 - pi
        p_es = 1.0 - prod
    return ChernoffExponents(association, sign, p_es)


# ---------------------------------------------------------------------------
# FA/MD feasibility bound
# ---------------------------------------------------------------------------


def _fa_md_f(p_md: float, p_fa: float) -> float:
    """Binary divergence term bounded by the data-level KL."""
    total = 0.0
    if p_md > 0.0:
        total += p_md * math.log(p_md / (1.0 - p_fa))
    if p_md < 1.0:
        total += (1.0 - p_md) * math.log((1.0 - p_md) / p_fa)
    return total


def fa_md_bound(kl: float, p_fa_grid) -> BoundCurve:
    """Maximal true-positive rate compatible with the divergence budget.

    For each false-alarm rate the smallest feasible missed-detection rate
    solves f(P_MD, P_FA) = kl by bisection on the branch where f decreases
    from log(1/P_FA) at P_MD -> 0 to zero at the chance point P_MD = 1 - P_FA.
    """
    if kl < 0.0:
        raise ParameterError(f"kl must be >= 0, got {kl}")
    grid = np.asarray(p_fa_grid, dtype=float)
    if np.any((grid < 0.0) | (grid > 1.0)):
        raise ParameterError("p_fa grid must lie in [0, 1]")
    tps = np.empty_like(grid)
    for i, fa in enumerate(grid):
        if fa <= 0.0:
            tps[i] = 0.0
            continue
        if fa >= 1.0:
            tps[i] = 1.0
            continue
        if kl >= math.log(1.0 / fa):
            tps[i] = 1.0
            continue
        chance_md = 1.0 - fa
        if kl <= 0.0:
            tps[i] = fa
            continue
        md = optimize.brentq(
            lambda m: _fa_md_f(m, fa) - kl, 1e-300, chance_md, xtol=1e-15, rtol=8.9e-16
        )
        tps[i] = 1.0 - md
    return BoundCurve(kl=float(kl), p_fa=grid, p_tp=tps)


# ---------------------------------------------------------------------------
# Empirical ROC and threshold selection
# ---------------------------------------------------------------------------


def _split_scores(scores):
    legit = np.array([s for s, lab in scores if lab == AUTHENTIC], dtype=float)
    attack = np.array([s for s, lab in scores if lab == ATTACK], dtype=float)
    if legit.size == 0 or attack.size == 0:
        raise DegenerateDataError("roc: need scores from both classes")
    return legit, attack


def roc_lambda_grid(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus +-inf sentinels."""
    values = np.unique([s for s, _ in scores])
    mids = (values[1:] + values[:-1]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def roc_from_scores(scores, lambda_grid=None) -> RocCurve:
    """Empirical ROC of the decide rule over a threshold grid.

    ``scores`` is a sequence of (psi, true_source) with true_source in
    {"legitimate", "attacker"}. At each lambda a packet is flagged fake when
    psi < lambda, so the false-alarm rate is the fraction of legitimate scores
    below lambda and the true-positive rate the fraction of attack scores
    below lambda.
    """
    legit, attack = _split_scores(scores)
    grid = roc_lambda_grid(scores) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    grid = np.sort(grid)
    legit_sorted = np.sort(legit)
    attack_sorted = np.sort(attack)
    fa = np.searchsorted(legit_sorted, grid, side="left") / legit.size
    tp = np.searchsorted(attack_sorted, grid, side="left") / attack.size
    return RocCurve(lambdas=grid, p_fa=fa, p_tp=tp)


def select_threshold_knee(
    roc: RocCurve, target_fn: float = 0.1, target_tp: float = 0.98
) -> float:
    """Threshold of the ROC point nearest the target operating point.

    ``target_fn`` is the tolerated rate of falsely rejecting authentic packets
    (the curve's false-alarm axis) and ``target_tp`` the desired detection
    rate. Ties break toward the smaller false-alarm rate, then the smaller
    threshold.
    """
    finite = np.isfinite(roc.lambdas)
    if not np.any(finite):
        raise DegenerateDataError("knee selection: no finite thresholds on the curve")
    lam = roc.lambdas[finite]
    fa = roc.p_fa[finite]
    tp = roc.p_tp[finite]
    dist = (fa - target_fn) ** 2 + (tp - target_tp) ** 2
    order = np.lexsort((lam, fa, dist))
    return float(lam[order[0]])


def select_threshold_trained(scores) -> float:
    """Accuracy-maximizing threshold from labeled training scores.

    Scans all midpoints between consecutive distinct scores (plus outer
    sentinels), keeps the one with the highest training accuracy (ties go to
    the midpoint farthest from both class means), then snaps the threshold to
    the edge of the attacker-classified cluster: the smallest index that still
    rejects every training score classified as the attacker's.
    """
    legit, attack = _split_scores(scores)
    values = np.unique(np.concatenate([legit, attack]))
    span = values[-1] - values[0] if values.size > 1 else 1.0
    candidates = np.concatenate(
        [[values[0] - 0.5 * span], (values[1:] + values[:-1]) / 2.0, [values[-1] + 0.5 * span]]
    )
    legit_sorted = np.sort(legit)
    attack_sorted = np.sort(attack)
    # authentic iff psi >= lambda: correct legit are >= lambda, correct attacks < lambda
    n_correct = (
        legit.size
        - np.searchsorted(legit_sorted, candidates, side="left")
        + np.searchsorted(attack_sorted, candidates, side="left")
    )
    best = n_correct == np.max(n_correct)
    mean_sep = np.minimum(
        np.abs(candidates - np.mean(legit)), np.abs(candidates - np.mean(attack))
    )
    mean_sep[~best] = -np.inf
    lam = float(candidates[int(np.argmax(mean_sep))])
    rejected = values[values < lam]
    if rejected.size:
        # Just above the largest attacker-classified score, so that score
        # stays rejected; training classifications are unchanged because no
        # score lies strictly between it and the scanned midpoint.
        lam = float(np.nextafter(rejected[-1], np.inf))
    return lam
