"""Tests for the generalized-Gaussian primitives and the packet-grouped EM."""

import math

import numpy as np
import pytest
import scipy.stats as st
from scipy import integrate, special

from uwauth import ggmix
from uwauth.errors import (
    ComponentCollapseError,
    DegenerateDataError,
    ParameterError,
)
from uwauth.ggmix import (
    BETA_MAX,
    BETA_MIN,
    EMConfig,
    GGParams,
    HypothesisParams,
    PacketSamples,
    beta_from_excess_kurtosis,
    em_fit,
    excess_kurtosis_of_beta,
    gg_log_pdf,
    gg_pdf,
    gg_sample,
    kmeans_moment_init,
    kmeans_two,
    moment_init,
    packet_posterior,
)

STD_NORMAL = GGParams(mu=0.0, sigma=math.sqrt(2.0), beta=2.0)


def draw_gg(omega, n, seed):
    """Independent sampling oracle (scipy's generalized normal)."""
    return st.gennorm.rvs(omega.beta, loc=omega.mu, scale=omega.sigma, size=n, random_state=seed)


def make_history(component_of_packet, truths, samples_per_packet, rng):
    return [
        PacketSamples(pid, gg_sample(truths[c], samples_per_packet, rng))
        for pid, c in enumerate(component_of_packet)
    ]


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------


def test_pdf_standard_normal_at_zero():
    assert gg_pdf(0.0, STD_NORMAL) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), abs=1e-12)


def test_pdf_peak_value_at_mean():
    for omega in (GGParams(1.3, 0.7, 1.5), GGParams(-2.0, 3.0, 0.8), GGParams(0.0, 1.0, 6.0)):
        peak = omega.beta / (2.0 * omega.sigma * special.gamma(1.0 / omega.beta))
        assert gg_pdf(omega.mu, omega) == pytest.approx(peak, rel=1e-12)


def test_pdf_integrates_to_one():
    omega = GGParams(1.3, 0.7, 1.5)
    total, _ = integrate.quad(
        lambda x: gg_pdf(x, omega), omega.mu - 20 * omega.sigma, omega.mu + 20 * omega.sigma,
        points=[omega.mu], limit=200,
    )
    assert total == pytest.approx(1.0, abs=1e-8)


def test_pdf_integrates_to_one_random_triples():
    rng = np.random.default_rng(7)
    for _ in range(30):
        omega = GGParams(rng.uniform(-5, 5), rng.uniform(0.05, 10), rng.uniform(BETA_MIN, BETA_MAX))
        half = omega.sigma * special.gammainccinv(1.0 / omega.beta, 1e-13) ** (1.0 / omega.beta)
        total, _ = integrate.quad(
            lambda x: gg_pdf(x, omega), omega.mu - half, omega.mu + half,
            points=[omega.mu], limit=200,
        )
        assert total == pytest.approx(1.0, abs=1e-6)


def test_log_pdf_matches_known_values():
    assert gg_log_pdf(0.0, STD_NORMAL) == pytest.approx(math.log(1.0 / math.sqrt(2 * math.pi)), abs=1e-12)
    laplace = GGParams(0.5, 2.0, 1.0)
    assert gg_log_pdf(laplace.mu + laplace.sigma, laplace) == pytest.approx(
        math.log(1.0 / (2.0 * laplace.sigma)) - 1.0, abs=1e-12
    )


def test_log_pdf_far_tail_high_precision():
    mpmath = pytest.importorskip("mpmath")
    omega = GGParams(0.0, 1.0, 2.0)
    got = gg_log_pdf(50.0, omega)
    expected = mpmath.log(
        mpmath.mpf(2) / (2 * mpmath.gamma(mpmath.mpf(1) / 2)) * mpmath.exp(-mpmath.mpf(50) ** 2)
    )
    assert got == pytest.approx(float(expected), rel=1e-12)
    assert math.isfinite(got)


def test_log_pdf_no_underflow_at_extreme_arguments():
    omega = GGParams(0.0, 1.0, 1.2)
    value = gg_log_pdf(1e3 * omega.sigma, omega)
    assert math.isfinite(value) and value < -1e3


def test_invalid_parameters_rejected():
    with pytest.raises(ParameterError):
        GGParams(0.0, -1.0, 2.0)
    with pytest.raises(ParameterError):
        GGParams(0.0, 1.0, BETA_MAX * 2)
    with pytest.raises(ParameterError):
        GGParams(math.nan, 1.0, 2.0)


def test_sampler_matches_independent_oracle():
    omega = GGParams(2.0, 1.5, 1.3)
    rng = np.random.default_rng(11)
    ours = gg_sample(omega, 20000, rng)
    oracle = draw_gg(omega, 20000, seed=12)
    assert st.ks_2samp(ours, oracle).statistic < 0.02


# ---------------------------------------------------------------------------
# Moment initialization
# ---------------------------------------------------------------------------


def test_kurtosis_relation_special_cases():
    # Gaussian: excess kurtosis 0 at shape 2; Laplace: 3 at shape 1.
    assert excess_kurtosis_of_beta(2.0) == pytest.approx(0.0, abs=1e-12)
    assert excess_kurtosis_of_beta(1.0) == pytest.approx(3.0, abs=1e-12)
    assert beta_from_excess_kurtosis(0.0) == pytest.approx(2.0, abs=1e-9)
    assert beta_from_excess_kurtosis(3.0) == pytest.approx(1.0, abs=1e-9)


def test_kurtosis_out_of_range_clamps():
    assert beta_from_excess_kurtosis(1e6) == BETA_MIN
    assert beta_from_excess_kurtosis(-2.9) == BETA_MAX


def test_moment_init_recovers_parameters():
    truth = GGParams(2.0, 1.0, 1.5)
    est = moment_init(draw_gg(truth, 100_000, seed=3))
    assert est.mu == pytest.approx(truth.mu, rel=0.05)
    assert est.sigma == pytest.approx(truth.sigma, rel=0.05)
    assert est.beta == pytest.approx(truth.beta, rel=0.05)


def test_moment_init_rejects_degenerate_input():
    with pytest.raises(DegenerateDataError):
        moment_init([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateDataError):
        moment_init([5.0] * 20)


def test_moment_init_error_shrinks_with_sample_size():
    truth = GGParams(1.0, 2.0, 2.5)

    def rel_error(n, seed):
        est = moment_init(draw_gg(truth, n, seed))
        return (
            abs(est.mu - truth.mu) / abs(truth.mu)
            + abs(est.sigma - truth.sigma) / truth.sigma
            + abs(est.beta - truth.beta) / truth.beta
        )

    improved = sum(rel_error(100_000, s) < rel_error(1000, s) for s in range(20))
    assert improved >= 18


# ---------------------------------------------------------------------------
# Two-cluster split
# ---------------------------------------------------------------------------


def test_kmeans_two_perfectly_separated():
    idx0, idx1 = kmeans_two([0.0, 0.0, 0.0, 10.0, 10.0, 10.0])
    assert sorted(idx0) == [0, 1, 2]
    assert sorted(idx1) == [3, 4, 5]


def test_kmeans_two_small_example():
    x = [1.0, 2.0, 9.0, 10.0]
    idx0, idx1 = kmeans_two(x)
    assert sorted(np.asarray(x)[idx0]) == [1.0, 2.0]
    assert sorted(np.asarray(x)[idx1]) == [9.0, 10.0]


def test_kmeans_two_bimodal_agreement_with_truth():
    rng = np.random.default_rng(5)
    a = gg_sample(GGParams(0.0, 1.0, 2.0), 100, rng)
    b = gg_sample(GGParams(8.0, 1.0, 2.0), 100, rng)
    x = np.concatenate([a, b])
    idx0, idx1 = kmeans_two(x)
    labels = np.empty(200, dtype=int)
    labels[idx0] = 0
    labels[idx1] = 1
    oracle = (np.abs(x - 8.0) < np.abs(x - 0.0)).astype(int)
    assert np.mean(labels == oracle) >= 0.95


def test_kmeans_two_identical_values_error():
    with pytest.raises(DegenerateDataError):
        kmeans_two([3.0, 3.0, 3.0])


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def component_matching(est, truths):
    """Map estimated components to truths by nearest location."""
    mus = [c.omega.mu for c in est.components]
    if abs(mus[0] - truths[0].mu) + abs(mus[1] - truths[1].mu) <= abs(
        mus[0] - truths[1].mu
    ) + abs(mus[1] - truths[0].mu):
        return (0, 1)
    return (1, 0)


def test_em_two_component_recovery_and_posteriors():
    truths = [GGParams(0.0, 1.0, 2.0), GGParams(6.0, 1.0, 2.0)]
    rng = np.random.default_rng(21)
    labels = [pid % 2 for pid in range(40)]
    history = make_history(labels, truths, 50, rng)
    init = kmeans_moment_init(np.concatenate([p.values for p in history]))
    est = em_fit(history, init)
    order = component_matching(est, truths)
    for slot, truth in zip(order, truths):
        comp = est.components[slot].omega
        assert comp.mu == pytest.approx(truth.mu, abs=0.1 * truth.sigma)
        assert comp.sigma == pytest.approx(truth.sigma, rel=0.10)
        assert comp.beta == pytest.approx(truth.beta, rel=0.10)
    correct = np.mean(
        [
            (est.posteriors[pid] >= 0.5) == (labels[pid] == order.index(0))
            for pid in range(40)
        ]
    )
    assert correct >= 0.95
    assert est.iterations <= 10
    assert est.converged


def test_em_single_component_history():
    # With every packet from one component, essentially all of the mixture
    # mass concentrates on one (near-truth) component.
    truth = GGParams(2.0, 1.0, 2.0)
    rng = np.random.default_rng(8)
    history = make_history([0] * 20, [truth], 100, rng)
    init = (
        HypothesisParams(omega=GGParams(2.0, 1.0, 2.0), k=0.5),
        HypothesisParams(omega=GGParams(2.1, 1.5, 2.0), k=0.5),
    )
    est = em_fit(history, init)
    assert est.converged
    dominant = max(est.components, key=lambda c: c.k)
    assert dominant.k >= 0.8
    assert dominant.omega.mu == pytest.approx(truth.mu, abs=0.05 * truth.sigma)
    assert dominant.omega.sigma == pytest.approx(truth.sigma, rel=0.05)
    assert dominant.omega.beta == pytest.approx(truth.beta, rel=0.05)


def test_em_log_likelihood_trace_monotone():
    rng = np.random.default_rng(17)
    for sep in (0.3, 1.0, 6.0):
        truths = [GGParams(0.0, 1.0, 1.6), GGParams(sep, 1.2, 2.4)]
        for _ in range(6):
            history = make_history([pid % 2 for pid in range(10)], truths, 40, rng)
            init = kmeans_moment_init(np.concatenate([p.values for p in history]))
            try:
                est = em_fit(history, init)
            except ComponentCollapseError:
                continue
            trace = est.log_likelihood_trace
            assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


def test_em_posteriors_sum_to_one():
    rng = np.random.default_rng(3)
    truths = [GGParams(0.0, 1.0, 2.0), GGParams(4.0, 1.0, 2.0)]
    history = make_history([0, 1, 0, 1, 0, 1], truths, 30, rng)
    est = em_fit(history, kmeans_moment_init(np.concatenate([p.values for p in history])))
    for pid, p0 in est.posteriors.items():
        assert 0.0 <= p0 <= 1.0
        # complement is exact by construction
        assert p0 + (1.0 - p0) == 1.0


def test_em_deterministic():
    rng = np.random.default_rng(9)
    truths = [GGParams(0.0, 1.0, 2.0), GGParams(5.0, 1.0, 2.0)]
    history = make_history([pid % 2 for pid in range(12)], truths, 40, rng)
    init = kmeans_moment_init(np.concatenate([p.values for p in history]))
    a = em_fit(history, init)
    b = em_fit(history, init)
    assert a.components == b.components
    assert a.log_likelihood_trace == b.log_likelihood_trace
    assert a.posteriors == b.posteriors


def test_em_component_collapse_raises():
    rng = np.random.default_rng(30)
    history = make_history([0] * 6, [GGParams(0.0, 1.0, 2.0)], 50, rng)
    omega = moment_init(np.concatenate([p.values for p in history]))
    # An essentially empty second component cannot regain mass: with identical
    # densities the posteriors equal the priors, which sit below the floor.
    init = (
        HypothesisParams(omega=omega, k=1.0 - 1e-4),
        HypothesisParams(omega=omega, k=1e-4),
    )
    with pytest.raises(ComponentCollapseError):
        em_fit(history, init)


def test_em_input_validation():
    with pytest.raises(DegenerateDataError):
        em_fit([], kmeans_moment_init(np.arange(10.0)))
    rng = np.random.default_rng(1)
    history = make_history([0, 0], [GGParams(0, 1, 2)], 20, rng)
    bad_init = (
        HypothesisParams(omega=GGParams(0, 1, 2), k=0.6),
        HypothesisParams(omega=GGParams(1, 1, 2), k=0.6),
    )
    with pytest.raises(ParameterError):
        em_fit(history, bad_init)


def test_em_warm_start_converges_fast():
    rng = np.random.default_rng(40)
    truths = [GGParams(0.0, 1.0, 2.0), GGParams(6.0, 1.0, 2.0)]
    history = make_history([pid % 2 for pid in range(12)], truths, 40, rng)
    first = em_fit(history, kmeans_moment_init(np.concatenate([p.values for p in history])))
    history.append(PacketSamples(12, gg_sample(truths[0], 40, rng)))
    warm = em_fit(history, first.components)
    assert warm.iterations <= first.iterations + 2


# ---------------------------------------------------------------------------
# Packet posterior
# ---------------------------------------------------------------------------


def test_packet_posterior_symmetric_midpoint():
    comps = (
        HypothesisParams(omega=GGParams(0.0, 1.0, 2.0), k=0.5),
        HypothesisParams(omega=GGParams(4.0, 1.0, 2.0), k=0.5),
    )
    packet = PacketSamples(0, np.array([2.0]))
    assert packet_posterior(packet, comps) == pytest.approx(0.5, abs=1e-12)


def test_packet_posterior_prior_overrides_data():
    comps = (
        HypothesisParams(omega=GGParams(0.0, 1.0, 2.0), k=1.0),
        HypothesisParams(omega=GGParams(4.0, 1.0, 2.0), k=0.0),
    )
    packet = PacketSamples(0, np.full(50, 4.0))
    assert packet_posterior(packet, comps) == 1.0


def test_packet_posterior_confident_for_separated_mixture():
    comps = (
        HypothesisParams(omega=GGParams(0.0, 1.0, 2.0), k=0.5),
        HypothesisParams(omega=GGParams(6.0, 1.0, 2.0), k=0.5),
    )
    rng = np.random.default_rng(2)
    packet = PacketSamples(0, gg_sample(comps[0].omega, 50, rng))
    assert packet_posterior(packet, comps) > 0.999


def test_packet_posterior_log_domain_stability():
    comps = (
        HypothesisParams(omega=GGParams(0.0, 1.0, 2.0), k=0.5),
        HypothesisParams(omega=GGParams(0.5, 1.0, 2.0), k=0.5),
    )
    packet = PacketSamples(0, np.full(200, 40.0))
    p = packet_posterior(packet, comps)
    assert 0.0 <= p <= 1.0 and math.isfinite(p)
