"""Cooperative authentication: per-node beliefs and sink-side fusion.

Each trusted node keeps a per-feature packet history, refits a two-component
mixture on every packet, aligns the components with the authentic/attack
hypotheses against the first (trusted) packet, and reports a single scalar
log-likelihood-ratio belief to the sink. The sink majority-corrects the belief
signs, weights them by proximity and topology, and thresholds the fused index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ggmix
from .errors import ConfigError, DegenerateDataError
from .features import PROXIMITY_FEATURE_ID
from .ggmix import (
    EMConfig,
    GGParams,
    HypothesisParams,
    MixtureEstimate,
    PacketSamples,
    _log_density,
)

log = logging.getLogger(__name__)

VERDICT_AUTHENTIC = "authentic"
VERDICT_FAKE = "fake"

BELIEF_CSV_FIELDS = ("packet_id", "node_id", "r_value", "mean_proximity")


@dataclass(frozen=True)
class Belief:
    """The per-packet report a trusted node forwards to the sink."""

    packet_id: int
    node_id: int
    r_value: float
    mean_proximity: float

    def __post_init__(self):
        if not math.isfinite(self.r_value):
            raise DegenerateDataError("belief r_value must be finite")
        if not self.mean_proximity > 0.0:
            raise DegenerateDataError("belief mean_proximity must be positive")


def belief_to_row(belief: Belief) -> list:
    """Serialize a belief to its wire record (the only data a node exports)."""
    return [
        belief.packet_id,
        belief.node_id,
        f"{belief.r_value:.17g}",
        f"{belief.mean_proximity:.17g}",
    ]


def belief_from_row(row) -> Belief:
    return Belief(
        packet_id=int(row[0]),
        node_id=int(row[1]),
        r_value=float(row[2]),
        mean_proximity=float(row[3]),
    )


@dataclass(frozen=True)
class FusionResult:
    packet_id: int
    psi: float
    weights: dict  # node_id -> g_n > 0
    signs: dict  # node_id -> +-1
    majority_sign: int
    verdict: str | None = None
    beliefs: tuple = ()  # the fused reports, for tracing


@dataclass
class AuthConfig:
    """Protocol knobs shared by all trusted nodes."""

    feature_set: tuple = (1, 4, 6)
    em: EMConfig = field(default_factory=EMConfig)
    warm_start: bool = True
    max_restarts: int = 2
    use_zeta: bool = False
    zeta_floor: float = 1e-6


@dataclass
class NodeState:
    """Mutable per-node view of the packet stream.

    Histories are append-only; the first packet's samples stay frozen as the
    hypothesis-association reference.
    """

    node_id: int
    config: AuthConfig
    rng: np.random.Generator
    histories: dict = field(default_factory=dict)  # feature -> [PacketSamples]
    mixtures: dict = field(default_factory=dict)  # feature -> MixtureEstimate
    first_packet_reference: dict = field(default_factory=dict)
    packets_seen: int = 0


def _component_loglik(values: np.ndarray, omega: GGParams) -> float:
    return float(np.sum(_log_density(values, omega.mu, omega.sigma, omega.beta)))


def associate_components(
    mixture: MixtureEstimate, reference: PacketSamples
) -> tuple[int, int]:
    """Map mixture components to hypotheses using the first trusted packet.

    Returns (index of the authentic component, index of the attack component):
    the component under which the reference packet's product likelihood is at
    least as large is declared authentic. Deterministic and idempotent for a
    fixed mixture and reference.
    """
    ll0 = _component_loglik(reference.values, mixture.components[0].omega)
    ll1 = _component_loglik(reference.values, mixture.components[1].omega)
    return (0, 1) if ll0 >= ll1 else (1, 0)


def feature_llr(
    mixture: MixtureEstimate, reference: PacketSamples, values: np.ndarray
) -> float:
    """One feature's belief term: authentic-minus-attack log-likelihood of the
    current packet's samples, after hypothesis association against the
    reference packet. Invariant under swapping the mixture's components."""
    h0, h1 = associate_components(mixture, reference)
    return _component_loglik(values, mixture.components[h0].omega) - _component_loglik(
        values, mixture.components[h1].omega
    )


def _initial_mixture(samples: PacketSamples) -> MixtureEstimate:
    """Reference-packet fit: a sample-level split with moment-matched parts.

    With a single packet in the history the packet-grouped EM is degenerate
    (both components converge to the packet's own fit), so the first packet
    gets a k-means split of its samples instead; association against the same
    packet then yields a strictly positive belief.
    """
    components = ggmix.kmeans_moment_init(samples.values)
    posterior = ggmix.packet_posterior(samples, components)
    return MixtureEstimate(
        components=components,
        posteriors={samples.packet_id: posterior},
        log_likelihood_trace=[],
        iterations=0,
    )


def _components_degenerate(components) -> bool:
    """True when the two components are essentially the same density.

    Warm-starting EM from identical components is a fixed point of the
    packet-grouped updates (the responsibilities cancel out of every update),
    so such fits must not seed the next packet's fit: a later attack cluster
    would never be discovered from them. Mildly separated components are fine
    as seeds; packet-level reassignment moves them onto new structure.
    """
    w0, w1 = components[0].omega, components[1].omega
    scale = max(w0.sigma, w1.sigma)
    return (
        abs(w0.mu - w1.mu) < 0.05 * scale
        and max(w0.sigma, w1.sigma) / min(w0.sigma, w1.sigma) < 1.05
        and abs(w0.beta - w1.beta) < 0.1
    )


def _fallback_component(part: np.ndarray, spread: float) -> GGParams:
    mu = float(np.mean(part))
    std = max(float(np.std(part)), 1e-6 * (spread + 1e-300))
    return GGParams(mu=mu, sigma=std * math.sqrt(2.0), beta=2.0)


def _packet_split_init(history: list, rng: np.random.Generator):
    """Restart init from a random bipartition of whole packets.

    A value-level split of one-cluster data collapses deterministically (every
    packet prefers the wider component), whereas components seeded from
    disjoint packet groups each retain their own packets, so EM starts from a
    feasible two-cluster configuration even when the history is unimodal.
    """
    n = len(history)
    if n < 2:
        raise DegenerateDataError("packet-split init needs >= 2 packets")
    size = int(rng.integers(1, n))
    picks = rng.permutation(n)[:size]
    mask = np.zeros(n, dtype=bool)
    mask[picks] = True
    side_a = np.concatenate([p.values for p, m in zip(history, mask) if m])
    side_b = np.concatenate([p.values for p, m in zip(history, mask) if not m])
    spread = float(max(np.max(side_a), np.max(side_b)) - min(np.min(side_a), np.min(side_b)))
    comps = []
    for part in (side_a, side_b):
        try:
            comps.append(ggmix.moment_init(part))
        except DegenerateDataError:
            comps.append(_fallback_component(part, spread))
    frac = float(np.clip(size / n, 1e-3, 1.0 - 1e-3))
    return (
        HypothesisParams(omega=comps[0], k=frac),
        HypothesisParams(omega=comps[1], k=1.0 - frac),
    )


def _fit_feature(
    state: NodeState, feature_id: int, history: list
) -> MixtureEstimate | None:
    """EM refit for one feature.

    The previous packet's estimate seeds the fit while it retains genuine
    two-cluster structure; otherwise (and on component collapse) the fit
    restarts from a k-means split of all samples, then from randomized
    quantile splits.
    """
    cfg = state.config
    inits = []
    previous = state.mixtures.get(feature_id)
    if (
        cfg.warm_start
        and previous is not None
        and previous.iterations > 0
        and not _components_degenerate(previous.components)
    ):
        inits.append(previous.components)
    try:
        inits.append(ggmix.kmeans_moment_init(np.concatenate([p.values for p in history])))
    except DegenerateDataError:
        pass
    last_error = None
    for attempt in range(len(inits) + max(0, cfg.max_restarts)):
        if attempt < len(inits):
            init = inits[attempt]
        else:
            try:
                init = _packet_split_init(history, state.rng)
            except DegenerateDataError as exc:
                last_error = exc
                break
        try:
            return ggmix.em_fit(history, init, cfg.em)
        except (ggmix.ComponentCollapseError, DegenerateDataError) as exc:
            last_error = exc
            continue
    log.debug(
        "node %d feature %d: EM failed after all inits: %s",
        state.node_id,
        feature_id,
        last_error,
    )
    return None


def node_process_packet(
    state: NodeState, packet_id: int, samples_by_feature: dict
) -> Belief | None:
    """Ingest one packet at one trusted node and compute its belief.

    ``samples_by_feature`` maps feature id to a 1-d array of the packet's
    samples; features without samples this packet are skipped. Returns None
    (the node abstains) when every configured feature drops out.
    """
    cfg = state.config
    proximity_samples = samples_by_feature.get(PROXIMITY_FEATURE_ID)
    if proximity_samples is None or len(proximity_samples) == 0:
        proximity = 1.0
        log.debug("node %d packet %d: no proximity samples", state.node_id, packet_id)
    else:
        proximity = float(np.mean(proximity_samples))

    r_total = 0.0
    contributing = 0
    for fid in cfg.feature_set:
        values = samples_by_feature.get(fid)
        if values is None or len(values) == 0:
            continue
        packet = PacketSamples(packet_id=packet_id, values=np.asarray(values, dtype=float))
        history = state.histories.setdefault(fid, [])
        history.append(packet)
        if fid not in state.first_packet_reference:
            state.first_packet_reference[fid] = packet

        if len(history) == 1:
            try:
                mixture = _initial_mixture(packet)
            except DegenerateDataError:
                continue
        else:
            mixture = _fit_feature(state, fid, history)
            if mixture is None:
                continue
        state.mixtures[fid] = mixture
        r_total += feature_llr(mixture, state.first_packet_reference[fid], packet.values)
        contributing += 1

    state.packets_seen += 1
    if contributing == 0:
        log.warning("node %d packet %d: all features dropped, abstaining", state.node_id, packet_id)
        return None
    return Belief(
        packet_id=packet_id,
        node_id=state.node_id,
        r_value=r_total,
        mean_proximity=max(proximity, 1e-300),
    )


# ---------------------------------------------------------------------------
# Sink fusion
# ---------------------------------------------------------------------------


def _zeta(n_idx: int, k_idx: int, proximities: np.ndarray, positions: np.ndarray) -> float:
    """Distribution measure between two reporting nodes, evaluated literally."""
    others = [j for j in range(len(proximities)) if j not in (n_idx, k_idx)]
    if not others:
        return 0.0
    prox_sum = float(np.sum(proximities[others]))
    if prox_sum <= 0.0:
        return 0.0
    total = 0.0
    dk = positions[k_idx] - positions[n_idx]
    for j in others:
        dj = positions[j] - positions[n_idx]
        total += (1.0 / proximities[j]) * (
            1.0 - float(dk @ dj) / (proximities[n_idx] * proximities[k_idx])
        )
    return total / prox_sum


def sink_fuse(beliefs, topology, use_zeta: bool = False, zeta_floor: float = 1e-6) -> FusionResult:
    """Fuse per-node beliefs into the packet decision index.

    The majority sign of the reported beliefs fixes the hypothesis-association
    correction s_n; weights grow with the squared inverse of the normalized
    proximity and, optionally, the topology spread term zeta (clamped to keep
    every weight positive, since the literal formula mixes meters with power
    units). With a single belief the fusion degenerates to psi = r.
    """
    beliefs = sorted(beliefs, key=lambda b: b.node_id)
    if not beliefs:
        raise DegenerateDataError("sink_fuse: no beliefs to fuse")
    packet_id = beliefs[0].packet_id
    if any(b.packet_id != packet_id for b in beliefs):
        raise ConfigError("sink_fuse: beliefs span multiple packets")

    r = np.array([b.r_value for b in beliefs])
    node_ids = [b.node_id for b in beliefs]

    if len(beliefs) == 1:
        return FusionResult(
            packet_id=packet_id,
            psi=float(r[0]),
            weights={node_ids[0]: 1.0},
            signs={node_ids[0]: 1},
            majority_sign=1 if r[0] >= 0.0 else -1,
            beliefs=tuple(beliefs),
        )

    raw_signs = np.sign(r).astype(int)
    n_pos = int(np.sum(raw_signs > 0))
    n_neg = int(np.sum(raw_signs < 0))
    if n_pos > n_neg:
        majority = 1
    elif n_neg > n_pos:
        majority = -1
    else:
        total = float(np.sum(r))
        majority = 1 if total >= 0.0 else -1
    signs = np.where(raw_signs == 0, 1, raw_signs * majority).astype(int)

    prox = np.array([b.mean_proximity for b in beliefs])
    norm = prox / float(np.max(prox))
    weights = norm**-2.0
    if use_zeta:
        positions = np.array([topology.node(nid).position for nid in node_ids])
        for i in range(len(beliefs)):
            zeta_i = sum(
                _zeta(i, j, prox, positions) for j in range(len(beliefs)) if j != i
            )
            weights[i] *= max(1.0 + zeta_i, zeta_floor)

    psi = float(np.sum(weights * signs * r))
    return FusionResult(
        packet_id=packet_id,
        psi=psi,
        weights={nid: float(w) for nid, w in zip(node_ids, weights)},
        signs={nid: int(s) for nid, s in zip(node_ids, signs)},
        majority_sign=majority,
        beliefs=tuple(beliefs),
    )


def decide(psi: float, lam: float) -> str:
    """Authentic iff the decision index reaches the threshold (boundary inclusive)."""
    if not (math.isfinite(psi) and math.isfinite(lam)):
        raise ConfigError("decide: psi and lambda must be finite")
    return VERDICT_AUTHENTIC if psi >= lam else VERDICT_FAKE


def pooled_centralized_llr(per_node_terms) -> float:
    """Centralized log-likelihood ratio from pooled per-node component terms.

    ``per_node_terms`` is an iterable of (samples, omega_h0, omega_h1)
    triples covering every (feature, node) pair. Equals the sum of the
    distributed beliefs with unit weights and signs.
    """
    total = 0.0
    for values, w0, w1 in per_node_terms:
        total += _component_loglik(values, w0) - _component_loglik(values, w1)
    return total


# ---------------------------------------------------------------------------
# End-to-end protocol
# ---------------------------------------------------------------------------


def run_protocol(
    scenario,
    schedule,
    attacker_cfg,
    lam: float,
    rng: np.random.Generator,
    auth_cfg: AuthConfig,
    n_symbols: int,
    detection_threshold: float,
    alpha: float,
) -> list:
    """Run the cooperative protocol over one packet schedule.

    ``schedule`` is a sequence of source roles, the first of which must be
    legitimate (the protocol's trust anchor). Returns one (FusionResult,
    true_source) pair per packet, with verdicts from the given threshold.
    """
    from .channel import ROLE_LEGITIMATE, transmit_packet
    from .features import extract_packet_features

    schedule = list(schedule)
    if not schedule or schedule[0] != ROLE_LEGITIMATE:
        raise ConfigError("the first scheduled packet must come from the legitimate node")

    node_rngs = {
        node.node_id: np.random.default_rng(rng.integers(0, 2**63))
        for node in scenario.topology.trusted
    }
    states = {
        nid: NodeState(node_id=nid, config=auth_cfg, rng=node_rngs[nid])
        for nid in node_rngs
    }
    wanted = tuple(sorted(set(auth_cfg.feature_set) | {PROXIMITY_FEATURE_ID}))

    results = []
    for packet_id, source in enumerate(schedule):
        tx = transmit_packet(
            source, scenario, attacker_cfg, n_symbols, rng, packet_id=packet_id
        )
        beliefs = []
        for nid, profiles in sorted(tx.profiles.items()):
            samples = extract_packet_features(
                profiles, detection_threshold, alpha, feature_ids=wanted
            )
            belief = node_process_packet(states[nid], packet_id, samples)
            if belief is not None:
                beliefs.append(belief)
        if not beliefs:
            raise DegenerateDataError(f"packet {packet_id}: every node abstained")
        fused = sink_fuse(
            beliefs,
            scenario.topology,
            use_zeta=auth_cfg.use_zeta,
            zeta_floor=auth_cfg.zeta_floor,
        )
        fused = replace(fused, verdict=decide(fused.psi, lam))
        results.append((fused, source))
    return results
