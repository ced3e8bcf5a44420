"""Seeded Monte-Carlo orchestration, scoring and CSV emission.

Every run builds an independent scenario from a child seed of the master
seed, executes the cooperative protocol over the configured packet schedule,
and reports per-packet decision indices. Runs with even index form the
training half used for threshold selection; odd runs are scored.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import (
    ATTACK,
    AUTHENTIC,
    BoundCurve,
    RocCurve,
    fa_md_bound,
    roc_from_scores,
    select_threshold_knee,
    select_threshold_trained,
    total_divergence,
)
from .auth import (
    AuthConfig,
    VERDICT_AUTHENTIC,
    VERDICT_FAKE,
    decide,
    run_protocol,
)
from .channel import ROLE_ATTACKER, ROLE_LEGITIMATE, build_scenario, mimic_links
from .config import ExperimentConfig
from .errors import ConfigError, UwauthError
from .features import calibrate_threshold

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 40
# Runs contributing to the reported mean divergence (quadrature is costly).
_DIVERGENCE_RUN_CAP = 50


@dataclass
class TraceRow:
    run: int
    packet_id: int
    true_source: str
    psi: float
    verdict: str
    split: str
    r_values: dict  # node_id -> r or None
    proximities: dict  # node_id -> mean proximity or None


@dataclass
class RunScore:
    run: int
    n_scored: int
    n_correct: int
    fa_count: int
    md_count: int

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_scored if self.n_scored else float("nan")


@dataclass
class RunReport:
    config: ExperimentConfig
    threshold: float
    per_run: list
    aggregate_accuracy: float
    fa_count: int
    md_count: int
    trace: list
    beliefs: list  # (run, packet_id, node_id, r_value, mean_proximity)
    histogram: dict  # class -> (edges, counts)
    roc: RocCurve | None
    bound: BoundCurve | None
    mean_divergence: float
    excluded_runs: int
    n_test_packets: int


@dataclass
class _RunOutput:
    run: int
    rows: list  # (packet_id, true_source, psi, r_by_node, prox_by_node)
    divergence: float | None
    node_ids: list
    error: str | None = None


def _child_seed(master_seed: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(run,))


def _scenario_seed(cfg: ExperimentConfig, run: int) -> np.random.SeedSequence:
    if cfg.fixed_topology:
        # One shared topology/ground truth; packet noise still varies per run.
        return np.random.SeedSequence(entropy=cfg.master_seed, spawn_key=(2**31,))
    return np.random.SeedSequence(entropy=cfg.master_seed, spawn_key=(run, 1))


def run_single(cfg: ExperimentConfig, run: int) -> _RunOutput:
    """Execute one seeded run and collect its per-packet results."""
    scenario = build_scenario(cfg.scenario, _scenario_seed(cfg, run))
    threshold = calibrate_threshold(cfg.scenario.noise_floor)
    rng = np.random.default_rng(_child_seed(cfg.master_seed, run))
    auth_cfg = AuthConfig(
        feature_set=tuple(cfg.features.set),
        em=cfg.em.to_em_config(),
        warm_start=cfg.em.warm_start,
        max_restarts=cfg.em.max_restarts,
        use_zeta=cfg.decision.use_zeta,
    )
    schedule = cfg.schedule.pattern()
    results = run_protocol(
        scenario,
        schedule,
        cfg.attacker,
        lam=0.0,
        rng=rng,
        auth_cfg=auth_cfg,
        n_symbols=cfg.schedule.symbols_per_packet,
        detection_threshold=threshold,
        alpha=cfg.features.alpha,
    )
    node_ids = [n.node_id for n in scenario.topology.trusted]

    # Per-packet divergence between the two effective sources over the
    # modeled feature set (the analytic budget for the FA/MD bound). The
    # quadrature is non-trivial, so only the first runs contribute to the
    # reported mean.
    divergence = None
    if run < _DIVERGENCE_RUN_CAP:
        modeled = [f for f in cfg.features.set if f in (1, 4, 6)]
        attack_links = mimic_links(scenario, cfg.attacker)
        pairs = [
            (scenario.legit_links[nid].feature_params[fid], attack_links[nid].feature_params[fid])
            for nid in node_ids
            for fid in modeled
        ]
        divergence = total_divergence(pairs, cfg.schedule.symbols_per_packet) if pairs else 0.0

    rows = []
    for fused, source in results:
        rows.append(
            (
                fused.packet_id,
                source,
                fused.psi,
                {b.node_id: b.r_value for b in fused.beliefs},
                {b.node_id: b.mean_proximity for b in fused.beliefs},
            )
        )
    return _RunOutput(run=run, rows=rows, divergence=divergence, node_ids=node_ids)


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    """Run the configured Monte-Carlo experiment and score the test half."""
    cfg.validate()
    outputs = []
    if threads <= 1:
        for run in range(cfg.runs):
            outputs.append(_safe_run(cfg, run))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_run_star, [(cfg, r) for r in range(cfg.runs)]))
    outputs.sort(key=lambda o: o.run)

    excluded = sum(1 for o in outputs if o.error is not None)
    for o in outputs:
        if o.error is not None:
            log.warning("run %d excluded: %s", o.run, o.error)
    good = [o for o in outputs if o.error is None]
    if not good:
        raise UwauthError("every run failed; nothing to score")

    train_scores = []
    test_outputs = []
    for o in good:
        if o.run % 2 == 0 and cfg.decision.mode != "fixed":
            for packet_id, source, psi, _, _ in o.rows:
                label = AUTHENTIC if source == ROLE_LEGITIMATE else ATTACK
                train_scores.append((psi, label))
        else:
            test_outputs.append(o)
    if cfg.decision.mode == "fixed":
        threshold = cfg.decision.fixed_lambda
        test_outputs = good
    elif cfg.decision.mode == "knee":
        roc_train = roc_from_scores(train_scores)
        threshold = select_threshold_knee(
            roc_train, cfg.decision.knee_target_fn, cfg.decision.knee_target_tp
        )
    else:
        threshold = select_threshold_trained(train_scores)

    trace = []
    beliefs = []
    per_run = []
    test_scores = []
    fa_total = 0
    md_total = 0
    correct_total = 0
    scored_total = 0
    divergences = []
    test_runs = {o.run for o in test_outputs}
    for o in good:
        if o.divergence is not None:
            divergences.append(o.divergence)
        split = "test" if o.run in test_runs else "train"
        n_scored = n_correct = fa = md = 0
        for packet_id, source, psi, r_by_node, prox_by_node in o.rows:
            verdict = decide(psi, threshold)
            trace.append(
                TraceRow(
                    run=o.run,
                    packet_id=packet_id,
                    true_source=source,
                    psi=psi,
                    verdict=verdict,
                    split=split,
                    r_values=r_by_node,
                    proximities=prox_by_node,
                )
            )
            for nid in sorted(r_by_node):
                if r_by_node[nid] is not None:
                    beliefs.append(
                        (o.run, packet_id, nid, r_by_node[nid], prox_by_node.get(nid))
                    )
            if split != "test":
                continue
            n_scored += 1
            label = AUTHENTIC if source == ROLE_LEGITIMATE else ATTACK
            test_scores.append((psi, label))
            if source == ROLE_LEGITIMATE and verdict == VERDICT_FAKE:
                fa += 1
            elif source == ROLE_ATTACKER and verdict == VERDICT_AUTHENTIC:
                md += 1
            else:
                n_correct += 1
        if split == "test":
            per_run.append(
                RunScore(run=o.run, n_scored=n_scored, n_correct=n_correct, fa_count=fa, md_count=md)
            )
            fa_total += fa
            md_total += md
            correct_total += n_correct
            scored_total += n_scored

    aggregate = correct_total / scored_total if scored_total else float("nan")
    mean_div = float(np.mean(divergences)) if divergences else 0.0

    roc = None
    bound = None
    try:
        roc = roc_from_scores(test_scores)
    except UwauthError:
        pass
    if mean_div > 0.0:
        bound = fa_md_bound(mean_div, np.linspace(0.005, 0.995, 100))

    histogram = _class_histograms(test_scores)
    return RunReport(
        config=cfg,
        threshold=float(threshold),
        per_run=per_run,
        aggregate_accuracy=aggregate,
        fa_count=fa_total,
        md_count=md_total,
        trace=trace,
        beliefs=beliefs,
        histogram=histogram,
        roc=roc,
        bound=bound,
        mean_divergence=mean_div,
        excluded_runs=excluded,
        n_test_packets=scored_total,
    )


def _safe_run(cfg: ExperimentConfig, run: int) -> _RunOutput:
    try:
        return run_single(cfg, run)
    except ConfigError:
        raise
    except UwauthError as exc:  # module errors exclude the run, not the experiment
        return _RunOutput(run=run, rows=[], divergence=0.0, node_ids=[], error=str(exc))


def _run_star(args) -> _RunOutput:
    return _safe_run(*args)


def _class_histograms(scores) -> dict:
    """Per-class histograms of the decision index min-max normalized to [-1, 1]."""
    out = {}
    for label in (AUTHENTIC, ATTACK):
        vals = np.array([s for s, lab in scores if lab == label], dtype=float)
        if vals.size == 0:
            out[label] = (np.linspace(-1, 1, HISTOGRAM_BINS + 1), np.zeros(HISTOGRAM_BINS, dtype=int))
            continue
        lo, hi = float(np.min(vals)), float(np.max(vals))
        normed = np.zeros_like(vals) if hi == lo else 2.0 * (vals - lo) / (hi - lo) - 1.0
        counts, edges = np.histogram(normed, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
        out[label] = (edges, counts)
    return out


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def emit_outputs(report: RunReport, out_dir) -> list:
    """Write the experiment's CSV outputs plus a metadata echo; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = report.config
    node_ids = sorted(
        {nid for row in report.trace for nid in row.r_values}
    )
    paths = []

    def path_of(name):
        p = os.path.join(out_dir, name)
        paths.append(p)
        return p

    with open(path_of("trace.csv"), "w", encoding="utf-8", newline="") as fh:
        cols = ["run", "packet_id", "true_source", "psi", "verdict", "split"] + [
            f"r_{nid}" for nid in node_ids
        ]
        fh.write(",".join(cols) + "\n")
        for row in report.trace:
            cells = [
                str(row.run),
                str(row.packet_id),
                row.true_source,
                _fmt(row.psi),
                row.verdict,
                row.split,
            ] + [_fmt(row.r_values.get(nid)) for nid in node_ids]
            fh.write(",".join(cells) + "\n")

    with open(path_of("beliefs.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("run,packet_id,node_id,r_value,mean_proximity\n")
        for run, packet_id, nid, r, prox in report.beliefs:
            fh.write(f"{run},{packet_id},{nid},{_fmt(r)},{_fmt(prox)}\n")

    with open(path_of("roc.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("lambda,p_fa,p_tp\n")
        if report.roc is not None:
            for lam, fa, tp in zip(report.roc.lambdas, report.roc.p_fa, report.roc.p_tp):
                fh.write(f"{_fmt(float(lam))},{_fmt(float(fa))},{_fmt(float(tp))}\n")

    with open(path_of("bound.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("p_fa,p_tp_bound,kl\n")
        if report.bound is not None:
            for fa, tp in zip(report.bound.p_fa, report.bound.p_tp):
                fh.write(f"{_fmt(float(fa))},{_fmt(float(tp))},{_fmt(report.bound.kl)}\n")

    with open(path_of("histogram.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("true_source,bin_left,bin_right,count\n")
        for label in (AUTHENTIC, ATTACK):
            edges, counts = report.histogram[label]
            for i, count in enumerate(counts):
                fh.write(
                    f"{label},{_fmt(float(edges[i]))},{_fmt(float(edges[i + 1]))},{int(count)}\n"
                )

    with open(path_of("summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,value\n")
        rows = [
            ("aggregate_accuracy", report.aggregate_accuracy),
            ("threshold", report.threshold),
            ("fa_count", report.fa_count),
            ("md_count", report.md_count),
            ("test_packets", report.n_test_packets),
            ("test_runs", len(report.per_run)),
            ("excluded_runs", report.excluded_runs),
            ("mean_divergence_nats", report.mean_divergence),
        ]
        for key, value in rows:
            fh.write(f"{key},{_fmt(value)}\n")

    with open(path_of("meta.txt"), "w", encoding="utf-8") as fh:
        fh.write("uwauth experiment metadata\n")
        fh.write(f"uwauth_version: {__version__}\n")
        fh.write(f"python: {platform.python_version()}\n")
        fh.write(f"numpy: {np.__version__}\n")
        fh.write(f"master_seed: {cfg.master_seed}\n")
        fh.write(f"threshold: {_fmt(report.threshold)}\n")
        fh.write(f"excluded_runs: {report.excluded_runs}\n")
        fh.write("config:\n")
        fh.write(json.dumps(cfg.as_dict(), indent=2, sort_keys=True))
        fh.write("\n")
    return paths
