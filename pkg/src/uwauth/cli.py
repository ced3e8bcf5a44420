"""Command-line interface.

Subcommands:

    simulate   full Monte-Carlo pipeline, writes trace/roc/bound/histogram/summary CSVs
    roc        threshold sweep over all runs, writes roc.csv and bound.csv
    em-bench   mixture-recovery benchmark of the EM estimator
    features   ingest a PDP CSV, emit feature series and selection statistics
    bound      KL/bound curves for explicit parameter files

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, ggmix
from .analysis import fa_md_bound, kl_gg_numeric, roc_from_scores, total_divergence
from .config import load_config
from .errors import ConfigError, CsvParseError, UwauthError
from .experiment import emit_outputs, run_experiment
from .features import (
    ALL_FEATURE_IDS,
    FeatureSeries,
    calibrate_threshold,
    extract_packet_features,
    jain_index,
    spatial_metric,
)
from .ggmix import GGParams

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _add_common_experiment_args(p):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--runs", type=int, default=None, help="override run count")
    p.add_argument("--threads", type=int, default=1, help="worker processes")


def _load_experiment_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.runs is not None:
        cfg.runs = args.runs
    cfg.validate()
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_experiment_config(args)
    report = run_experiment(cfg, threads=args.threads)
    paths = emit_outputs(report, args.out)
    print(f"accuracy {report.aggregate_accuracy:.4f} over {report.n_test_packets} test packets")
    print(f"threshold {_fmt(report.threshold)}  fa {report.fa_count}  md {report.md_count}")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_roc(args) -> int:
    cfg = _load_experiment_config(args)
    # Sweep over every run's scores: force the fixed mode so no split happens.
    cfg.decision.mode = "fixed"
    cfg.decision.fixed_lambda = 0.0
    report = run_experiment(cfg, threads=args.threads)
    paths = emit_outputs(report, args.out)
    print(f"mean per-packet divergence {report.mean_divergence:.3f} nats")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_em_bench(args) -> int:
    rows = []
    master = np.random.SeedSequence(args.seed)
    for i, child in enumerate(master.spawn(args.seeds)):
        rng = np.random.default_rng(child)
        truth = [
            GGParams(mu=2.0, sigma=1.0, beta=2.0),
            GGParams(mu=2.0 + args.separation, sigma=1.0, beta=2.0),
        ]
        history = []
        labels = []
        for pid in range(args.packets):
            comp = pid % 2
            labels.append(comp)
            history.append(
                ggmix.PacketSamples(
                    packet_id=pid,
                    values=ggmix.gg_sample(truth[comp], args.samples, rng),
                )
            )
        all_values = np.concatenate([p.values for p in history])
        init = ggmix.kmeans_moment_init(all_values)
        est = ggmix.em_fit(history, init)
        post_correct = np.mean(
            [
                (est.posteriors[pid] >= 0.5) == (labels[pid] == _component_of_low_mu(est))
                for pid in range(args.packets)
            ]
        )
        rows.append((i, est.iterations, float(post_correct)))
        print(f"seed {i}: iterations {est.iterations}, packet assignment {post_correct:.3f}")
    iters = sorted(r[1] for r in rows)
    print(f"median iterations {iters[len(iters) // 2]}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "em_bench.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("seed,iterations,packet_assignment\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]},{_fmt(r[2])}\n")
        print(f"wrote {path}")
    return EXIT_OK


def _component_of_low_mu(est) -> int:
    return 0 if est.components[0].omega.mu <= est.components[1].omega.mu else 1


def _cmd_features(args) -> int:
    from .channel import ingest_pdp_csv

    grouped = ingest_pdp_csv(args.pdp)
    if not grouped:
        print("no profiles in input")
        return EXIT_OK
    feature_ids = tuple(int(f) for f in args.features.split(","))
    bad = [f for f in feature_ids if f not in ALL_FEATURE_IDS]
    if bad:
        raise ConfigError(f"unknown feature ids {bad}")
    os.makedirs(args.out, exist_ok=True)

    series: dict = {}
    for node_id, packets in grouped.items():
        for packet_id, profiles in packets.items():
            noise = profiles[0].noise_floor
            threshold = args.threshold if args.threshold else calibrate_threshold(noise)
            if threshold <= 0.0:
                threshold = 1e-300
            feats = extract_packet_features(
                profiles, threshold, args.alpha, feature_ids=feature_ids
            )
            for fid, values in feats.items():
                bucket = series.setdefault((fid, node_id), [])
                for j, v in enumerate(values):
                    bucket.append((packet_id, profiles[min(j, len(profiles) - 1)].symbol_time, float(v)))

    feat_path = os.path.join(args.out, "features.csv")
    with open(feat_path, "w", encoding="utf-8") as fh:
        fh.write("feature_id,node_id,packet_id,time_s,value\n")
        for (fid, node_id), samples in sorted(series.items()):
            for packet_id, t, v in samples:
                fh.write(f"{fid},{node_id},{packet_id},{_fmt(t)},{_fmt(v)}\n")
    print(f"wrote {feat_path}")

    # Spatial-dependency analysis: one score per feature over receiver pairs,
    # series truncated to a common length, plus per-(feature, node) Jain index.
    analysis_path = os.path.join(args.out, "feature_selection.csv")
    with open(analysis_path, "w", encoding="utf-8") as fh:
        fh.write("feature_id,node_id,jain_index,spatial_metric\n")
        for fid in feature_ids:
            per_node = {
                nid: [v for _, _, v in series.get((fid, nid), [])]
                for nid in grouped
            }
            per_node = {nid: vals for nid, vals in per_node.items() if vals}
            rho = ""
            if len(per_node) >= 2:
                n_common = min(len(v) for v in per_node.values())
                if n_common >= 2:
                    value = spatial_metric(
                        [np.asarray(v[:n_common]) for v in per_node.values()]
                    )
                    if value is not None:
                        rho = _fmt(value)
            for nid, vals in sorted(per_node.items()):
                ji = jain_index(np.asarray(vals))
                fh.write(f"{fid},{nid},{'' if ji is None else _fmt(ji)},{rho}\n")
    print(f"wrote {analysis_path}")
    return EXIT_OK


def _parse_gg(obj, where: str) -> GGParams:
    try:
        return GGParams(mu=float(obj["mu"]), sigma=float(obj["sigma"]), beta=float(obj["beta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected mu/sigma/beta numbers ({exc})") from None


def _cmd_bound(args) -> int:
    try:
        with open(args.params, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"parameter file not found: {args.params}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parameter file is not valid JSON: {exc}") from None
    pairs = []
    for i, entry in enumerate(doc.get("pairs", [])):
        pairs.append(
            (
                _parse_gg(entry.get("omega0", {}), f"pairs[{i}].omega0"),
                _parse_gg(entry.get("omega1", {}), f"pairs[{i}].omega1"),
            )
        )
    if not pairs:
        raise ConfigError("parameter file carries no pairs")
    samples = int(doc.get("samples_per_packet", 1))
    div = total_divergence(pairs, samples)
    print(f"per-packet divergence {div:.6f} nats over {len(pairs)} pairs, |T| = {samples}")
    curve = fa_md_bound(div, np.linspace(0.005, 0.995, args.grid))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bound.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("p_fa,p_tp_bound,kl\n")
        for fa, tp in zip(curve.p_fa, curve.p_tp):
            fh.write(f"{_fmt(float(fa))},{_fmt(float(tp))},{_fmt(curve.kl)}\n")
    print(f"wrote {path}")
    kl_path = os.path.join(args.out, "pair_kl.csv")
    with open(kl_path, "w", encoding="utf-8") as fh:
        fh.write("pair,kl_nats\n")
        for i, (w0, w1) in enumerate(pairs):
            fh.write(f"{i},{_fmt(kl_gg_numeric(w0, w1))}\n")
    print(f"wrote {kl_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwauth",
        description="Cooperative channel-feature authentication simulator",
    )
    parser.add_argument("--version", action="version", version=f"uwauth {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the full pipeline")
    _add_common_experiment_args(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("roc", help="sweep thresholds and emit ROC plus KL bound")
    _add_common_experiment_args(p)
    p.set_defaults(func=_cmd_roc)

    p = sub.add_parser("em-bench", help="mixture recovery benchmark")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--packets", type=int, default=40)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--separation", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_em_bench)

    p = sub.add_parser("features", help="extract features from a PDP CSV")
    p.add_argument("--pdp", required=True, help="input PDP CSV")
    p.add_argument("--out", default="out")
    p.add_argument("--features", default="1,2,4,5,6")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.0, help="0 = calibrate from noise floor")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("bound", help="KL/bound curves from a parameter file")
    p.add_argument("--params", required=True, help="JSON file with GG parameter pairs")
    p.add_argument("--out", default="out")
    p.add_argument("--grid", type=int, default=100)
    p.set_defaults(func=_cmd_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, CsvParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UwauthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
