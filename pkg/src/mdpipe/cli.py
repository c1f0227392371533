"""Command-line entry point: ``mdpipe <subcommand> ...``.

Errors go to stderr as one JSON line ``{"error": ..., "type": ...}``; the exit
status is 2 for usage errors and 1 for everything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from dataclasses import replace
from pathlib import Path

from mdpipe.audio import read_wav, write_wav
from mdpipe.cluster import (
    PCAProjector,
    load_embeddings,
    pairwise_report,
    pairwise_report_from_embeddings,
)
from mdpipe.frontend import (
    FrontendConfig,
    NormStats,
    accumulate_norm_stats,
    logmel,
    normalize,
    stack_and_subsample,
    write_lmfb,
)
from mdpipe.manifest import dataset_from_records, domain_stats, format_domain_stats, load_manifest
from mdpipe.perturb.codec import default_backend
from mdpipe.perturb.resample import resample
from mdpipe.pipeline import (
    FeatureFileSink,
    PerturbationPools,
    PerturbationTrace,
    apply_trace,
    load_policy,
    run_pipeline,
    sample_perturbation,
    utterance_rng,
)
from mdpipe.queue import FeatureQueue
from mdpipe.roomsim import generate_config_pool, save_config_pool

logger = logging.getLogger("mdpipe")


class UsageError(Exception):
    pass


def _load_dataset(paths):
    records = []
    for p in paths:
        records.extend(load_manifest(p))
    return dataset_from_records(records)


def _resolve_seed(seed, fallback=None) -> int:
    if seed is not None:
        return seed
    if fallback is not None:
        return fallback
    auto = secrets.randbits(32)
    logger.warning("no --seed given; using auto-generated seed %d", auto)
    return auto


def _load_16k(path):
    return resample(read_wav(path), 16000)


def cmd_gen_configs(args) -> None:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    seed = _resolve_seed(args.seed)
    try:
        save_config_pool(args.out, generate_config_pool(seed, args.count))
    except OSError as e:
        raise OSError(f"cannot write {args.out}: {e.strerror or e}") from None
    Path(str(args.out) + ".meta.json").write_text(json.dumps({"seed": seed, "count": args.count}) + "\n")


def cmd_augment(args) -> None:
    policy = load_policy(args.policy)
    dataset = _load_dataset(args.manifest)
    policy.check_dataset(dataset)
    pools = PerturbationPools.from_policy(policy)
    backend = default_backend()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.replay:
        with open(args.replay, encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        traces = {t["id"]: PerturbationTrace.from_json(t) for t in lines if "header" not in t}
        by_id = {r.id: r for r in dataset.records}
        for uid, trace in traces.items():
            if uid not in by_id:
                raise KeyError(f"trace references unknown utterance {uid!r}")
            out = apply_trace(read_wav(by_id[uid].audio_path), trace, pools, backend)
            write_wav(out_dir / f"{uid}.wav", out)
        return

    seed = _resolve_seed(args.seed, policy.master_seed)
    trace_path = Path(args.traces) if args.traces else out_dir / "traces.jsonl"
    with open(trace_path, "w", encoding="utf-8") as log:
        header = {"seed": seed, "policy": str(args.policy), "codec_backend": backend.name}
        log.write(json.dumps({"header": header}) + "\n")
        for rec in dataset.records:
            trace = sample_perturbation(rec, policy, utterance_rng(seed, rec.id, 0), pools)
            out = apply_trace(read_wav(rec.audio_path), trace, pools, backend)
            write_wav(out_dir / f"{rec.id}.wav", out)
            log.write(json.dumps(trace.to_json()) + "\n")


def cmd_featurize(args) -> None:
    config = FrontendConfig()
    dataset = _load_dataset(args.manifest)
    if args.stats and args.fit_stats:
        raise UsageError("--stats and --fit-stats are mutually exclusive")
    stats = None
    if args.fit_stats:
        stats = accumulate_norm_stats(logmel(_load_16k(r.audio_path), config) for r in dataset.records)
        stats.save(args.fit_stats)
    elif args.stats:
        stats = NormStats.load(args.stats)
    out_dir = Path(args.out_dir)
    for rec in dataset.records:
        feats = logmel(_load_16k(rec.audio_path), config)
        if stats is not None:
            feats = normalize(feats, stats)
        if not args.raw:
            feats = stack_and_subsample(feats, config)
        write_lmfb(out_dir / f"{rec.id}.lmfb", feats)


def cmd_pipeline(args) -> None:
    policy = load_policy(args.policy)
    seed = _resolve_seed(args.seed, policy.master_seed)
    if seed != policy.master_seed:
        policy = replace(policy, master_seed=seed)
    dataset = _load_dataset(args.manifest)
    stats = NormStats.load(args.stats) if args.stats else None
    queue = FeatureQueue(args.capacity)
    sink = FeatureFileSink(args.out_dir) if args.out_dir else None
    try:
        report = run_pipeline(
            dataset,
            policy,
            FrontendConfig(),
            workers=args.workers,
            queue=queue,
            epochs=args.epochs,
            consumer=sink,
            stats=stats,
            iid=args.iid,
        )
    finally:
        if sink is not None:
            sink.close()
    out = {"seed": seed, **report.to_json()}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)


def cmd_analyze(args) -> None:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    seed = _resolve_seed(args.seed)
    if args.embeddings:
        report = pairwise_report_from_embeddings(load_embeddings(args.embeddings), args.target, args.n, seed)
    else:
        dataset = _load_dataset(args.manifest)
        projector = None
        if args.projector:
            projector = PCAProjector.from_json(json.loads(Path(args.projector).read_text()))
        config = FrontendConfig()
        report = pairwise_report(
            dataset, args.target, args.n, seed, lambda r: logmel(_load_16k(r.audio_path), config), projector
        )
    sys.stdout.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())


def cmd_stats(args) -> None:
    print(format_domain_stats(domain_stats(_load_dataset(args.manifest))))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdpipe", description="Multidomain speech training data pathway")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-configs", help="pre-generate a pool of room/noise configurations")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_configs)

    a = sub.add_parser("augment", help="write perturbed WAVs and a replayable trace log")
    a.add_argument("--manifest", action="append", required=True)
    a.add_argument("--policy", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--traces", help="trace log path (default <out-dir>/traces.jsonl)")
    a.add_argument("--replay", help="re-apply a previously written trace log")
    a.set_defaults(func=cmd_augment)

    f = sub.add_parser("featurize", help="write LMFB feature files")
    f.add_argument("--manifest", action="append", required=True)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--raw", action="store_true", help="128-dim logmel at 100 Hz, no stacking")
    f.add_argument("--stats", help="normalize with stats from this JSON file")
    f.add_argument("--fit-stats", help="fit stats on the manifest, save here, and normalize")
    f.set_defaults(func=cmd_featurize)

    pl = sub.add_parser("pipeline", help="run the asynchronous perturb+featurize pipeline")
    pl.add_argument("--manifest", action="append", required=True)
    pl.add_argument("--policy", required=True)
    pl.add_argument("--epochs", type=int, default=1)
    pl.add_argument("--workers", type=int, default=1)
    pl.add_argument("--capacity", type=int, default=64)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--stats")
    pl.add_argument("--out-dir", help="feature-file sink directory")
    pl.add_argument("--report", help="write the run report JSON here (default stdout)")
    pl.add_argument("--iid", action="store_true", help="sample utterances with replacement")
    pl.set_defaults(func=cmd_pipeline)

    an = sub.add_parser("analyze", help="pairwise silhouette / cluster-similarity report")
    an.add_argument("--manifest", action="append")
    an.add_argument("--embeddings", help="JSONL embeddings to use instead of the built-in embedder")
    an.add_argument("--projector", help="JSON projector (mean, components); fitted on the sample if omitted")
    an.add_argument("--target", required=True)
    an.add_argument("--n", type=int, default=50)
    an.add_argument("--seed", type=int)
    an.add_argument("--csv")
    an.set_defaults(func=cmd_analyze)

    st = sub.add_parser("stats", help="per-domain utterance counts and hours")
    st.add_argument("--manifest", action="append", required=True)
    st.set_defaults(func=cmd_stats)
    return p


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": str(exc), "type": type(exc).__name__}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "analyze" and not (args.manifest or args.embeddings):
        return _fail(UsageError("analyze needs --manifest or --embeddings"), 2)
    try:
        args.func(args)
    except UsageError as e:
        return _fail(e, 2)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        return _fail(e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
