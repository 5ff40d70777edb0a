"""Command-line interface.

JSON results go to stdout, logs to stderr. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import cluster as cl
from .csl import DENOMINATOR_MODES, CslTrainConfig, train_csl
from .dataio import load_features, read_json, read_label_tsv, read_manifest, read_trials, write_json
from .encoder import EncoderConfig, read_checkpoint, write_checkpoint
from .metrics import DcfParams, evaluate_scores, nmi, score_trials
from .pipeline import (
    ConfigMismatch,
    PipelineError,
    from_mapping,
    compare_rounds,
    load_config,
    read_reports,
    resume,
    run_pipeline,
)
from .pseudotrain import PseudoTrainConfig, train_pseudo
from .synthgen import SynthConfig, generate_dataset, write_dataset

log = logging.getLogger("spkboot")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stage_config(path: str | None) -> dict:
    """Read ``{"encoder": ..., "csl": ..., "pseudo": ...}`` blocks; other keys are ignored."""
    return read_json(path) if path else {}


def _encoder_config(block: dict | None, manifest) -> EncoderConfig:
    block = dict(block or {})
    if "input_dim" not in block:
        first = load_features(type(manifest)(manifest.entries[:1], manifest.root))
        block["input_dim"] = next(iter(first.values())).shape[1]
    return from_mapping(EncoderConfig, block)


def _write_jsonl(rows, path: Path) -> None:
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_gen_data(args) -> None:
    cfg = SynthConfig(num_speakers=args.speakers, utts_per_speaker=args.utts,
                      groups_per_speaker=args.groups_per_speaker, frames_range=(args.frames_min, args.frames_max),
                      feature_dim=args.dim, session_noise_std=args.session_noise,
                      frame_noise_std=args.frame_noise, seed=args.seed, session_rank=args.session_rank,
                      eval_speakers=args.eval_speakers, eval_utts_per_speaker=args.eval_utts)
    log.info("gen-data config: %s", json.dumps(dataclasses.asdict(cfg), sort_keys=True))
    ds = generate_dataset(cfg)
    paths = write_dataset(ds, args.out)
    _emit({"utterances": len(ds.manifest), "speakers": cfg.num_speakers, "trials": len(ds.trials),
           **{k: str(v) for k, v in paths.items()}})


def cmd_train_csl(args) -> None:
    manifest = read_manifest(args.manifest)
    blocks = _stage_config(args.config)
    csl_block = dict(blocks.get("csl", {}))
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("tau", "temperature"), ("lr", "lr"),
                      ("denominator_mode", "denominator_mode"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            csl_block[key] = getattr(args, flag)
    cfg = from_mapping(CslTrainConfig, csl_block)
    enc = _encoder_config(blocks.get("encoder"), manifest)
    log.info("train-csl config: %s", json.dumps({"csl": dataclasses.asdict(cfg),
                                                  "encoder": dataclasses.asdict(enc)}, sort_keys=True))
    result = train_csl(manifest, load_features(manifest), cfg, enc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(result.params, out / "checkpoint.enck")
    _write_jsonl(result.log, out / "train_log.jsonl")
    _emit({"checkpoint": str(out / "checkpoint.enck"), "steps": len(result.log),
           "final_loss": result.log[-1]["loss"] if result.log else None})


def cmd_cluster(args) -> None:
    manifest = read_manifest(args.manifest)
    params = read_checkpoint(args.checkpoint)
    log.info("cluster config: k=%d p=%g S=%d seed=%d", args.k, args.p, args.min_cluster_size, args.seed)
    emb = cl.embed_all(params, manifest, load_features(manifest))
    group_emb, _, member = cl.average_by_group(emb, manifest)
    model = cl.broadcast(cl.kmeans(group_emb, args.k, seed=args.seed), member)
    labels, report = cl.purify(model, args.p, args.min_cluster_size, manifest.utt_ids, args.round)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cl.write_pseudo_labels(labels, report, out, k=args.k, p=args.p, min_size=args.min_cluster_size)
    _emit(read_json(out / "purge_report.json"))


def cmd_train_pseudo(args) -> None:
    manifest = read_manifest(args.manifest)
    labels = cl.read_pseudo_labels(args.labels)
    blocks = _stage_config(args.config)
    block = dict(blocks.get("pseudo", {}))
    if args.seed is not None:
        block["seed"] = args.seed
    cfg = from_mapping(PseudoTrainConfig, block)
    enc = _encoder_config(blocks.get("encoder"), manifest)
    log.info("train-pseudo config: %s", json.dumps({"pseudo": dataclasses.asdict(cfg),
                                                     "encoder": dataclasses.asdict(enc)}, sort_keys=True))
    result = train_pseudo(manifest, load_features(manifest), labels, enc, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(result.params, out / "checkpoint.enck")
    _write_jsonl(result.log, out / "train_log.jsonl")
    _emit({"checkpoint": str(out / "checkpoint.enck"), "epochs": len(result.log),
           "num_classes": labels.num_classes, "final": result.log[-1] if result.log else None})


def cmd_evaluate(args) -> None:
    manifest = read_manifest(args.manifest)
    params = read_checkpoint(args.checkpoint)
    features = load_features(manifest)
    trials = read_trials(args.trials)
    log.info("evaluate: checkpoint=%s trials=%d raw_dcf=%s", args.checkpoint, len(trials), args.raw_dcf)
    st = score_trials(params, manifest, features, trials)
    metrics = evaluate_scores(st, DcfParams(normalized=not args.raw_dcf))
    if args.truth:
        # NMI of a k-means partition (k = number of true speakers) against the truth.
        truth = read_label_tsv(args.truth)
        missing = [u for u in manifest.utt_ids if u not in truth]
        if missing:
            raise ValueError(f"{len(missing)} utterances have no label in {args.truth}, e.g. {missing[0]}")
        y = [truth[u] for u in manifest.utt_ids]
        emb = cl.embed_all(params, manifest, features)
        model = cl.kmeans(emb, len(set(y)), seed=0)
        metrics["nmi"] = nmi(y, model.assignments)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(metrics, out / "metrics.json")
    with (out / "scores.txt").open("w", encoding="utf-8") as f:
        for t, s in zip(trials, st.scores):
            f.write(f"{1 if t.is_target else 0} {s:.6f} {t.enroll_id} {t.test_id}\n")
    _emit(metrics)


def cmd_run_pipeline(args) -> None:
    cfg = load_config(args.config)
    reports = run_pipeline(cfg, args.out)
    _emit([r.to_json() for r in reports])


def cmd_resume(args) -> None:
    reports = resume(args.out)
    _emit([r.to_json() for r in reports])


def cmd_report(args) -> None:
    reports = read_reports(args.out)
    if not reports:
        raise FileNotFoundError(f"no completed rounds in {args.out}")
    payload = {"reports": [r.to_json() | {"wall_time_s": r.wall_time_s} for r in reports]}
    if len(reports) >= 2 and reports[0].eer is not None and reports[-1].eer is not None:
        payload["summary"] = compare_rounds(reports)
    _emit(payload)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="spkboot", description=__doc__, formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread limit (default: library default)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-speaker dataset", formatter_class=fmt)
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True, help="utterances per speaker")
    p.add_argument("--groups-per-speaker", type=int, default=4)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--frames-min", type=int, default=20)
    p.add_argument("--frames-max", type=int, default=40)
    p.add_argument("--session-noise", type=float, default=0.1)
    p.add_argument("--frame-noise", type=float, default=0.5)
    p.add_argument("--session-rank", type=int, default=None, help="rank of the session subspace (default: full)")
    p.add_argument("--eval-speakers", type=int, default=0, help="held-out speakers for trials")
    p.add_argument("--eval-utts", type=int, default=None, help="utterances per held-out speaker")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-csl", help="contrastive training (round 0)", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON with optional 'encoder' and 'csl' blocks")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--denominator-mode", choices=DENOMINATOR_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_csl)

    p = sub.add_parser("cluster", help="k-means pseudo labels with purification", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--p", type=float, default=0.0, help="fraction of least-confident items dropped")
    p.add_argument("--min-cluster-size", type=int, default=1)
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-pseudo", help="cross-entropy training on pseudo labels", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", help="JSON with optional 'encoder' and 'pseudo' blocks")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_pseudo)

    p = sub.add_parser("evaluate", help="cosine-score trials; EER and minDCF", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--truth", help="utt_id<TAB>speaker file; adds NMI of a k-means partition")
    p.add_argument("--raw-dcf", action="store_true", help="report unnormalised minDCF")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-pipeline", help="contrastive round plus pseudo-label rounds", formatter_class=fmt)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("resume", help="continue an interrupted pipeline", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="round reports and trend summary", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except (ValueError, KeyError, FileNotFoundError, ConfigMismatch, PipelineError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
