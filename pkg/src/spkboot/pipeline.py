"""The iterative framework: contrastive round 0, then embed -> cluster -> purify -> retrain rounds.

Output layout::

    out/config.json            resolved configuration (hashed into status.json)
    out/status.json            {"completed_rounds": [...], "config_hash": ..., "invalid_round": ...}
    out/round_<n>/checkpoint.enck
    out/round_<n>/train_log.jsonl
    out/round_<n>/report.json
    out/round_<n>/timing.json
    out/round_<n>/pseudo_labels.tsv, purge_report.json   (n >= 1)

Every round reads the previous round's encoder back from its checkpoint file,
so a resumed run and an uninterrupted run see exactly the same inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import cluster as cl
from .csl import CslTrainConfig, train_csl
from .dataio import Manifest, load_features, read_json, read_label_tsv, read_manifest, read_trials, write_json
from .encoder import EncoderConfig, EncoderParams, read_checkpoint, write_checkpoint
from .metrics import DcfParams, evaluate_scores, nmi, score_trials
from .pseudotrain import PseudoTrainConfig, label_noise_rate, train_pseudo
from .synthgen import AugmentConfig

log = logging.getLogger(__name__)

_CSL, _KMEANS, _PSEUDO = 1, 2, 3


class PipelineError(RuntimeError):
    def __init__(self, stage: str, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index}, stage {stage!r} failed: {cause}")
        self.stage = stage
        self.round_index = round_index


class ConfigMismatch(RuntimeError):
    pass


@dataclass
class RoundConfig:
    round_index: int
    k: int
    p: float
    S: int
    pseudo: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.round_index < 1:
            raise ValueError("round_index must be >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("p must be in [0, 1)")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2")


@dataclass
class EvalConfig:
    trials: str | None = None
    manifest: str | None = None   # defaults to the training manifest
    truth: str | None = None      # true speakers of the training manifest, for NMI
    raw_dcf: bool = False


@dataclass
class PipelineConfig:
    manifest: str
    encoder: EncoderConfig
    csl: CslTrainConfig = field(default_factory=CslTrainConfig)
    pseudo: PseudoTrainConfig = field(default_factory=PseudoTrainConfig)
    rounds: list[RoundConfig] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    kmeans_max_iters: int = 100
    kmeans_rel_tol: float = 1e-4
    normalize_before_kmeans: bool = False

    def validate(self) -> None:
        if not self.rounds:
            raise ValueError("pipeline needs at least one round")
        for i, r in enumerate(self.rounds, start=1):
            r.validate()
            if r.round_index != i:
                raise ValueError(f"rounds must be numbered 1..R in order, got {r.round_index} at position {i}")
        self.encoder.validate()
        self.csl.validate()
        self.pseudo.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- config (de)serialisation ----------------------------------------------------

def from_mapping(cls, data: Mapping[str, Any]):
    """Dataclass from a JSON mapping; nested dataclasses and tuple fields handled, unknown keys rejected."""
    if not isinstance(data, Mapping):
        raise ValueError(f"expected an object for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = str(fields[name].type)
        nested = {"AugmentConfig": AugmentConfig, "EncoderConfig": EncoderConfig,
                  "CslTrainConfig": CslTrainConfig, "PseudoTrainConfig": PseudoTrainConfig,
                  "EvalConfig": EvalConfig}.get(ftype)
        if nested is not None:
            value = from_mapping(nested, value)
        elif ftype.startswith("tuple"):
            value = tuple(value)
        elif ftype.startswith("list[RoundConfig]"):
            value = [from_mapping(RoundConfig, r) for r in value]
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path | None = None) -> PipelineConfig:
    """Parse a pipeline config; relative paths are resolved against ``base_dir``."""
    cfg = from_mapping(PipelineConfig, data)
    if base_dir is not None:
        base = Path(base_dir)
        cfg.manifest = str((base / cfg.manifest).resolve())
        for name in ("trials", "manifest", "truth"):
            value = getattr(cfg.eval, name)
            if value is not None:
                setattr(cfg.eval, name, str((base / value).resolve()))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    return config_from_dict(read_json(path), base_dir=path.parent)


def pseudo_config_for(cfg: PipelineConfig, rc: RoundConfig) -> PseudoTrainConfig:
    base = dataclasses.asdict(cfg.pseudo)
    base.update(rc.pseudo)
    return from_mapping(PseudoTrainConfig, base)


def derive_seed(global_seed: int, round_index: int, purpose: int) -> int:
    return int(np.random.SeedSequence([global_seed, round_index, purpose]).generate_state(1)[0])


def default_rounds(k: int, n_rounds: int = 5) -> list[RoundConfig]:
    """Aggressive purification first, relaxed later (p from 0.6 down to 0.3, S from 8 to 6
    at full scale); here S is scaled to clusters of roughly ten utterances."""
    p_sched = [0.6, 0.4, 0.4, 0.4, 0.3]
    s_sched = [3, 3, 3, 2, 2]
    return [RoundConfig(i + 1, k, p_sched[min(i, 4)], s_sched[min(i, 4)]) for i in range(n_rounds)]


# -- reports -----------------------------------------------------------------------

@dataclass
class RoundReport:
    round_index: int
    n_utterances_in: int
    k: int | None
    K_surviving: int | None
    n_utterances_kept: int
    nmi_before_purify: float | None = None
    nmi_after_purify: float | None = None
    label_noise_rate: float | None = None
    eer: float | None = None
    min_dcf: float | None = None
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        # Wall time lives in timing.json so report.json stays byte-reproducible.
        d = dataclasses.asdict(self)
        d.pop("wall_time_s")
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any], wall_time_s: float = 0.0) -> "RoundReport":
        return cls(**d, wall_time_s=wall_time_s)


def _verdict(deltas: Sequence[float], lower_is_better: bool) -> str:
    if all(d == 0 for d in deltas):
        return "flat"
    better = [(d < 0) if lower_is_better else (d > 0) for d in deltas]
    worse = [(d > 0) if lower_is_better else (d < 0) for d in deltas]
    if all(better):
        return "improving"
    if all(worse):
        return "degrading"
    return "mixed"


_METRICS = {"eer": True, "min_dcf": True, "nmi_before_purify": False, "nmi_after_purify": False}


def compare_rounds(reports: Sequence[RoundReport | Mapping[str, Any]]) -> dict:
    """Per-metric deltas and monotonicity verdicts, plus the final-vs-first relative EER gain."""
    rows = [r.to_json() if isinstance(r, RoundReport) else dict(r) for r in reports]
    if len(rows) < 2:
        raise ValueError("need at least two round reports to compare")
    summary: dict[str, Any] = {"rounds": [r["round_index"] for r in rows], "metrics": {}}
    for name, lower in _METRICS.items():
        values = [r.get(name) for r in rows]
        present = [v for v in values if v is not None]
        if len(present) < 2:
            continue
        deltas = [b - a for a, b in zip(present[:-1], present[1:])]
        summary["metrics"][name] = {"values": present, "deltas": deltas, "verdict": _verdict(deltas, lower)}
    eers = [r.get("eer") for r in rows]
    if eers[0] is None or eers[-1] is None:
        raise ValueError("first and last reports must carry an EER")
    summary["relative_eer_gain"] = (eers[0] - eers[-1]) / eers[0] if eers[0] > 0 else 0.0
    return summary


# -- running -----------------------------------------------------------------------

@dataclass
class _Data:
    manifest: Manifest
    features: dict[str, np.ndarray]
    eval_manifest: Manifest | None = None
    eval_features: dict[str, np.ndarray] | None = None
    trials: list | None = None
    truth: dict[str, str] | None = None


def _load_data(cfg: PipelineConfig) -> _Data:
    manifest = read_manifest(cfg.manifest)
    data = _Data(manifest, load_features(manifest))
    if cfg.eval.trials:
        if cfg.eval.manifest and Path(cfg.eval.manifest).resolve() != Path(cfg.manifest).resolve():
            data.eval_manifest = read_manifest(cfg.eval.manifest)
            data.eval_features = load_features(data.eval_manifest)
        else:
            data.eval_manifest, data.eval_features = manifest, data.features
        data.trials = read_trials(cfg.eval.trials)
    if cfg.eval.truth:
        data.truth = read_label_tsv(cfg.eval.truth)
    return data


def _evaluate(params: EncoderParams, cfg: PipelineConfig, data: _Data, report: RoundReport) -> None:
    if data.trials is None:
        return
    st = score_trials(params, data.eval_manifest, data.eval_features, data.trials)
    metrics = evaluate_scores(st, DcfParams(normalized=not cfg.eval.raw_dcf))
    report.eer = metrics["eer"]
    report.min_dcf = metrics["min_dcf"]


def _write_log(rows: Sequence[Mapping], path: Path) -> None:
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _run_csl_round(cfg: PipelineConfig, data: _Data, rdir: Path) -> RoundReport:
    csl_cfg = dataclasses.replace(cfg.csl, seed=derive_seed(cfg.seed, 0, _CSL))
    result = train_csl(data.manifest, data.features, csl_cfg, cfg.encoder)
    write_checkpoint(result.params, rdir / "checkpoint.enck")
    _write_log(result.log, rdir / "train_log.jsonl")
    n = len(data.manifest)
    report = RoundReport(0, n, None, None, n)
    _evaluate(read_checkpoint(rdir / "checkpoint.enck"), cfg, data, report)
    return report


def _run_pseudo_round(cfg: PipelineConfig, rc: RoundConfig, data: _Data, prev: Path, rdir: Path,
                      stage: list[str]) -> RoundReport:
    stage[0] = "embed"
    params = read_checkpoint(prev / "checkpoint.enck")
    emb = cl.embed_all(params, data.manifest, data.features)
    if cfg.normalize_before_kmeans:
        emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    stage[0] = "cluster"
    group_emb, _, member = cl.average_by_group(emb, data.manifest)
    gmodel = cl.kmeans(group_emb, rc.k, seed=derive_seed(cfg.seed, rc.round_index, _KMEANS),
                       max_iters=cfg.kmeans_max_iters, rel_tol=cfg.kmeans_rel_tol)
    umodel = cl.broadcast(gmodel, member)
    stage[0] = "purify"
    labels, purge = cl.purify(umodel, rc.p, rc.S, data.manifest.utt_ids, rc.round_index)
    cl.write_pseudo_labels(labels, purge, rdir, k=rc.k, p=rc.p, min_size=rc.S)

    report = RoundReport(rc.round_index, len(data.manifest), rc.k, labels.num_classes, purge.n_kept)
    if data.truth is not None:
        truth = np.array([data.truth[u] for u in data.manifest.utt_ids])
        report.nmi_before_purify = nmi(truth, umodel.assignments)
        kept = purge.kept_index
        report.nmi_after_purify = nmi(truth[kept], umodel.assignments[kept])
        report.label_noise_rate = float(label_noise_rate(labels, data.truth))

    stage[0] = "train"
    pcfg = dataclasses.replace(pseudo_config_for(cfg, rc), seed=derive_seed(cfg.seed, rc.round_index, _PSEUDO))
    result = train_pseudo(data.manifest, data.features, labels, cfg.encoder, pcfg)
    write_checkpoint(result.params, rdir / "checkpoint.enck")
    _write_log(result.log, rdir / "train_log.jsonl")
    stage[0] = "evaluate"
    _evaluate(read_checkpoint(rdir / "checkpoint.enck"), cfg, data, report)
    return report


def _status_path(out: Path) -> Path:
    return out / "status.json"


def read_status(out: str | Path) -> dict:
    path = _status_path(Path(out))
    if not path.exists():
        return {"completed_rounds": [], "config_hash": None, "invalid_round": None}
    return read_json(path)


def read_reports(out: str | Path) -> list[RoundReport]:
    out = Path(out)
    reports = []
    for r in read_status(out)["completed_rounds"]:
        rdir = out / f"round_{r}"
        timing = read_json(rdir / "timing.json") if (rdir / "timing.json").exists() else {}
        reports.append(RoundReport.from_json(read_json(rdir / "report.json"), timing.get("wall_time_s", 0.0)))
    return reports


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path, stop_after: int | None = None) -> list[RoundReport]:
    """Run (or continue) the pipeline in ``out_dir``.

    Completed rounds recorded in ``status.json`` are skipped. ``stop_after``
    ends the run once that round index has completed, leaving a resumable
    directory behind.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise RuntimeError(f"another pipeline holds the lock on {out}") from exc
    try:
        return _run_locked(cfg, out, stop_after)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, out: Path, stop_after: int | None) -> list[RoundReport]:
    cfg_hash = cfg.hash()
    status = read_status(out)
    if status["config_hash"] is not None and status["config_hash"] != cfg_hash:
        raise ConfigMismatch("config hash mismatch: output directory was created with a different config")
    if status["config_hash"] is None:
        write_json(cfg.to_dict(), out / "config.json")
        status = {"completed_rounds": [], "config_hash": cfg_hash, "invalid_round": None}
        write_json(status, _status_path(out))

    log.info("pipeline config (seed %d): %s", cfg.seed, json.dumps(cfg.to_dict(), sort_keys=True))
    data = _load_data(cfg)
    done = set(status["completed_rounds"])
    for r in range(0, len(cfg.rounds) + 1):
        if stop_after is not None and r > stop_after:
            break
        if r in done:
            continue
        rdir = out / f"round_{r}"
        if rdir.exists():
            shutil.rmtree(rdir)
        rdir.mkdir()
        stage = ["csl" if r == 0 else "embed"]
        t0 = time.perf_counter()
        try:
            if r == 0:
                report = _run_csl_round(cfg, data, rdir)
            else:
                report = _run_pseudo_round(cfg, cfg.rounds[r - 1], data, out / f"round_{r - 1}", rdir, stage)
        except Exception as exc:
            status["invalid_round"] = r
            write_json(status, _status_path(out))
            raise PipelineError(stage[0], r, exc) from exc
        report.wall_time_s = time.perf_counter() - t0
        write_json(report.to_json(), rdir / "report.json")
        write_json({"wall_time_s": report.wall_time_s}, rdir / "timing.json")
        status["completed_rounds"] = sorted(done | {r})
        status["invalid_round"] = None
        done.add(r)
        write_json(status, _status_path(out))
        log.info("round %d done in %.1fs: %s", r, report.wall_time_s, json.dumps(report.to_json()))
    return read_reports(out)


def resume(out_dir: str | Path) -> list[RoundReport]:
    """Continue a pipeline from its stored config; a no-op when every round is complete."""
    out = Path(out_dir)
    status = read_status(out)
    if status["config_hash"] is None or not (out / "config.json").exists():
        raise FileNotFoundError(f"{out} holds no pipeline state to resume")
    cfg = config_from_dict(read_json(out / "config.json"))
    if cfg.hash() != status["config_hash"]:
        raise ConfigMismatch("config hash mismatch: stored config was edited since the run started")
    return run_pipeline(cfg, out)
