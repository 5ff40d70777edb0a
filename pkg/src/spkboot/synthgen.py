"""Synthetic multi-speaker datasets and feature-space augmentation.

Every utterance of speaker ``s`` in session (group) ``g`` has frames

    x_t = mu_s + o_g + e_t

with ``mu_s`` uniform on the unit sphere, ``o_g`` a gaussian session offset
shared by every utterance of the group and ``e_t`` per-frame gaussian noise.
Utterances of one group share their session offset, so two crops of the same
utterance agree on both speaker and session while utterances of the same
speaker recorded in different sessions do not.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    Manifest,
    ManifestEntry,
    Trial,
    NONTARGET,
    TARGET,
    write_features,
    write_label_tsv,
    write_manifest,
    write_trials,
)

MAX_UTTERANCES = 10_000_000
AUGMENT_MODES = ("noise_only", "channel_only", "both", "random_choice", "either")

# Stream tags keep every random quantity on its own independent RNG stream.
_SPEAKERS, _SESSIONS, _UTTS, _NUISANCE, _TRIALS = range(1, 6)


@dataclass
class SynthConfig:
    num_speakers: int = 50
    utts_per_speaker: int = 20
    groups_per_speaker: int = 4
    frames_range: tuple[int, int] = (20, 40)
    feature_dim: int = 20
    session_noise_std: float = 0.1
    frame_noise_std: float = 0.5
    seed: int = 0
    # Dimension of the subspace session offsets live in; None means isotropic.
    session_rank: int | None = None
    # Held-out speakers for verification trials (0 disables the eval split).
    eval_speakers: int = 0
    eval_utts_per_speaker: int | None = None

    def validate(self) -> None:
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")
        if self.utts_per_speaker < 2:
            raise ValueError("utts_per_speaker must be >= 2")
        if self.groups_per_speaker < 1:
            raise ValueError("groups_per_speaker must be >= 1")
        lo, hi = self.frames_range
        if lo < 4 or hi < lo:
            raise ValueError(f"frames_range must satisfy 4 <= min <= max, got {self.frames_range}")
        for name in ("session_noise_std", "frame_noise_std"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.session_rank is not None and not 1 <= self.session_rank <= self.feature_dim:
            raise ValueError("session_rank must be in [1, feature_dim]")
        if self.eval_speakers < 0:
            raise ValueError("eval_speakers must be >= 0")
        total = (self.num_speakers * self.utts_per_speaker
                 + self.eval_speakers * (self.eval_utts_per_speaker or self.utts_per_speaker))
        if total > MAX_UTTERANCES:
            raise ValueError(f"dataset would hold {total} utterances, limit is {MAX_UTTERANCES}")


@dataclass
class AugmentConfig:
    mode: str = "random_choice"
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    channel_scale_std: float = 0.2
    apply_prob: float = 0.6

    def validate(self) -> None:
        if self.mode not in AUGMENT_MODES:
            raise ValueError(f"unknown augment mode {self.mode!r}")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError("snr_db_range low must be <= high")
        if self.channel_scale_std < 0:
            raise ValueError("channel_scale_std must be >= 0")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be in [0, 1]")

    @classmethod
    def for_csl(cls) -> "AugmentConfig":
        # Contrastive training always augments with one of the three types.
        return cls(mode="random_choice", snr_db_range=(5.0, 20.0), apply_prob=1.0)

    @classmethod
    def for_pseudo(cls) -> "AugmentConfig":
        return cls(mode="either", snr_db_range=(0.0, 20.0), apply_prob=0.6)


@dataclass
class SynthDataset:
    manifest: Manifest
    truth: dict[str, str]
    features: dict[str, np.ndarray]
    eval_manifest: Manifest | None = None
    eval_truth: dict[str, str] = field(default_factory=dict)
    eval_features: dict[str, np.ndarray] = field(default_factory=dict)
    trials: list[Trial] = field(default_factory=list)


def _unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _nuisance_basis(cfg: SynthConfig) -> np.ndarray:
    if cfg.session_rank is None or cfg.session_rank == cfg.feature_dim:
        return np.eye(cfg.feature_dim)
    rng = np.random.default_rng([cfg.seed, _NUISANCE])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.session_rank)))
    # Rescale so the total offset power matches the isotropic case.
    return q.T * np.sqrt(cfg.feature_dim / cfg.session_rank)


def _make_split(cfg: SynthConfig, prefix: str, split_tag: int, n_speakers: int, n_utts: int):
    speakers = _unit_sphere(np.random.default_rng([cfg.seed, _SPEAKERS, split_tag]), n_speakers,
                           cfg.feature_dim)
    basis = _nuisance_basis(cfg)
    entries, truth, feats = [], {}, {}
    lo, hi = cfg.frames_range
    idx = 0
    for s in range(n_speakers):
        spk_id = f"{prefix}spk{s:04d}"
        n_groups = min(cfg.groups_per_speaker, n_utts)
        offsets = []
        for g in range(n_groups):
            srng = np.random.default_rng([cfg.seed, _SESSIONS, split_tag, s, g])
            offsets.append(srng.standard_normal(basis.shape[0]) @ basis * cfg.session_noise_std)
        for u in range(n_utts):
            g = u % n_groups
            urng = np.random.default_rng([cfg.seed, _UTTS, split_tag, idx])
            n_frames = int(urng.integers(lo, hi + 1))
            frames = speakers[s] + offsets[g] + cfg.frame_noise_std * urng.standard_normal(
                (n_frames, cfg.feature_dim))
            utt_id = f"{spk_id}-u{u:04d}"
            entries.append(ManifestEntry(utt_id, f"{spk_id}-g{g:03d}", f"feats/{utt_id}.feat", None))
            truth[utt_id] = spk_id
            feats[utt_id] = frames.astype(np.float32)
            idx += 1
    return Manifest(entries), truth, feats


def make_trials(truth: dict[str, str], rng: np.random.Generator) -> list[Trial]:
    """All same-speaker pairs as targets plus as many random cross-speaker pairs."""
    by_spk: dict[str, list[str]] = {}
    for utt, spk in truth.items():
        by_spk.setdefault(spk, []).append(utt)
    targets = [Trial(TARGET, a, b) for utts in by_spk.values() for a, b in itertools.combinations(utts, 2)]
    utts = list(truth)
    nontargets: list[Trial] = []
    seen: set[tuple[str, str]] = set()
    max_pairs = sum(len(a) * len(b) for a, b in itertools.combinations(by_spk.values(), 2))
    want = min(len(targets), max_pairs)
    while len(nontargets) < want:
        i, j = rng.choice(len(utts), size=2, replace=False)
        a, b = sorted((utts[i], utts[j]))
        if truth[a] == truth[b] or (a, b) in seen:
            continue
        seen.add((a, b))
        nontargets.append(Trial(NONTARGET, a, b))
    return targets + nontargets


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """Build the dataset in memory; a pure function of ``cfg``."""
    cfg.validate()
    manifest, truth, feats = _make_split(cfg, "", 0, cfg.num_speakers, cfg.utts_per_speaker)
    ds = SynthDataset(manifest, truth, feats)
    if cfg.eval_speakers:
        n_utts = cfg.eval_utts_per_speaker or cfg.utts_per_speaker
        ds.eval_manifest, ds.eval_truth, ds.eval_features = _make_split(
            cfg, "eval-", 1, cfg.eval_speakers, n_utts)
        ds.trials = make_trials(ds.eval_truth, np.random.default_rng([cfg.seed, _TRIALS]))
    return ds


def write_dataset(ds: SynthDataset, out_dir: str | Path) -> dict[str, Path]:
    """Write manifests (speaker column ``-``), feature files, truth TSVs and trials."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    paths = {"manifest": out / "manifest.tsv", "truth": out / "truth.tsv"}
    for utt, m in ds.features.items():
        write_features(m, out / "feats" / f"{utt}.feat")
    write_manifest(ds.manifest, paths["manifest"])
    write_label_tsv(ds.truth, paths["truth"])
    if ds.eval_manifest is not None:
        for utt, m in ds.eval_features.items():
            write_features(m, out / "feats" / f"{utt}.feat")
        paths.update(eval_manifest=out / "eval_manifest.tsv", eval_truth=out / "eval_truth.tsv",
                     trials=out / "trials.txt")
        write_manifest(ds.eval_manifest, paths["eval_manifest"])
        write_label_tsv(ds.eval_truth, paths["eval_truth"])
        write_trials(ds.trials, paths["trials"])
    return paths


def _add_noise(m: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = float(np.mean(np.square(m, dtype=np.float64)))
    if power <= 0.0:
        raise ValueError("cannot add noise at a fixed SNR to a zero-power matrix")
    noise_std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return m + noise_std * rng.standard_normal(m.shape)


def _apply_channel(m: np.ndarray, scale_std: float, rng: np.random.Generator) -> np.ndarray:
    gains = np.exp(scale_std * rng.standard_normal(m.shape[1]))
    return m * gains[None, :]


def augment(m: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Additive noise at a random SNR and/or a static per-dimension channel gain.

    SNR is measured on the mean power of the whole matrix. Output has the
    input's shape and dtype.
    """
    if cfg.apply_prob < 1.0 and rng.random() >= cfg.apply_prob:
        return m.copy()
    mode = cfg.mode
    if mode == "random_choice":
        mode = ("noise_only", "channel_only", "both")[int(rng.integers(3))]
    elif mode == "either":
        mode = ("noise_only", "channel_only")[int(rng.integers(2))]
    out = m.astype(np.float64)
    if mode in ("channel_only", "both"):
        out = _apply_channel(out, cfg.channel_scale_std, rng)
    if mode in ("noise_only", "both"):
        out = _add_noise(out, float(rng.uniform(*cfg.snr_db_range)), rng)
    return out.astype(m.dtype)


def sample_segments(m: np.ndarray, count: int, len_range: tuple[int, int],
                    rng: np.random.Generator) -> list[np.ndarray]:
    """``count`` contiguous random crops; lengths uniform in ``len_range``, clamped to the rows."""
    lo, hi = len_range
    rows = m.shape[0]
    if rows < lo:
        raise ValueError(f"matrix has {rows} frames, fewer than the minimum segment length {lo}")
    out = []
    for _ in range(count):
        length = min(int(rng.integers(lo, hi + 1)), rows)
        start = int(rng.integers(0, rows - length + 1))
        out.append(m[start:start + length])
    return out
