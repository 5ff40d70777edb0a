"""The standard synthetic benchmark used by the end-to-end trend checks.

50 speakers with 20 utterances each in 20 dimensions, recorded across many
sessions whose nuisance lives in a low-rank subspace, plus 40 held-out
speakers that supply the verification trials. The encoder and schedule are
sized so a full CSL + 3 round run takes well under a minute on one core.
"""

from __future__ import annotations

from pathlib import Path

from .csl import CslTrainConfig
from .encoder import EncoderConfig
from .pipeline import EvalConfig, PipelineConfig, RoundConfig
from .pseudotrain import PseudoTrainConfig
from .synthgen import SynthConfig, generate_dataset, write_dataset

BENCHMARK_SCHEDULE = [(0.2, 2), (0.2, 2), (0.1, 2)]


def benchmark_synth_config(seed: int = 3) -> SynthConfig:
    return SynthConfig(num_speakers=50, utts_per_speaker=20, groups_per_speaker=20, frames_range=(20, 40),
                       feature_dim=20, session_noise_std=0.2, frame_noise_std=0.5, seed=seed,
                       session_rank=8, eval_speakers=40, eval_utts_per_speaker=10)


def benchmark_pipeline_config(data_dir: str | Path, seed: int = 1, k: int = 100) -> PipelineConfig:
    data = Path(data_dir).resolve()
    rounds = [RoundConfig(i, k, p, s) for i, (p, s) in enumerate(BENCHMARK_SCHEDULE, start=1)]
    cfg = PipelineConfig(
        manifest=str(data / "manifest.tsv"),
        encoder=EncoderConfig(input_dim=20, hidden_dims=[128], embed_dim=32, dropout_prob=0.5),
        csl=CslTrainConfig(batch_size=32, epochs=40),
        pseudo=PseudoTrainConfig(epochs_max=150, plateau_patience=5),
        rounds=rounds,
        eval=EvalConfig(trials=str(data / "trials.txt"), manifest=str(data / "eval_manifest.tsv"),
                        truth=str(data / "truth.tsv")),
        seed=seed,
    )
    cfg.validate()
    return cfg


def prepare_benchmark(data_dir: str | Path, seed: int = 3) -> PipelineConfig:
    """Write the benchmark dataset to ``data_dir`` and return a matching pipeline config."""
    write_dataset(generate_dataset(benchmark_synth_config(seed)), data_dir)
    return benchmark_pipeline_config(data_dir, seed)
