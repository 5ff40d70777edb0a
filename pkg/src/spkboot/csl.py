"""Contrastive self-supervised training on pairs of crops from the same utterance."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataio import Manifest
from .encoder import AdamState, EncoderConfig, EncoderParams, adam_step, backward, forward_batch, init_params
from .synthgen import AugmentConfig, augment, sample_segments

log = logging.getLogger(__name__)

DENOMINATOR_MODES = ("negatives_only", "simclr")


@dataclass
class CslTrainConfig:
    batch_size: int = 32
    temperature: float = 0.1
    epochs: int = 10
    lr: float = 1e-3
    segment_len_range: tuple[int, int] = (10, 20)
    augment: AugmentConfig = field(default_factory=AugmentConfig.for_csl)
    denominator_mode: str = "negatives_only"
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so every anchor has a negative")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.augment.validate()


@dataclass
class CslBatch:
    utt_ids: list[str]
    segments: list[np.ndarray]  # 2M segments ordered (u0 s0, u0 s1, u1 s0, ...)


def cosine(z1: np.ndarray, z2: np.ndarray) -> float:
    n1 = np.linalg.norm(z1)
    n2 = np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(z1, z2) / (n1 * n2), -1.0, 1.0))


def csl_loss(embeddings: np.ndarray, temperature: float,
             denominator_mode: str = "negatives_only") -> tuple[float, np.ndarray]:
    """Temperature-scaled contrastive loss over M utterances x 2 segments.

    ``embeddings`` has shape (M, 2, D). Each of the 2M embeddings is an anchor
    whose positive is the other segment of its utterance; the denominator runs
    over the 2(M-1) segments of every other utterance, plus the positive term
    in ``simclr`` mode. Returns the loss averaged over the 2M anchors and its
    exact gradient with respect to ``embeddings``.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 3 or z.shape[1] != 2:
        raise ValueError(f"embeddings must have shape (M, 2, D), got {z.shape}")
    m = z.shape[0]
    if m < 2:
        raise ValueError("contrastive loss needs M >= 2 utterances")
    if denominator_mode not in DENOMINATOR_MODES:
        raise ValueError(f"unknown denominator_mode {denominator_mode!r}")
    flat = z.reshape(2 * m, -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding in contrastive batch")
    u = flat / norms
    logits = (u @ u.T) / temperature

    utt = np.repeat(np.arange(m), 2)
    pos = np.arange(2 * m) ^ 1
    in_denom = utt[:, None] != utt[None, :]
    if denominator_mode == "simclr":
        in_denom[np.arange(2 * m), pos] = True

    masked = np.where(in_denom, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    weights = np.exp(masked - row_max)
    denom = weights.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + row_max[:, 0]
    per_anchor = lse - logits[np.arange(2 * m), pos]
    loss = float(per_anchor.mean())

    g_logits = weights / denom
    g_logits[np.arange(2 * m), pos] -= 1.0
    g_logits /= 2 * m
    g_u = (g_logits + g_logits.T) @ u / temperature
    # Project out the radial component: cosine depends only on direction.
    g_flat = (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / norms
    return loss, g_flat.reshape(z.shape)


def build_batch(manifest: Manifest, features: Mapping[str, np.ndarray], cfg: CslTrainConfig,
                rng: np.random.Generator) -> CslBatch:
    """Sample M distinct utterances; two independently augmented crops of each."""
    n = len(manifest)
    if n < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} utterances for a batch, have {n}")
    picks = rng.choice(n, size=cfg.batch_size, replace=False)
    ids = [manifest.entries[i].utt_id for i in picks]
    segments = []
    for utt in ids:
        for seg in sample_segments(features[utt], 2, cfg.segment_len_range, rng):
            segments.append(augment(seg, cfg.augment, rng))
    return CslBatch(ids, segments)


@dataclass
class CslResult:
    params: EncoderParams
    log: list[dict] = field(default_factory=list)


def train_csl(manifest: Manifest, features: Mapping[str, np.ndarray], cfg: CslTrainConfig,
              encoder_cfg: EncoderConfig) -> CslResult:
    """Adam on the contrastive loss for ``cfg.epochs`` epochs of ``N // M`` steps each."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(encoder_cfg, int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    state = AdamState()
    steps_per_epoch = max(1, len(manifest) // cfg.batch_size)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            batch = build_batch(manifest, features, cfg, rng)
            emb, _, cache = forward_batch(params, batch.segments)
            loss, g = csl_loss(emb.reshape(cfg.batch_size, 2, -1), cfg.temperature,
                               cfg.denominator_mode)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite contrastive loss at step {state.step + 1}")
            grads = backward(params, cache, grad_emb=g.reshape(emb.shape))
            adam_step(params, grads, state, cfg.lr)
            history.append({"step": state.step, "loss": loss, "lr": cfg.lr, "timestamp": time.time()})
        recent = [h["loss"] for h in history[-steps_per_epoch:]]
        log.info("csl epoch %d/%d mean loss %.4f", epoch + 1, cfg.epochs, float(np.mean(recent)))
    return CslResult(params, history)
