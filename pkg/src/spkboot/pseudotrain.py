"""Supervised retraining on purified pseudo labels (softmax cross-entropy, SGD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cluster import PseudoLabelSet
from .dataio import Manifest
from .encoder import EncoderConfig, EncoderParams, backward, forward_batch, init_params, sgd_step
from .synthgen import AugmentConfig, augment, sample_segments

log = logging.getLogger(__name__)


@dataclass
class PseudoTrainConfig:
    epochs_max: int = 60
    batch_size: int = 32
    lr_initial: float = 0.1
    lr_decay_factor: float = 10.0
    plateau_patience: int = 3
    plateau_rel_tol: float = 1e-3
    min_lr: float = 1e-4
    segment_len_range: tuple[int, int] = (15, 20)
    augment: AugmentConfig = field(default_factory=AugmentConfig.for_pseudo)
    seed: int = 0

    def validate(self) -> None:
        if not self.lr_initial > self.min_lr > 0:
            raise ValueError("need lr_initial > min_lr > 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be > 1")
        if self.batch_size < 1 or self.epochs_max < 0:
            raise ValueError("batch_size must be >= 1 and epochs_max >= 0")
        self.augment.validate()


def cross_entropy(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``-log softmax(logits)[label]`` and its gradient ``softmax - onehot``.

    Accepts a single logit vector with an int label, or a (B, K) matrix with B labels.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z.shape[1]
    if k == 0:
        raise ValueError("cross-entropy needs K >= 1 classes")
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per logit row required")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted - log_norm[:, None]
    rows = np.arange(z.shape[0])
    loss = -log_prob[rows, y]
    grad = np.exp(log_prob)
    grad[rows, y] -= 1.0
    if single:
        return loss[0], grad[0]
    return loss, grad


@dataclass
class PseudoTrainResult:
    params: EncoderParams
    log: list[dict] = field(default_factory=list)


def train_pseudo(manifest: Manifest, features: Mapping[str, np.ndarray], labels: PseudoLabelSet,
                 encoder_cfg: EncoderConfig, cfg: PseudoTrainConfig) -> PseudoTrainResult:
    """Fresh encoder + classifier head trained with minibatch SGD on the pseudo labels.

    The learning rate is divided by ``lr_decay_factor`` whenever the mean epoch
    loss has failed to improve by a relative ``plateau_rel_tol`` for
    ``plateau_patience`` consecutive epochs; training stops once it falls
    below ``min_lr`` or after ``epochs_max`` epochs.
    """
    cfg.validate()
    if labels.num_classes < 2:
        raise ValueError("pseudo-label training needs K >= 2 classes")
    known = set(manifest.utt_ids)
    utts = [u for u, _ in labels.entries]
    missing = [u for u in utts if u not in known]
    if missing:
        raise KeyError(f"pseudo-labelled utterances missing from manifest: {missing[:5]}")
    y_all = np.array([c for _, c in labels.entries], dtype=np.int64)

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(encoder_cfg, int(seeds[0].generate_state(1)[0]), num_classes=labels.num_classes)
    rng = np.random.default_rng(seeds[1])
    lr = cfg.lr_initial
    best = np.inf
    stale = 0
    history: list[dict] = []
    for epoch in range(cfg.epochs_max):
        order = rng.permutation(len(utts))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            segs = []
            for i in idx:
                seg = sample_segments(features[utts[i]], 1, cfg.segment_len_range, rng)[0]
                segs.append(augment(seg, cfg.augment, rng))
            _, logits, cache = forward_batch(params, segs, with_head=True, train=True, rng=rng)
            loss, g = cross_entropy(logits, y_all[idx])
            if not np.all(np.isfinite(loss)):
                raise FloatingPointError(f"non-finite cross-entropy in epoch {epoch + 1}")
            total_loss += float(loss.sum())
            correct += int(np.sum(np.argmax(logits, axis=1) == y_all[idx]))
            grads = backward(params, cache, grad_logits=g / len(idx))
            sgd_step(params, grads, lr)
        mean_loss = total_loss / len(utts)
        history.append({"epoch": epoch + 1, "mean_loss": mean_loss, "lr": lr,
                        "train_accuracy": correct / len(utts)})
        log.debug("pseudo epoch %d loss %.4f acc %.3f lr %g", epoch + 1, mean_loss,
                  correct / len(utts), lr)
        if best - mean_loss > cfg.plateau_rel_tol * abs(best) or not np.isfinite(best):
            stale = 0
        else:
            stale += 1
        best = min(best, mean_loss)
        if stale >= cfg.plateau_patience:
            lr /= cfg.lr_decay_factor
            stale = 0
            if lr < cfg.min_lr:
                break
    return PseudoTrainResult(params, history)


def training_accuracy(params: EncoderParams, manifest: Manifest, features: Mapping[str, np.ndarray],
                      labels: PseudoLabelSet) -> float:
    """Eval-mode accuracy of the classifier head on full utterances."""
    utts = [u for u, _ in labels.entries]
    y = np.array([c for _, c in labels.entries])
    _, logits, _ = forward_batch(params, [features[u] for u in utts], with_head=True)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def label_noise_rate(pseudo: PseudoLabelSet | Mapping[str, object], truth: Mapping[str, object]) -> float:
    """1 - accuracy under the best one-to-one pseudo->true class matching."""
    labels = pseudo.as_dict() if isinstance(pseudo, PseudoLabelSet) else dict(pseudo)
    shared = [u for u in labels if u in truth]
    if not shared:
        raise ValueError("pseudo labels and truth share no utterance ids")
    _, pi = np.unique([str(labels[u]) for u in shared], return_inverse=True)
    _, ti = np.unique([str(truth[u]) for u in shared], return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return 1.0 - table[rows, cols].sum() / len(shared)
