"""Clustering and verification metrics: NMI, cosine trial scoring, EER and minDCF."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataio import Manifest, Trial
from .encoder import EncoderParams, embed_segments


@dataclass
class ScoredTrials:
    labels: np.ndarray   # bool, True for target trials
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.scores.ndim != 1:
            raise ValueError("labels and scores must be 1-D arrays of equal length")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if not self.labels.any() or self.labels.all():
            raise ValueError("need at least one target and one nontarget trial")

    @property
    def n_target(self) -> int:
        return int(self.labels.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.labels).sum())


@dataclass
class DcfParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0
    normalized: bool = True

    def validate(self) -> None:
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


def nmi(u: Sequence, v: Sequence) -> float:
    """2 I(U;V) / (H(U) + H(V)) with natural logs; 1.0 when both labelings are trivial."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError("label arrays differ in length")
    if u.size == 0:
        raise ValueError("empty label arrays")
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    n = float(u.size)
    table = np.zeros((ui.max() + 1, vi.max() + 1))
    np.add.at(table, (ui.ravel(), vi.ravel()), 1.0)
    pu = table.sum(axis=1) / n
    pv = table.sum(axis=0) / n
    h_u = -np.sum(pu * np.log(pu))
    h_v = -np.sum(pv * np.log(pv))
    if h_u + h_v == 0.0:
        return 1.0
    nz = table > 0
    pij = table[nz] / n
    # Summing the sorted terms makes the result exactly symmetric in (u, v).
    mi = np.sort(pij * np.log(pij / np.outer(pu, pv)[nz])).sum()
    return float(np.clip(2.0 * mi / (h_u + h_v), 0.0, 1.0))


def cosine_scores(enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    ne = np.linalg.norm(enroll, axis=1)
    nt = np.linalg.norm(test, axis=1)
    if np.any(ne == 0.0) or np.any(nt == 0.0):
        raise ValueError("zero-norm embedding cannot be cosine-scored")
    return np.clip(np.sum(enroll * test, axis=1) / (ne * nt), -1.0, 1.0)


def score_embeddings(embeddings: Mapping[str, np.ndarray], trials: Sequence[Trial]) -> ScoredTrials:
    missing = {t.enroll_id for t in trials} | {t.test_id for t in trials}
    missing -= set(embeddings)
    if missing:
        raise KeyError(f"trial ids not in manifest: {sorted(missing)[:5]}")
    enroll = np.stack([embeddings[t.enroll_id] for t in trials])
    test = np.stack([embeddings[t.test_id] for t in trials])
    return ScoredTrials(np.array([t.is_target for t in trials]), cosine_scores(enroll, test))


def score_trials(params: EncoderParams, manifest: Manifest, features: Mapping[str, np.ndarray],
                 trials: Sequence[Trial]) -> ScoredTrials:
    """Cosine score between full-utterance embeddings; each utterance embedded once."""
    needed = sorted({t.enroll_id for t in trials} | {t.test_id for t in trials})
    known = set(manifest.utt_ids)
    unknown = [u for u in needed if u not in known]
    if unknown:
        raise KeyError(f"trial ids not in manifest: {unknown[:5]}")
    emb = embed_segments(params, [features[u] for u in needed])
    return score_embeddings(dict(zip(needed, emb)), trials)


def operating_points(st: ScoredTrials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at every distinct threshold.

    A trial is accepted when ``score >= t``. Point ``i`` < len(scores) uses the
    ``i``-th distinct score as threshold; the last point rejects everything.
    Returned thresholds are the midpoint of the interval of thresholds that
    realise each point (the lowest score for accept-all, just above the
    highest score for reject-all).
    """
    tgt = np.sort(st.scores[st.labels])
    non = np.sort(st.scores[~st.labels])
    cuts = np.unique(st.scores)
    p_miss = np.append(np.searchsorted(tgt, cuts, side="left") / tgt.size, 1.0)
    p_fa = np.append((non.size - np.searchsorted(non, cuts, side="left")) / non.size, 0.0)
    upper = cuts[-1] + max(1.0, abs(cuts[-1]))
    thresholds = np.empty(cuts.size + 1)
    thresholds[0] = cuts[0]
    thresholds[1:-1] = 0.5 * (cuts[:-1] + cuts[1:])
    thresholds[-1] = 0.5 * (cuts[-1] + upper)
    return p_miss, p_fa, thresholds


def eer(st: ScoredTrials) -> tuple[float, float]:
    """Equal error rate and its threshold.

    ``P_miss - P_fa`` increases strictly along the operating points; the EER is
    read at the point where it is zero, or linearly interpolated between the
    two neighbouring points where its sign flips.
    """
    p_miss, p_fa, thr = operating_points(st)
    diff = p_miss - p_fa
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0 or k == 0:
        return float(p_miss[k]), float(thr[k])
    a0, a1 = p_miss[k - 1], p_miss[k]
    b0, b1 = p_fa[k - 1], p_fa[k]
    alpha = (b0 - a0) / ((a1 - a0) - (b1 - b0))
    return float(a0 + alpha * (a1 - a0)), float(thr[k - 1] + alpha * (thr[k] - thr[k - 1]))


def dcf_curve(p_miss: np.ndarray, p_fa: np.ndarray, params: DcfParams) -> np.ndarray:
    cost = params.c_miss * p_miss * params.p_target + params.c_fa * p_fa * (1.0 - params.p_target)
    if params.normalized:
        cost = cost / min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    return cost


def min_dcf(st: ScoredTrials, params: DcfParams | None = None) -> tuple[float, float]:
    """Minimum detection cost over the operating points; ties go to the lowest threshold."""
    params = params or DcfParams()
    params.validate()
    p_miss, p_fa, thr = operating_points(st)
    cost = dcf_curve(p_miss, p_fa, params)
    k = int(np.argmin(cost))
    return float(cost[k]), float(thr[k])


def evaluate_scores(st: ScoredTrials, params: DcfParams | None = None) -> dict:
    e, e_thr = eer(st)
    d, d_thr = min_dcf(st, params)
    return {"eer": e, "eer_threshold": e_thr, "min_dcf": d, "dcf_threshold": d_thr,
            "n_target": st.n_target, "n_nontarget": st.n_nontarget}
