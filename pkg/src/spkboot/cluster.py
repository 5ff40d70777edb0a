"""Pseudo labels from k-means on utterance embeddings, with confidence purification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataio import Manifest, read_label_tsv, write_json, write_label_tsv
from .encoder import EncoderParams, embed_segments


@dataclass
class ClusterModel:
    centroids: np.ndarray           # (k, d)
    assignments: np.ndarray         # (n,) cluster index per item
    inertia: float
    confidences: np.ndarray         # (n,) = -||z_i - C_{y_i}||^2
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class PseudoLabelSet:
    entries: list[tuple[str, int]]
    num_classes: int
    round_index: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.entries)

    def validate(self) -> None:
        ids = [u for u, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance id in pseudo labels")
        present = sorted({c for _, c in self.entries})
        if present != list(range(self.num_classes)):
            raise ValueError("pseudo-label classes are not contiguous 0..K-1")


@dataclass
class PurgeReport:
    n_in: int
    removed_by_confidence: int
    removed_by_size: int
    clusters_in: int
    clusters_dropped: int
    num_classes: int
    order: str = "confidence_then_size"
    kept_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    @property
    def n_kept(self) -> int:
        return self.n_in - self.removed_by_confidence - self.removed_by_size

    def to_json(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_kept": self.n_kept,
            "removed_by_confidence": self.removed_by_confidence,
            "removed_by_size": self.removed_by_size,
            "clusters_in": self.clusters_in,
            "clusters_dropped": self.clusters_dropped,
            "K": self.num_classes,
            "order": self.order,
        }


def embed_all(params: EncoderParams, manifest: Manifest,
              features: Mapping[str, np.ndarray]) -> np.ndarray:
    """Eval-mode embedding of every full utterance, in manifest order."""
    return embed_segments(params, [features[e.utt_id] for e in manifest])


def average_by_group(embeddings: np.ndarray, manifest: Manifest) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Mean embedding per group.

    Returns ``(group_embeddings, group_ids, member_group)`` where groups are in
    order of first appearance and ``member_group[i]`` is the row of utterance
    ``i``'s group, used to broadcast group labels back to utterances.
    """
    index: dict[str, int] = {}
    member = np.empty(len(manifest), dtype=np.int64)
    for i, e in enumerate(manifest):
        member[i] = index.setdefault(e.group_id, len(index))
    emb = np.asarray(embeddings, dtype=np.float64)
    sums = np.zeros((len(index), emb.shape[1]))
    np.add.at(sums, member, emb)
    counts = np.bincount(member, minlength=len(index)).astype(np.float64)
    return sums / counts[:, None], list(index), member


def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 512) -> np.ndarray:
    # Direct differences rather than the expanded |x|^2 - 2xc + |c|^2 form, so the
    # argmin and the reported inertia agree exactly.
    out = np.empty((points.shape[0], centroids.shape[0]))
    for i in range(0, points.shape[0], chunk):
        diff = points[i:i + chunk, None, :] - centroids[None, :, :]
        out[i:i + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # Every point coincides with a centroid already; pick an unused index.
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(unused))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(labels)), labels]


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
           rel_tol: float = 1e-4) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative inertia improvement drops below ``rel_tol`` or after
    ``max_iters`` updates. A cluster left empty by an update is moved onto the
    point currently farthest from its own centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, dist = _assign(x, centroids)
    history = [float(dist.sum())]
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        live = counts > 0
        centroids[live] = sums[live] / counts[live, None]
        for c in np.flatnonzero(~live):
            far = int(np.argmax(dist))
            centroids[c] = x[far]
            dist[far] = 0.0
        labels, dist = _assign(x, centroids)
        inertia = float(dist.sum())
        prev = history[-1]
        history.append(inertia)
        if prev <= 0.0 or (prev - inertia) / prev < rel_tol:
            break
    return ClusterModel(centroids, labels, history[-1], -dist, history)


def broadcast(model: ClusterModel, member: np.ndarray) -> ClusterModel:
    """Item-level model from a group-level one: each utterance inherits its group's cluster."""
    conf = model.confidences[member]
    return ClusterModel(model.centroids, model.assignments[member], float(-conf.sum()), conf,
                        list(model.inertia_history))


def purify(model: ClusterModel, p: float, min_size: int,
           item_ids: Sequence[str] | None = None, round_index: int = 0) -> tuple[PseudoLabelSet, PurgeReport]:
    """Drop the ``floor(p*n)`` least-confident items, then every cluster left with
    fewer than ``min_size`` members; surviving clusters are renumbered 0..K-1
    in ascending order of their original index.

    Confidence ties are broken by item order (earlier items are dropped first).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must be in [0, 1)")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    n = len(model.assignments)
    ids = list(item_ids) if item_ids is not None else [str(i) for i in range(n)]
    if len(ids) != n:
        raise ValueError("item_ids length does not match the cluster model")

    n_drop = int(np.floor(p * n))
    order = np.argsort(model.confidences, kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:n_drop]] = False

    counts = np.bincount(model.assignments[keep], minlength=model.k)
    big = counts >= min_size
    size_ok = big[model.assignments]
    removed_by_size = int(np.sum(keep & ~size_ok))
    keep &= size_ok
    clusters_in = int(np.sum(counts > 0))
    if not keep.any():
        raise ValueError("empty pseudo-label set after purification")

    surviving = np.flatnonzero(big & (counts > 0))
    remap = np.full(model.k, -1, dtype=np.int64)
    remap[surviving] = np.arange(len(surviving))
    kept_index = np.flatnonzero(keep)
    entries = [(ids[i], int(remap[model.assignments[i]])) for i in kept_index]
    labels = PseudoLabelSet(entries, len(surviving), round_index)
    report = PurgeReport(n, n_drop, removed_by_size, clusters_in, clusters_in - len(surviving),
                         len(surviving), kept_index=kept_index)
    return labels, report


def write_pseudo_labels(labels: PseudoLabelSet, report: PurgeReport, out_dir, *, k: int, p: float,
                        min_size: int) -> None:
    """``pseudo_labels.tsv`` plus the ``purge_report.json`` sidecar."""
    write_label_tsv(labels.as_dict(), out_dir / "pseudo_labels.tsv")
    sidecar = {"round": labels.round_index, "k": k, "p": p, "S": min_size, **report.to_json()}
    write_json(sidecar, out_dir / "purge_report.json")


def read_pseudo_labels(path, round_index: int = 0) -> PseudoLabelSet:
    raw = read_label_tsv(path)
    entries = [(u, int(c)) for u, c in raw.items()]
    k = 1 + max(c for _, c in entries)
    labels = PseudoLabelSet(entries, k, round_index)
    labels.validate()
    return labels
