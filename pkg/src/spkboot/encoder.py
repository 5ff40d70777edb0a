"""Embedding network: per-frame ReLU MLP -> statistics pooling -> linear embedding.

An optional classifier head (dropout + linear) sits on top of the embedding
for pseudo-label training. Forward and backward passes are written out by
hand in numpy; every computation runs in float64 while parameters are stored
as float32 between optimizer steps.

Segments of different lengths are processed in one call by concatenating
their frames and pooling per segment, which is equivalent to forwarding each
segment on its own.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

POOL_EPS = 1e-8
CKPT_MAGIC = b"ENCK"
CKPT_VERSION = 1
_ACTIVATIONS = {"relu": 0}


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    embed_dim: int = 128
    activation: str = "relu"
    dropout_prob: float = 0.0

    def validate(self) -> None:
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be nonempty")
        if min([self.input_dim, self.embed_dim, *self.hidden_dims]) < 1:
            raise ValueError("all layer dimensions must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")


@dataclass
class EncoderParams:
    """Named parameter tensors in declaration order.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    @property
    def num_classes(self) -> int:
        head = self.tensors.get("head.weight")
        return 0 if head is None else head.shape[1]

    @property
    def has_head(self) -> bool:
        return "head.weight" in self.tensors

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def _layer_shapes(cfg: EncoderConfig, num_classes: int) -> list[tuple[str, tuple[int, int]]]:
    shapes = []
    dims = [cfg.input_dim, *cfg.hidden_dims]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"trunk.{i}", (a, b)))
    shapes.append(("fc", (2 * dims[-1], cfg.embed_dim)))
    if num_classes:
        shapes.append(("head", (cfg.embed_dim, num_classes)))
    return shapes


def init_params(cfg: EncoderConfig, seed: int, num_classes: int = 0,
                dtype=np.float32) -> EncoderParams:
    """He-normal weights (variance 2/fan_in), zero biases; deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, (fan_in, fan_out) in _layer_shapes(cfg, num_classes):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.weight"] = w.astype(dtype)
        tensors[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)
    return EncoderParams(cfg, tensors)


@dataclass
class ForwardCache:
    lengths: np.ndarray
    starts: np.ndarray
    seg: np.ndarray
    activations: list[np.ndarray]
    preacts: list[np.ndarray]
    centered: np.ndarray
    std: np.ndarray
    pooled: np.ndarray
    embeddings: np.ndarray
    head_input: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None


def _check_segments(params: EncoderParams, segments: Sequence[np.ndarray]) -> None:
    if len(segments) == 0:
        raise ValueError("no segments to forward")
    for s in segments:
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"segment must be a (frames, dims) matrix, got shape {s.shape}")
        if s.shape[1] != params.config.input_dim:
            raise ValueError(
                f"dimension mismatch: encoder expects {params.config.input_dim} features, "
                f"segment has {s.shape[1]}")


def forward_batch(params: EncoderParams, segments: Sequence[np.ndarray], *, with_head: bool = False,
                  train: bool = False, rng: np.random.Generator | None = None):
    """Forward a list of variable-length segments.

    Returns ``(embeddings, logits, cache)``; ``logits`` is None unless
    ``with_head``. Dropout is active only when ``train`` is set.
    """
    _check_segments(params, segments)
    if with_head and not params.has_head:
        raise ValueError("encoder has no classifier head")
    t = params.tensors
    n_hidden = len(params.config.hidden_dims)

    lengths = np.array([s.shape[0] for s in segments], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    seg = np.repeat(np.arange(len(segments)), lengths)
    a = np.concatenate(segments, axis=0).astype(np.float64)

    activations, preacts = [a], []
    for i in range(n_hidden):
        z = a @ t[f"trunk.{i}.weight"].astype(np.float64) + t[f"trunk.{i}.bias"]
        a = np.maximum(z, 0.0)
        preacts.append(z)
        activations.append(a)

    n = lengths[:, None].astype(np.float64)
    mu = np.add.reduceat(a, starts, axis=0) / n
    centered = a - mu[seg]
    var = np.add.reduceat(centered * centered, starts, axis=0) / n
    std = np.sqrt(var + POOL_EPS)
    pooled = np.concatenate([mu, std], axis=1)
    emb = pooled @ t["fc.weight"].astype(np.float64) + t["fc.bias"]

    cache = ForwardCache(lengths, starts, seg, activations, preacts, centered, std, pooled, emb)
    logits = None
    if with_head:
        h = emb
        p = params.config.dropout_prob
        if train and p > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            mask = (rng.random(emb.shape) >= p) / (1.0 - p)
            h = emb * mask
            cache.dropout_mask = mask
        cache.head_input = h
        logits = h @ t["head.weight"].astype(np.float64) + t["head.bias"]
    return emb, logits, cache


def forward(params: EncoderParams, m: np.ndarray) -> np.ndarray:
    """Embedding of a single feature matrix."""
    emb, _, _ = forward_batch(params, [m])
    return emb[0]


def forward_with_head(params: EncoderParams, m: np.ndarray, *, train: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    emb, logits, _ = forward_batch(params, [m], with_head=True, train=train, rng=rng)
    return emb[0], logits[0]


def embed_segments(params: EncoderParams, segments: Sequence[np.ndarray],
                   chunk: int = 256) -> np.ndarray:
    """Eval-mode embeddings for many segments, forwarded in fixed-size chunks."""
    out = [forward_batch(params, segments[i:i + chunk])[0] for i in range(0, len(segments), chunk)]
    return np.concatenate(out, axis=0)


def backward(params: EncoderParams, cache: ForwardCache, grad_emb: np.ndarray | None = None,
             grad_logits: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter tensor.

    ``grad_emb`` and ``grad_logits`` are the upstream gradients of the loss
    with respect to the embeddings and the head logits. Tensors off the active
    path get exact zeros.
    """
    t = params.tensors
    grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in t.items()}
    g_emb = np.zeros_like(cache.embeddings) if grad_emb is None else np.array(grad_emb, dtype=np.float64)

    if grad_logits is not None:
        if cache.head_input is None:
            raise ValueError("logit gradient given but the forward pass did not use the head")
        grads["head.weight"] = cache.head_input.T @ grad_logits
        grads["head.bias"] = grad_logits.sum(axis=0)
        g_h = grad_logits @ t["head.weight"].astype(np.float64).T
        if cache.dropout_mask is not None:
            g_h = g_h * cache.dropout_mask
        g_emb = g_emb + g_h

    grads["fc.weight"] = cache.pooled.T @ g_emb
    grads["fc.bias"] = g_emb.sum(axis=0)
    g_pooled = g_emb @ t["fc.weight"].astype(np.float64).T
    width = cache.std.shape[1]
    n = cache.lengths[:, None].astype(np.float64)
    g_mu, g_std = g_pooled[:, :width], g_pooled[:, width:]
    # d std_k / d h_t = (h_t - mu) / (n * std); the mean's own dependence cancels.
    g_a = (g_mu / n)[cache.seg] + (g_std / (n * cache.std))[cache.seg] * cache.centered

    for i in reversed(range(len(cache.preacts))):
        g_z = g_a * (cache.preacts[i] > 0.0)
        grads[f"trunk.{i}.weight"] = cache.activations[i].T @ g_z
        grads[f"trunk.{i}.bias"] = g_z.sum(axis=0)
        if i:
            g_a = g_z @ t[f"trunk.{i}.weight"].astype(np.float64).T
    return grads


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: EncoderParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> EncoderParams:
    """One bias-corrected Adam update, applied in place. Moments are kept in float64."""
    _check_finite(grads)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    return params


def sgd_step(params: EncoderParams, grads: dict[str, np.ndarray], lr: float) -> EncoderParams:
    """Plain ``p <- p - lr * g``, in place."""
    _check_finite(grads)
    for name, p in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        p[...] = (p.astype(np.float64) - lr * g).astype(p.dtype)
    return params


# -- checkpoints ---------------------------------------------------------------

def encode_checkpoint(params: EncoderParams) -> bytes:
    cfg = params.config
    parts = [CKPT_MAGIC, struct.pack("<IIII", CKPT_VERSION, cfg.input_dim, cfg.embed_dim,
                                     len(cfg.hidden_dims))]
    parts.append(struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims))
    parts.append(struct.pack("<IdI", _ACTIVATIONS[cfg.activation], cfg.dropout_prob,
                             params.num_classes))
    expected = [f"{name}.{kind}" for name, _ in _layer_shapes(cfg, params.num_classes)
                for kind in ("weight", "bias")]
    if list(params.tensors) != expected:
        raise ValueError(f"parameter names {list(params.tensors)} do not match the config layout")
    for name in expected:
        parts.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> EncoderParams:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    try:
        version, input_dim, embed_dim, n_hidden = struct.unpack_from("<IIII", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 20
        hidden = list(struct.unpack_from(f"<{n_hidden}I", buf, off))
        off += 4 * n_hidden
        act_code, dropout, num_classes = struct.unpack_from("<IdI", buf, off)
        off += struct.calcsize("<IdI")
    except struct.error as exc:
        raise ValueError("truncated checkpoint header") from exc
    names = {v: k for k, v in _ACTIVATIONS.items()}
    if act_code not in names:
        raise ValueError(f"unknown activation code {act_code} in checkpoint")
    activation = names[act_code]
    cfg = EncoderConfig(input_dim, hidden, embed_dim, activation, dropout)
    tensors: dict[str, np.ndarray] = {}
    for name, (fan_in, fan_out) in _layer_shapes(cfg, num_classes):
        for kind, shape in (("weight", (fan_in, fan_out)), ("bias", (fan_out,))):
            count = int(np.prod(shape))
            if off + 4 * count > len(buf):
                raise ValueError("truncated checkpoint payload")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
            tensors[f"{name}.{kind}"] = arr.reshape(shape).astype(np.float32)
            off += 4 * count
    if off != len(buf):
        raise ValueError("trailing bytes after checkpoint payload")
    return EncoderParams(cfg, tensors)


def write_checkpoint(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def read_checkpoint(path: str | Path) -> EncoderParams:
    return decode_checkpoint(Path(path).read_bytes())
