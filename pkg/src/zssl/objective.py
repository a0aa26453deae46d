"""Masked-prediction objective: span masking and the two label losses.

``hubert_loss`` scores each frame against learned cluster embeddings by
cosine similarity over a temperature; ``ce_loss`` is the cheaper variant
that reads class logits straight off a linear projection.  Both reduce
through :func:`softmax_cross_entropy`, so they agree whenever their score
matrices agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zssl import numerics as nx

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class MaskSpec:
    start_prob: float = 0.08
    span_len: int = 10
    min_masks: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must lie in [0, 1], got {self.start_prob}")
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")


@dataclass(frozen=True)
class MaskSet:
    indices: np.ndarray  # sorted, unique
    num_frames: int

    def __len__(self) -> int:
        return int(self.indices.size)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_frames, dtype=bool)
        out[self.indices] = True
        return out


def sample_masks(spec: MaskSpec, num_frames: int) -> MaskSet:
    """Each frame starts a span with probability ``start_prob``; spans clip at T.

    When T >= span_len, extra random spans are added until at least
    ``min_masks`` frames are covered.
    """
    if num_frames < 1:
        raise nx.ContractError("sample_masks needs at least one frame")
    rng = np.random.default_rng(spec.seed)
    covered = np.zeros(num_frames, dtype=bool)
    starts = np.flatnonzero(rng.random(num_frames) < spec.start_prob)
    for s in starts:
        covered[s:s + spec.span_len] = True
    if num_frames >= spec.span_len:
        target = min(spec.min_masks, num_frames)
        while covered.sum() < target:
            s = int(rng.integers(num_frames))
            covered[s:s + spec.span_len] = True
    return MaskSet(np.flatnonzero(covered), num_frames)


def apply_mask(x: nx.Tensor, mask: MaskSet, mask_embed: nx.Tensor) -> nx.Tensor:
    if mask_embed.shape != (x.shape[1],):
        raise nx.DimensionError(f"mask embedding {mask_embed.shape} does not match frame width {x.shape[1]}")
    return nx.where_rows(mask.as_bool(), mask_embed, x)


def align_labels(frames: nx.Tensor, labels: np.ndarray) -> tuple[nx.Tensor, np.ndarray]:
    """Truncate encoder frames and 50 Hz labels to their common length."""
    n = min(frames.shape[0], len(labels))
    if frames.shape[0] != n:
        frames = frames[:n]
    return frames, np.asarray(labels[:n], dtype=np.int64)


def _frames(mask: MaskSet | None, num_frames: int) -> np.ndarray:
    if mask is None:
        return np.arange(num_frames)
    return mask.indices[mask.indices < num_frames]


def softmax_cross_entropy(scores: nx.Tensor, labels: np.ndarray) -> nx.Tensor:
    """Mean over rows of -log softmax(scores)[row, label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape[0] != labels.size:
        raise nx.DimensionError(f"{scores.shape[0]} score rows for {labels.size} labels")
    logp = nx.log_softmax(scores, axis=-1)
    picked = -logp[np.arange(labels.size), labels]
    # shifted mean: equal per-frame losses come back bit-exact
    anchor = float(picked.data[0]) if labels.size else 0.0
    return (picked - anchor).mean() + anchor


@dataclass
class PredictionHead:
    """Projection ``A`` [D x E], cluster embeddings [C x E] and logit temperature."""

    projection: nx.Tensor
    embeddings: nx.Tensor | None = None
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        classes = self.embeddings.shape[0] if self.embeddings is not None else self.projection.shape[1]
        if classes < 2:
            raise ValueError("need at least two classes")


def cosine_scores(proj: nx.Tensor, embeddings: nx.Tensor, tau: float) -> nx.Tensor:
    pn = proj / nx.clamp_min(nx.sqrt((proj * proj).sum(axis=1, keepdims=True)), NORM_FLOOR)
    en = embeddings / nx.clamp_min(nx.sqrt((embeddings * embeddings).sum(axis=1, keepdims=True)), NORM_FLOOR)
    return (pn @ nx.transpose(en)) * (1.0 / tau)


def hubert_loss(head: PredictionHead, o: nx.Tensor, labels, mask: MaskSet | None) -> nx.Tensor:
    """Cosine-similarity softmax over cluster embeddings, averaged over masked frames.

    Passing ``mask=None`` scores every frame (ablation).
    """
    if head.embeddings is None:
        raise nx.ContractError("hubert_loss needs cluster embeddings")
    o, labels = align_labels(o, labels)
    rows = _frames(mask, o.shape[0])
    scores = cosine_scores(o[rows] @ head.projection, head.embeddings, head.tau)
    return softmax_cross_entropy(scores, labels[rows])


def ce_loss(projection: nx.Tensor, o: nx.Tensor, labels, mask: MaskSet | None) -> nx.Tensor:
    """Cross-entropy on the logits ``o_t A`` of masked frames."""
    o, labels = align_labels(o, labels)
    rows = _frames(mask, o.shape[0])
    return softmax_cross_entropy(o[rows] @ projection, labels[rows])


def masked_accuracy(logits: np.ndarray, labels, mask: MaskSet | None) -> float:
    n = min(logits.shape[0], len(labels))
    rows = _frames(mask, n)
    if rows.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[rows], axis=1) == np.asarray(labels)[rows]))
