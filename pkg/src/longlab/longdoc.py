"""Chunk-with-stride segmentation, per-chunk aggregation, and snippet pooling.

"Stride" here is the overlap between consecutive chunks (step = chunk_len -
overlap), the dominant QA-pipeline convention; set ``stride_means_step`` to read
the overlap field as the raw step instead. Overlapping token predictions are
owned by the chunk where the token sits farthest from a chunk edge, since
edge tokens see an impoverished context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bpe
from . import tensor as T
from .errors import ConfigError, DataError
from .model import Batch, Checkpoint, apply_head, encode_sequence


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_len: int = 4096
    overlap: int = 1024
    truncate_doc_to: int | None = None
    stride_means_step: bool = False

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ConfigError("chunk_len must be >= 1")
        if not 0 <= self.overlap < self.chunk_len:
            raise ConfigError(f"overlap {self.overlap} must satisfy 0 <= overlap < chunk_len")

    @property
    def step(self) -> int:
        return self.overlap if self.stride_means_step else self.chunk_len - self.overlap


@dataclass(frozen=True)
class Chunk:
    start: int
    ids: np.ndarray

    @property
    def end(self) -> int:
        return self.start + len(self.ids)


@dataclass(frozen=True)
class ChunkSet:
    doc_id: str
    chunks: tuple[Chunk, ...]

    def __len__(self):
        return len(self.chunks)


def chunk_with_stride(ids, cfg: ChunkingConfig, doc_id: str = "") -> ChunkSet:
    """Segment a token sequence into overlapping chunks covering every token."""
    ids = np.asarray(ids, dtype=np.int64)
    if cfg.truncate_doc_to is not None:
        ids = ids[: cfg.truncate_doc_to]
    if len(ids) == 0:
        raise DataError(f"document {doc_id!r} is empty after truncation")
    step = cfg.step
    if step < 1:
        raise ConfigError("chunk step must be >= 1")
    chunks = []
    start = 0
    while True:
        end = min(start + cfg.chunk_len, len(ids))
        chunks.append(Chunk(start=start, ids=ids[start:end].copy()))
        if start + cfg.chunk_len >= len(ids):
            break
        start += step
    return ChunkSet(doc_id=doc_id, chunks=tuple(chunks))


def aggregate_token_predictions(chunk_predictions, chunk_set: ChunkSet) -> np.ndarray:
    """Merge per-chunk token predictions into one document-level sequence.

    On overlaps the winning chunk is the one where the token lies farthest from
    its nearest chunk edge; ties go to the earlier chunk.
    """
    if len(chunk_predictions) != len(chunk_set.chunks):
        raise DataError("one prediction sequence per chunk required")
    doc_len = max(c.end for c in chunk_set.chunks)
    out = np.zeros(doc_len, dtype=np.asarray(chunk_predictions[0]).dtype)
    best = np.full(doc_len, -1, dtype=np.int64)
    for preds, chunk in zip(chunk_predictions, chunk_set.chunks):
        preds = np.asarray(preds)
        clen = chunk.end - chunk.start
        if len(preds) != clen:
            raise DataError(f"chunk at {chunk.start} has {clen} tokens but {len(preds)} predictions")
        rel = np.arange(clen)
        dist = np.minimum(rel, clen - rel)
        span = slice(chunk.start, chunk.end)
        wins = dist > best[span]
        out[span] = np.where(wins, preds, out[span])
        best[span] = np.where(wins, dist, best[span])
    assert (best >= 0).all(), "chunker postcondition violated: uncovered token"
    return out


def aggregate_qa_spans(start_logits, end_logits, chunk_set: ChunkSet,
                       max_answer_len: int = 30, valid_masks=None):
    """Pick the best-scoring answer span across chunks.

    Candidate spans satisfy start <= end, end - start < max_answer_len, and both
    endpoints valid (valid_masks flags context positions when chunks carry
    question/special tokens). Score is start_logit + end_logit; ties prefer the
    earliest document start, then the shortest span. Returns
    (doc_start, doc_end, score) with an inclusive end index.
    """
    if len(chunk_set.chunks) == 0:
        raise DataError("no chunks to aggregate")
    best = None  # (-score, doc_start, length) minimized
    for ci, chunk in enumerate(chunk_set.chunks):
        s = np.asarray(start_logits[ci], dtype=np.float64)
        e = np.asarray(end_logits[ci], dtype=np.float64)
        clen = chunk.end - chunk.start
        if s.shape != (clen,) or e.shape != (clen,):
            raise DataError(f"logit length mismatch on chunk at {chunk.start}")
        ok = np.ones(clen, dtype=bool) if valid_masks is None else np.asarray(valid_masks[ci], dtype=bool)
        score = s[:, None] + e[None, :]
        lengths = np.arange(clen)[None, :] - np.arange(clen)[:, None]
        allowed = (lengths >= 0) & (lengths < max_answer_len) & ok[:, None] & ok[None, :]
        if not allowed.any():
            continue
        flat = np.where(allowed, score, -np.inf)
        top = flat.max()
        starts, ends = np.nonzero(flat == top)
        doc_starts = starts + chunk.start
        order = np.lexsort((ends - starts, doc_starts))
        pick = order[0]
        cand = (-top, int(doc_starts[pick]), int(ends[pick] - starts[pick]))
        if best is None or cand < best:
            best = cand
    if best is None:
        raise DataError("no valid answer span in any chunk")
    neg_score, doc_start, length = best
    return doc_start, doc_start + length, -neg_score


@dataclass(frozen=True)
class PooledPrediction:
    n: int
    p: tuple[float, ...]
    pooled: float


def pool_chunk_probabilities(p) -> PooledPrediction:
    """Combine per-chunk probabilities: (max + (n/2) * mean) / (1 + n/2).

    Interpolates max pooling toward the mean as the chunk count grows; a single
    chunk passes through unchanged.
    """
    probs = [float(x) for x in p]
    if not probs:
        raise DataError("cannot pool an empty probability list")
    arr = np.asarray(probs, dtype=np.float64)
    if (arr < 0).any() or (arr > 1).any():
        raise DataError("chunk probabilities must lie in [0, 1]")
    n = len(probs)
    pooled = (arr.max() + (n / 2.0) * arr.mean()) / (1.0 + n / 2.0)
    return PooledPrediction(n=n, p=tuple(probs), pooled=float(pooled))


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sequence_probabilities(ckpt: Checkpoint, ids) -> np.ndarray:
    """Single forward pass of a seq_cls model on [CLS] ids [SEP]."""
    cfg = ckpt.config
    row = np.concatenate([[bpe.CLS_ID], np.asarray(ids, dtype=np.int64), [bpe.SEP_ID]])
    batch = Batch(
        token_ids=row[None, :],
        pad_mask=np.zeros((1, len(row)), dtype=bool),
        global_mask=np.zeros((1, len(row)), dtype=bool),
    )
    hidden = encode_sequence(ckpt, batch)
    logits = apply_head(ckpt, hidden).data[0]
    if cfg.head.multilabel:
        return _sigmoid(logits)
    return _softmax(logits)


def classify_long_document(ckpt: Checkpoint, ids, cfg: ChunkingConfig):
    """Document-level probabilities: direct forward if the document fits the
    model, otherwise chunk, predict per chunk, and pool per label.

    Returns (probabilities [num_labels], per_chunk list of [num_labels] arrays).
    """
    if ckpt.config.head.kind != "seq_cls":
        raise ConfigError(f"classify_long_document needs a seq_cls head, got {ckpt.config.head.kind!r}")
    ids = np.asarray(ids, dtype=np.int64)
    if cfg.truncate_doc_to is not None:
        ids = ids[: cfg.truncate_doc_to]
    if len(ids) == 0:
        raise DataError("empty document")
    budget = ckpt.config.max_positions - 2  # CLS/SEP
    if len(ids) <= budget:
        probs = sequence_probabilities(ckpt, ids)
        return probs, [probs]
    chunk_len = min(cfg.chunk_len, budget)
    overlap = min(cfg.overlap, chunk_len - 1)
    chunk_cfg = ChunkingConfig(chunk_len=chunk_len, overlap=overlap,
                               stride_means_step=cfg.stride_means_step)
    chunk_set = chunk_with_stride(ids, chunk_cfg)
    per_chunk = [sequence_probabilities(ckpt, c.ids) for c in chunk_set.chunks]
    stacked = np.stack(per_chunk, axis=0)
    pooled = np.array([
        pool_chunk_probabilities(stacked[:, label]).pooled for label in range(stacked.shape[1])
    ])
    return pooled, per_chunk
