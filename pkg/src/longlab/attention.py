"""Attention patterns (full, sliding-window + global, block + global + random)
and pattern-masked single-head attention.

A pattern stores, per query row, a sorted list of disjoint key intervals, so the
memory footprint is structural: proportional to the number of allowed pairs, not
n^2. Rows whose intervals cover [0, n) ("full rows": global tokens, global
blocks) are evaluated densely; the remaining rows go through a padded gather so
scores are only ever materialized for allowed pairs. Patterns are immutable and
may be shared across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PatternError, ShapeError
from .tensor import (
    Tensor,
    concat,
    masked_softmax,
    matmul,
    sparse_attention,
    take_rows,
    transpose,
)

Interval = tuple[int, int]


def _merge_intervals(intervals: list[Interval]) -> list[Interval]:
    merged: list[Interval] = []
    for s, e in sorted(intervals):
        if s >= e:
            continue
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


@dataclass
class AttentionPattern:
    n: int
    rows: list[list[Interval]]  # merged, disjoint, sorted per row
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise PatternError("pattern needs n >= 1")
        if len(self.rows) != self.n:
            raise PatternError(f"{len(self.rows)} rows for n={self.n}")
        for i, row in enumerate(self.rows):
            if not self.contains(i, i):
                raise PatternError(f"row {i} does not attend to itself")
            if row[0][0] < 0 or row[-1][1] > self.n:
                raise PatternError(f"row {i} has out-of-range intervals")

    def contains(self, i: int, j: int) -> bool:
        return any(s <= j < e for s, e in self.rows[i])

    def row_width(self, i: int) -> int:
        return sum(e - s for s, e in self.rows[i])

    def is_full_row(self, i: int) -> bool:
        return self.rows[i] == [(0, self.n)]

    def pair_count(self) -> int:
        return sum(self.row_width(i) for i in range(self.n))

    def density(self) -> float:
        return self.pair_count() / (self.n * self.n)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=bool)
        for i, row in enumerate(self.rows):
            for s, e in row:
                dense[i, s:e] = True
        return dense

    def split_rows(self):
        """(full_row_indices, sparse_row_indices) as int arrays."""
        key = "split"
        if key not in self._cache:
            full = np.array([i for i in range(self.n) if self.is_full_row(i)], dtype=np.intp)
            sparse = np.array([i for i in range(self.n) if not self.is_full_row(i)], dtype=np.intp)
            self._cache[key] = (full, sparse)
        return self._cache[key]

    def gather_table(self):
        """Padded key-index table for the sparse rows: (idx [r, w], valid [r, w]).

        Built from the interval lists without per-row array allocation, so a
        fresh pattern (per-example global sets) costs little to expand.
        """
        key = "gather"
        if key not in self._cache:
            _, sparse = self.split_rows()
            if sparse.size == 0:
                self._cache[key] = (np.zeros((0, 1), dtype=np.intp), np.zeros((0, 1), dtype=bool))
            else:
                row_intervals = [self.rows[int(i)] for i in sparse]
                counts = np.array([len(r) for r in row_intervals])
                bounds = np.array([iv for r in row_intervals for iv in r], dtype=np.int64)
                lengths = bounds[:, 1] - bounds[:, 0]
                widths = np.add.reduceat(lengths, np.concatenate([[0], np.cumsum(counts)[:-1]]))
                total = int(lengths.sum())
                ivl_offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
                flat_cols = np.arange(total) + np.repeat(bounds[:, 0] - ivl_offsets, lengths)
                row_of_pair = np.repeat(np.repeat(np.arange(len(row_intervals)), counts), lengths)
                row_offsets = np.concatenate([[0], np.cumsum(widths)[:-1]])
                slot = np.arange(total) - row_offsets[row_of_pair]
                idx = np.zeros((len(row_intervals), int(widths.max())), dtype=np.intp)
                valid = np.zeros(idx.shape, dtype=bool)
                idx[row_of_pair, slot] = flat_cols
                valid[row_of_pair, slot] = True
                self._cache[key] = (idx, valid)
        return self._cache[key]


def pattern_stats(pattern: AttentionPattern) -> dict:
    count = pattern.pair_count()
    return {"pair_count": count, "density": count / (pattern.n * pattern.n)}


def dump_pattern(pattern: AttentionPattern, fh) -> None:
    """Debug dump: one JSON object per row with its allowed intervals."""
    for i, row in enumerate(pattern.rows):
        fh.write(json.dumps({"row": i, "intervals": [[s, e] for s, e in row]}) + "\n")


# ---------------------------------------------------------------------------
# builders


def build_full_pattern(n: int) -> AttentionPattern:
    if n < 1:
        raise PatternError("full pattern needs n >= 1")
    return AttentionPattern(n=n, rows=[[(0, n)] for _ in range(n)])


def build_longformer_pattern(n: int, window_radius: int, global_set) -> AttentionPattern:
    """Sliding window of +-window_radius around each token, plus symmetric
    global closure for every index in global_set."""
    if n < 1:
        raise PatternError("pattern needs n >= 1")
    if window_radius < 0:
        raise PatternError("window_radius must be >= 0")
    globals_sorted = sorted(set(int(g) for g in global_set))
    for g in globals_sorted:
        if not 0 <= g < n:
            raise PatternError(f"global index {g} out of range for n={n}")
    global_cols = [(g, g + 1) for g in globals_sorted]
    rows = []
    gset = set(globals_sorted)
    for i in range(n):
        if i in gset:
            rows.append([(0, n)])
        else:
            intervals = [(max(0, i - window_radius), min(n, i + window_radius + 1))]
            intervals.extend(global_cols)
            rows.append(_merge_intervals(intervals))
    return AttentionPattern(n=n, rows=rows)


def build_bigbird_pattern(n: int, block_size: int, global_block_count: int,
                          random_blocks_per_query: int, seed: int) -> AttentionPattern:
    """Block window (q-1, q, q+1) + leading global blocks (rows and columns) +
    per-query-block random key blocks, sampled without replacement from the
    blocks not already attended. Deterministic in (n, block_size,
    global_block_count, random_blocks_per_query, seed)."""
    if n < 1:
        raise PatternError("pattern needs n >= 1")
    if block_size < 1:
        raise PatternError("block_size must be >= 1")
    if global_block_count < 0 or random_blocks_per_query < 0:
        raise PatternError("block counts must be >= 0")
    nb = math.ceil(n / block_size)
    gbc = min(global_block_count, nb)

    def block_interval(b: int) -> Interval:
        return (b * block_size, min(n, (b + 1) * block_size))

    rows: list[list[Interval]] = []
    for q in range(nb):
        if q < gbc:
            row = [(0, n)]
        else:
            fixed = {b for b in (q - 1, q, q + 1) if 0 <= b < nb}
            fixed.update(range(gbc))
            pool = [b for b in range(nb) if b not in fixed]
            if len(fixed) < nb:
                if random_blocks_per_query > len(pool):
                    raise PatternError(
                        f"random_blocks_per_query={random_blocks_per_query} exceeds the "
                        f"{len(pool)} blocks available to query block {q}"
                    )
                if random_blocks_per_query:
                    rng = np.random.default_rng([seed, q])
                    picks = rng.choice(len(pool), size=random_blocks_per_query, replace=False)
                    fixed.update(pool[int(p)] for p in picks)
            row = _merge_intervals([block_interval(b) for b in sorted(fixed)])
        start, end = block_interval(q)
        rows.extend([list(row)] * (end - start))

    # transposed global closure: every row attends the global columns
    if gbc:
        gcols = (0, min(n, gbc * block_size))
        rows = [r if r == [(0, n)] else _merge_intervals(r + [gcols]) for r in rows]
    return AttentionPattern(n=n, rows=rows)


def build_pattern(config, n: int, extra_globals=()) -> AttentionPattern:
    """Build the pattern described by an AttentionConfig for sequence length n.

    For longformer kinds the config global set is unioned with extra_globals
    (per-example global tokens, e.g. question tokens). BigBird globals are the
    leading blocks and are fixed by the config; callers wanting per-example
    globals place those tokens in the leading blocks.
    """
    kind = config.kind
    if kind == "full":
        return build_full_pattern(n)
    if kind == "longformer":
        globals_set = {g for g in config.global_tokens if g < n}
        globals_set.update(g for g in extra_globals if g < n)
        return build_longformer_pattern(n, config.window_radius, globals_set)
    if kind == "bigbird":
        return build_bigbird_pattern(
            n, config.block_size, config.global_block_count,
            config.random_blocks_per_query, config.seed,
        )
    raise PatternError(f"unknown attention kind {kind!r}")


# ---------------------------------------------------------------------------
# evaluation


def attention_forward(q: Tensor, k: Tensor, v: Tensor, pattern: AttentionPattern,
                      scale: float) -> Tensor:
    """Single-head pattern-masked attention: softmax(scale * QK^T | pattern) V.

    Full rows run densely; the rest go through the fused sparse primitive, so
    scores exist only for allowed pairs. Differentiable through the tape.
    """
    n, d = q.data.shape
    if pattern.n != n or k.data.shape != (n, d) or v.data.shape != (n, d):
        raise ShapeError(
            f"attention_forward: pattern n={pattern.n}, q={q.data.shape}, "
            f"k={k.data.shape}, v={v.data.shape}"
        )
    full_idx, sparse_idx = pattern.split_rows()

    pieces = []
    if full_idx.size:
        qf = take_rows(q, full_idx) if full_idx.size != n else q
        scores = matmul(qf * scale, transpose(k, (1, 0)))
        probs = masked_softmax(scores, np.ones(scores.data.shape, dtype=bool))
        pieces.append(matmul(probs, v))
    if sparse_idx.size:
        idx, valid = pattern.gather_table()
        qs = take_rows(q, sparse_idx) if sparse_idx.size != n else q
        pieces.append(sparse_attention(qs, k, v, idx, valid, scale))

    if len(pieces) == 1 and (full_idx.size == n or sparse_idx.size == n):
        return pieces[0]
    order = np.concatenate([full_idx, sparse_idx])
    inverse = np.argsort(order)
    return take_rows(concat(pieces, axis=0), inverse)
