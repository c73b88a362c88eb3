"""Byte-level BPE: training, encoding/decoding, and JSON persistence.

Ids 0..3 are reserved for the special tokens (PAD, CLS, SEP, MASK); raw bytes
occupy 4..259 and learned merges follow in rank order. Merges are counted over
whole documents with no pre-tokenization; ties between equally frequent pairs
go to the lexicographically smallest (left id, right id) so training is
deterministic and insensitive to document order. A trained model is immutable,
so encode/decode are safe for any number of concurrent readers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import TokenizerError

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = {"<pad>": PAD_ID, "<cls>": CLS_ID, "<sep>": SEP_ID, "<mask>": MASK_ID}
NUM_SPECIALS = len(SPECIAL_TOKENS)
BYTE_BASE = NUM_SPECIALS  # byte b <-> id BYTE_BASE + b
FIRST_MERGE_ID = BYTE_BASE + 256

TOKENIZER_FORMAT_VERSION = 1


def _bytes_to_unicode() -> dict[int, str]:
    # GPT-2 style printable byte alphabet, so symbols serialize as JSON strings
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


_BYTE_TO_CHAR = _bytes_to_unicode()
_CHAR_TO_BYTE = {c: b for b, c in _BYTE_TO_CHAR.items()}


def _render(raw: bytes) -> str:
    return "".join(_BYTE_TO_CHAR[b] for b in raw)


def _unrender(sym: str) -> bytes:
    try:
        return bytes(_CHAR_TO_BYTE[c] for c in sym)
    except KeyError as exc:
        raise TokenizerError(f"symbol {sym!r} contains a non-alphabet character") from exc


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[int, int], ...]  # (left id, right id) in rank order
    id_to_bytes: dict[int, bytes] = field(repr=False)  # non-special ids only

    @property
    def vocab_size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    @property
    def merge_ranks(self) -> dict[tuple[int, int], int]:
        return {pair: FIRST_MERGE_ID + rank for rank, pair in enumerate(self.merges)}

    def symbol_vocab(self) -> dict[str, int]:
        vocab = dict(SPECIAL_TOKENS)
        for i, raw in sorted(self.id_to_bytes.items()):
            vocab[_render(raw)] = i
        return vocab


def _corpus_ids(corpus: Iterable) -> list[list[int]]:
    seqs = []
    for doc in corpus:
        text = doc.text if hasattr(doc, "text") else doc
        seqs.append([BYTE_BASE + b for b in text.encode("utf-8")])
    return seqs


def _count_pairs(seqs: list[list[int]]) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for seq in seqs:
        for pair in zip(seq, seq[1:]):
            counts[pair] = counts.get(pair, 0) + 1
    return counts


def _merge_updating_counts(seq, pair, new_id, counts):
    """Replace occurrences of pair with new_id, adjusting adjacency counts in place."""
    a, b = pair
    out = []
    i, m = 0, len(seq)
    while i < m:
        if i < m - 1 and seq[i] == a and seq[i + 1] == b:
            if out:
                counts[(out[-1], a)] -= 1
                counts[(out[-1], new_id)] = counts.get((out[-1], new_id), 0) + 1
            if i + 2 < m:
                nxt = seq[i + 2]
                counts[(b, nxt)] -= 1
                counts[(new_id, nxt)] = counts.get((new_id, nxt), 0) + 1
            counts[pair] -= 1
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus: Iterable, target_vocab: int) -> BpeModel:
    """Greedy pair-merge training until the vocabulary reaches target_vocab.

    Stops early if no adjacent pairs remain. Raises on an empty corpus or a
    target smaller than bytes + specials.
    """
    if target_vocab < FIRST_MERGE_ID:
        raise TokenizerError(
            f"target_vocab must be >= {FIRST_MERGE_ID} (256 bytes + {NUM_SPECIALS} specials)"
        )
    seqs = _corpus_ids(corpus)
    if not seqs:
        raise TokenizerError("cannot train on an empty corpus")

    id_to_bytes = {BYTE_BASE + b: bytes([b]) for b in range(256)}
    merges: list[tuple[int, int]] = []
    counts = _count_pairs(seqs)
    while FIRST_MERGE_ID + len(merges) < target_vocab:
        best = None
        best_count = 0
        for pair, c in counts.items():
            if c > best_count or (c == best_count and c > 0 and pair < best):
                best, best_count = pair, c
        if best is None or best_count == 0:
            break
        new_id = FIRST_MERGE_ID + len(merges)
        seqs = [
            _merge_updating_counts(seq, best, new_id, counts) if best_count else seq
            for seq in seqs
        ]
        counts = {p: c for p, c in counts.items() if c > 0}
        id_to_bytes[new_id] = id_to_bytes[best[0]] + id_to_bytes[best[1]]
        merges.append(best)
    return BpeModel(merges=tuple(merges), id_to_bytes=id_to_bytes)


def _apply_merges(model: BpeModel, ids: list[int], spans: list[tuple[int, int]] | None = None):
    """Apply merges in rank order: lowest-rank pair present gets merged first."""
    ranks = model.merge_ranks
    if not ranks:
        return (ids, spans) if spans is not None else ids
    while len(ids) >= 2:
        best_pair = None
        best_rank = None
        for pair in zip(ids, ids[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_pair, best_rank = pair, r
        if best_pair is None:
            break
        a, b = best_pair
        out = []
        out_spans = [] if spans is not None else None
        i, m = 0, len(ids)
        while i < m:
            if i < m - 1 and ids[i] == a and ids[i + 1] == b:
                out.append(best_rank)
                if out_spans is not None:
                    out_spans.append((spans[i][0], spans[i + 1][1]))
                i += 2
            else:
                out.append(ids[i])
                if out_spans is not None:
                    out_spans.append(spans[i])
                i += 1
        ids = out
        if spans is not None:
            spans = out_spans
    return (ids, spans) if spans is not None else ids


def encode(model: BpeModel, text: str, add_specials: bool = False) -> list[int]:
    ids = [BYTE_BASE + b for b in text.encode("utf-8")]
    ids = _apply_merges(model, ids)
    if add_specials:
        return [CLS_ID] + ids + [SEP_ID]
    return ids


def encode_with_offsets(model: BpeModel, text: str):
    """Encode without specials, returning per-token (byte_start, byte_end) spans."""
    raw = text.encode("utf-8")
    ids = [BYTE_BASE + b for b in raw]
    spans = [(i, i + 1) for i in range(len(raw))]
    return _apply_merges(model, ids, spans)


def decode(model: BpeModel, ids: Sequence[int]) -> str:
    """Inverse of encode; special tokens are dropped."""
    parts = []
    for i in ids:
        i = int(i)
        if i in (PAD_ID, CLS_ID, SEP_ID, MASK_ID):
            continue
        raw = model.id_to_bytes.get(i)
        if raw is None:
            raise TokenizerError(f"unknown token id {i}")
        parts.append(raw)
    return b"".join(parts).decode("utf-8", errors="replace")


def save_bpe(model: BpeModel, path) -> None:
    obj = {
        "version": TOKENIZER_FORMAT_VERSION,
        "special_tokens": SPECIAL_TOKENS,
        "merges": [
            [_render(model.id_to_bytes[a]), _render(model.id_to_bytes[b])]
            for a, b in model.merges
        ],
        "vocab": model.symbol_vocab(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_bpe(path) -> BpeModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TokenizerError(f"{path}: not valid JSON ({exc.msg})") from exc
    if obj.get("version") != TOKENIZER_FORMAT_VERSION:
        raise TokenizerError(f"{path}: unsupported tokenizer version {obj.get('version')!r}")
    if obj.get("special_tokens") != SPECIAL_TOKENS:
        raise TokenizerError(f"{path}: special token table does not match this build")
    vocab = obj.get("vocab")
    merges = obj.get("merges")
    if not isinstance(vocab, dict) or not isinstance(merges, list):
        raise TokenizerError(f"{path}: missing vocab or merges")

    sym_to_id = {}
    for sym, i in vocab.items():
        if sym in SPECIAL_TOKENS:
            continue
        sym_to_id[sym] = int(i)
    id_to_bytes = {}
    for sym, i in sym_to_id.items():
        id_to_bytes[i] = _unrender(sym)
    for b in range(256):
        if BYTE_BASE + b not in id_to_bytes:
            raise TokenizerError(f"{path}: byte symbol {b} missing from vocab")

    merge_pairs = []
    for rank, entry in enumerate(merges):
        if not (isinstance(entry, list) and len(entry) == 2):
            raise TokenizerError(f"{path}: merge {rank} is not a symbol pair")
        left, right = sym_to_id.get(entry[0]), sym_to_id.get(entry[1])
        new_id = FIRST_MERGE_ID + rank
        if left is None or right is None or left >= new_id or right >= new_id:
            raise TokenizerError(f"{path}: merge {rank} references an unknown or later symbol")
        if id_to_bytes.get(new_id) != id_to_bytes[left] + id_to_bytes[right]:
            raise TokenizerError(f"{path}: merge {rank} is inconsistent with the vocab")
        merge_pairs.append((left, right))
    if len(id_to_bytes) != 256 + len(merge_pairs):
        raise TokenizerError(f"{path}: vocab size does not match merge count")
    return BpeModel(merges=tuple(merge_pairs), id_to_bytes=id_to_bytes)
