"""Note cleaning, corpus loading, and synthetic corpora with plantable long-range cues.

Cleaning follows four fixed steps, in order: drop de-identification placeholders
(the ``[** ... **]`` convention), replace anything that is not ASCII alphanumeric
or ASCII punctuation with a space, lowercase, and collapse whitespace. Placeholder
removal runs first so bracket/asterisk remnants never survive the character filter.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigError, DataError

PLACEHOLDER_RE = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)

# Characters kept verbatim by the filter step (before lowercasing).
_KEEP = frozenset(string.ascii_letters + string.digits + string.punctuation)
_CLEAN_ALLOWED = frozenset(string.ascii_lowercase + string.digits + string.punctuation + " ")


@dataclass(frozen=True)
class RawDocument:
    id: str
    text: str


@dataclass(frozen=True)
class CleanDocument:
    id: str
    text: str

    def as_raw(self) -> RawDocument:
        return RawDocument(id=self.id, text=self.text)


def clean_text(text: str) -> str:
    """Apply the four cleaning steps to a string."""
    text = PLACEHOLDER_RE.sub("", text)
    text = "".join(ch if ch in _KEEP else " " for ch in text)
    text = text.lower()
    return " ".join(text.split())


def clean_note(raw: RawDocument) -> CleanDocument:
    """Clean one document. Bytes input must be valid UTF-8."""
    text = raw.text
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"document {raw.id!r}: invalid UTF-8 ({exc})") from exc
    return CleanDocument(id=raw.id, text=clean_text(text))


def is_clean(text: str) -> bool:
    """Check the CleanDocument character/spacing invariants."""
    if text != " ".join(text.split()):
        return False
    if PLACEHOLDER_RE.search(text):
        return False
    return all(ch in _CLEAN_ALLOWED for ch in text)


def load_corpus(path, format: str = "jsonl") -> Iterator[RawDocument]:
    """Stream documents from a plain-lines or jsonl file in file order.

    plain-lines: one document per line (empty lines skipped), ids "line-<k>"
    with k the 1-based line number. jsonl: one object per line with string
    fields "id" and "text".
    """
    if format not in ("plain-lines", "jsonl"):
        raise ConfigError(f"unknown corpus format {format!r}")
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open corpus {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if format == "plain-lines":
                if line.strip():
                    yield RawDocument(id=f"line-{lineno}", text=line)
                continue
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise DataError(f"{path}:{lineno}: expected object with 'id' and 'text'")
            if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
                raise DataError(f"{path}:{lineno}: 'id' and 'text' must be strings")
            yield RawDocument(id=obj["id"], text=obj["text"])


_WORD_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"


def filler_word(k: int) -> str:
    """Deterministic filler vocabulary: a, b, ..., 9, aa, ab, ... (bijective base 36)."""
    if k < 0:
        raise ValueError("word index must be nonnegative")
    chars = []
    k += 1
    while k:
        k, rem = divmod(k - 1, len(_WORD_ALPHABET))
        chars.append(_WORD_ALPHABET[rem])
    return "".join(reversed(chars))


@dataclass(frozen=True)
class SynthSpec:
    num_docs: int
    doc_length_tokens: int
    vocab_words: int
    dependency_distance: int
    dependency_rules: Mapping[str, str]
    seed: int


def _validate_synth_spec(spec: SynthSpec) -> None:
    if spec.num_docs < 1:
        raise ConfigError("num_docs must be >= 1")
    if spec.doc_length_tokens < 1:
        raise ConfigError("doc_length_tokens must be >= 1")
    if spec.vocab_words < 1:
        raise ConfigError("vocab_words must be >= 1")
    if spec.dependency_distance <= 0:
        # distance 0 would put cue and target in the same slot; "long-range"
        # stops meaning anything, so it is rejected outright
        raise ConfigError("dependency_distance must be >= 1")
    if spec.dependency_distance >= spec.doc_length_tokens:
        raise ConfigError(
            f"dependency_distance {spec.dependency_distance} must be < "
            f"doc_length_tokens {spec.doc_length_tokens}"
        )
    if not spec.dependency_rules:
        raise ConfigError("dependency_rules must not be empty")
    for cue, target in spec.dependency_rules.items():
        for word in (cue, target):
            if not word or " " in word or not all(c in _CLEAN_ALLOWED for c in word):
                raise ConfigError(f"rule word {word!r} is not a valid cleaned token")


def synth_corpus_with_annotations(spec: SynthSpec):
    """Generate documents plus (cue, target, positions) annotations.

    Deterministic in spec.seed. Document i uses rule i % len(rules) (sorted by
    cue) with the cue at a pseudorandom position p and the target at
    p + dependency_distance; every other slot is a filler word drawn uniformly
    from the first vocab_words entries of the filler vocabulary.
    """
    _validate_synth_spec(spec)
    rules = sorted(spec.dependency_rules.items())
    docs: list[CleanDocument] = []
    annotations: list[dict] = []
    for i in range(spec.num_docs):
        rng = np.random.default_rng([spec.seed, i])
        cue, target = rules[i % len(rules)]
        p = int(rng.integers(0, spec.doc_length_tokens - spec.dependency_distance))
        words = [filler_word(int(w)) for w in rng.integers(0, spec.vocab_words, spec.doc_length_tokens)]
        words[p] = cue
        words[p + spec.dependency_distance] = target
        doc = CleanDocument(id=f"synth-{i}", text=" ".join(words))
        docs.append(doc)
        annotations.append(
            {
                "id": doc.id,
                "cue": cue,
                "target": target,
                "cue_pos": p,
                "target_pos": p + spec.dependency_distance,
            }
        )
    return docs, annotations


def synth_corpus(spec: SynthSpec) -> list[CleanDocument]:
    docs, _ = synth_corpus_with_annotations(spec)
    return docs
