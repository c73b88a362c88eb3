"""Evaluation metrics: QA exact match / token F1, entity-level NER F1, accuracy,
ROC-AUC (Mann-Whitney with midrank ties), and sample-weighted mean AUC."""

from __future__ import annotations

import re
import string

import numpy as np

from .errors import DataError

_ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str, strip_articles: bool = True) -> str:
    """Lowercase, drop punctuation, optionally drop English articles, collapse spaces."""
    text = text.lower().translate(_PUNCT_TABLE)
    words = text.split()
    if strip_articles:
        words = [w for w in words if w not in _ARTICLES]
    return " ".join(words)


def qa_em_f1(pred: str, golds) -> dict:
    """SQuAD-style exact match and token F1 against one or more gold answers.

    EM compares fully normalized strings (articles removed). Token F1 counts
    multiset overlap of normalized tokens with articles kept, so "big cat" vs
    "the cat" scores 0.5. Both empty counts as a perfect match.
    """
    golds = list(golds)
    if not golds:
        raise DataError("qa_em_f1 needs at least one gold answer")
    em = 0
    f1 = 0.0
    pred_em = normalize_answer(pred, strip_articles=True)
    pred_tokens = normalize_answer(pred, strip_articles=False).split()
    for gold in golds:
        if normalize_answer(gold, strip_articles=True) == pred_em:
            em = 1
        gold_tokens = normalize_answer(gold, strip_articles=False).split()
        f1 = max(f1, _token_f1(pred_tokens, gold_tokens))
    return {"em": em, "f1": f1}


def _token_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    counts: dict[str, int] = {}
    for t in pred_tokens:
        counts[t] = counts.get(t, 0) + 1
    overlap = 0
    for t in gold_tokens:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


_TAG_RE = re.compile(r"^(O|[BI]-.+)$")


def _check_tags(tags) -> list[str]:
    out = []
    for t in tags:
        if not isinstance(t, str) or not _TAG_RE.match(t):
            raise DataError(f"malformed IOB tag {t!r}")
        out.append(t)
    return out


def iob_entities(tags) -> set[tuple[str, int, int]]:
    """Decode IOB tags to (type, start, end) spans, end exclusive.

    Lenient about model output: a dangling I-t (no matching open entity)
    starts a new entity, conll-style.
    """
    tags = _check_tags(tags)
    entities = set()
    start = None
    etype = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                entities.add((etype, start, i))
                start = None
            continue
        prefix, t = tag.split("-", 1)
        if prefix == "B" or etype != t or start is None:
            if start is not None:
                entities.add((etype, start, i))
            start, etype = i, t
    if start is not None:
        entities.add((etype, start, len(tags)))
    return entities


def ner_entity_f1(pairs) -> dict:
    """Micro precision/recall/F1 over exact (type, start, end) entity matches."""
    tp = pred_total = gold_total = 0
    for gold_tags, pred_tags in pairs:
        if len(gold_tags) != len(pred_tags):
            raise DataError(
                f"tag sequences differ in length: {len(gold_tags)} vs {len(pred_tags)}"
            )
        gold = iob_entities(gold_tags)
        pred = iob_entities(pred_tags)
        tp += len(gold & pred)
        pred_total += len(pred)
        gold_total += len(gold)
    precision = tp / pred_total if pred_total else 0.0
    recall = tp / gold_total if gold_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def ner_token_f1(pairs) -> dict:
    """Secondary token-level scores: micro P/R/F1 over non-O tag agreement."""
    tp = pred_total = gold_total = 0
    for gold_tags, pred_tags in pairs:
        if len(gold_tags) != len(pred_tags):
            raise DataError(
                f"tag sequences differ in length: {len(gold_tags)} vs {len(pred_tags)}"
            )
        for g, p in zip(_check_tags(gold_tags), _check_tags(pred_tags)):
            if p != "O":
                pred_total += 1
            if g != "O":
                gold_total += 1
            if g != "O" and g == p:
                tp += 1
    precision = tp / pred_total if pred_total else 0.0
    recall = tp / gold_total if gold_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(equal), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def weighted_mean_auc(per_label) -> float:
    """Positive-count weighted mean of per-label AUCs.

    per_label: iterable of (auc, positive_count) pairs or dicts with those keys.
    """
    entries = []
    for item in per_label:
        if isinstance(item, dict):
            entries.append((float(item["auc"]), float(item["positive_count"])))
        else:
            auc, count = item
            entries.append((float(auc), float(count)))
    if not entries:
        raise DataError("weighted_mean_auc needs at least one label")
    if any(w <= 0 for _, w in entries):
        raise DataError("weights must be positive")
    total = sum(w for _, w in entries)
    return sum(a * w for a, w in entries) / total


def accuracy(preds, golds) -> float:
    preds = list(preds)
    golds = list(golds)
    if len(preds) != len(golds):
        raise DataError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise DataError("accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)
