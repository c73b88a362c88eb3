"""Downstream task plumbing: JSONL loaders, featurization into model batches,
chunked prediction, and per-task dev metrics.

Task inputs follow fixed JSONL shapes (see the CLI docs): QA examples carry a
context/question/answers triple; NER examples word tokens plus IOB tags;
classification examples a text with a binary label or a list of active label
names; NLI examples premise/hypothesis/label. QA windows replicate the question
in front of every context chunk, since the span head needs the question
in-window; question tokens and CLS get global attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import bpe
from .errors import ConfigError, DataError
from .longdoc import (
    ChunkingConfig,
    ChunkSet,
    aggregate_qa_spans,
    aggregate_token_predictions,
    chunk_with_stride,
    classify_long_document,
)
from .metrics import accuracy, ner_entity_f1, qa_em_f1, roc_auc, weighted_mean_auc
from .model import IGNORE_ID, Batch, Checkpoint, apply_head, encode_sequence

TASKS = ("span_qa", "token_cls", "seq_cls", "nli")
NLI_LABELS = ("contradiction", "entailment", "neutral")
DEFAULT_MAX_ANSWER_LEN = 30


@dataclass(frozen=True)
class QaExample:
    id: str
    context: str
    question: str
    answers: tuple  # of {"text": str, "start_char": int}


@dataclass(frozen=True)
class NerExample:
    id: str
    tokens: tuple
    tags: tuple


@dataclass(frozen=True)
class ClsExample:
    id: str
    text: str
    label: int | None = None          # binary task
    labels: tuple | None = None       # multilabel task: active label names


@dataclass(frozen=True)
class NliExample:
    id: str
    premise: str
    hypothesis: str
    label: str


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def _require(obj, key, lineno, path):
    if key not in obj:
        raise DataError(f"{path}:{lineno} (id={obj.get('id', '?')!r}): missing field {key!r}")
    return obj[key]


def load_examples(task: str, path) -> list:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    out = []
    for lineno, obj in _read_jsonl(path):
        rid = str(_require(obj, "id", lineno, path))
        if task == "span_qa":
            answers = _require(obj, "answers", lineno, path)
            if not answers:
                raise DataError(f"{path}:{lineno} (id={rid!r}): empty answers")
            for a in answers:
                if "text" not in a or "start_char" not in a:
                    raise DataError(f"{path}:{lineno} (id={rid!r}): answer needs text/start_char")
            out.append(QaExample(
                id=rid,
                context=_require(obj, "context", lineno, path),
                question=_require(obj, "question", lineno, path),
                answers=tuple(dict(a) for a in answers),
            ))
        elif task == "token_cls":
            tokens = tuple(_require(obj, "tokens", lineno, path))
            tags = tuple(_require(obj, "tags", lineno, path))
            if len(tokens) != len(tags) or not tokens:
                raise DataError(f"{path}:{lineno} (id={rid!r}): tokens/tags length mismatch")
            out.append(NerExample(id=rid, tokens=tokens, tags=tags))
        elif task == "seq_cls":
            text = _require(obj, "text", lineno, path)
            if "labels" in obj:
                out.append(ClsExample(id=rid, text=text, labels=tuple(obj["labels"])))
            else:
                label = _require(obj, "label", lineno, path)
                if label not in (0, 1):
                    raise DataError(f"{path}:{lineno} (id={rid!r}): binary label must be 0 or 1")
                out.append(ClsExample(id=rid, text=text, label=int(label)))
        else:
            label = _require(obj, "label", lineno, path)
            if label not in NLI_LABELS:
                raise DataError(f"{path}:{lineno} (id={rid!r}): label must be one of {NLI_LABELS}")
            out.append(NliExample(
                id=rid,
                premise=_require(obj, "premise", lineno, path),
                hypothesis=_require(obj, "hypothesis", lineno, path),
                label=label,
            ))
    return out


# ---------------------------------------------------------------------------
# label spaces


def build_label_space(task: str, examples) -> tuple:
    """Sorted label vocabulary inferred from the training data."""
    if task == "token_cls":
        tags = sorted({t for ex in examples for t in ex.tags})
        if "O" not in tags:
            tags = ["O"] + tags
        return tuple(tags)
    if task == "seq_cls":
        if examples and examples[0].labels is not None:
            return tuple(sorted({name for ex in examples for name in ex.labels}))
        return (0, 1)
    if task == "nli":
        return NLI_LABELS
    return ()


def _byte_span(context: str, start_char: int, text: str) -> tuple[int, int]:
    start = len(context[:start_char].encode("utf-8"))
    return start, start + len(text.encode("utf-8"))


def _token_span(spans, byte_start, byte_end):
    toks = [i for i, (s, e) in enumerate(spans) if e > byte_start and s < byte_end]
    if not toks:
        return None
    return toks[0], toks[-1]


def _qa_window_budget(config, tokenizer_question_len: int, chunk_cfg: ChunkingConfig):
    window = min(config.max_positions, chunk_cfg.chunk_len)
    budget = window - tokenizer_question_len - 3
    if budget < 1:
        raise DataError("question leaves no room for context in the attention window")
    overlap = min(chunk_cfg.overlap, budget - 1) if budget > 1 else 0
    return budget, overlap


def featurize(task, examples, tokenizer, config, chunk_cfg=None, label_space=None):
    """Turn task examples into per-window training features."""
    if chunk_cfg is None:
        chunk_cfg = ChunkingConfig(chunk_len=config.max_positions, overlap=0)
    feats = []
    for ex in examples:
        if task == "span_qa":
            feats.extend(_featurize_qa(ex, tokenizer, config, chunk_cfg))
        elif task == "token_cls":
            feats.append(_featurize_ner(ex, tokenizer, config, label_space))
        elif task == "seq_cls":
            feats.append(_featurize_cls(ex, tokenizer, config, label_space))
        elif task == "nli":
            feats.append(_featurize_nli(ex, tokenizer, config))
        else:
            raise ConfigError(f"unknown task {task!r}")
    return feats


def _featurize_qa(ex: QaExample, tokenizer, config, chunk_cfg):
    q_ids = bpe.encode(tokenizer, ex.question)
    ctx_ids, ctx_spans = bpe.encode_with_offsets(tokenizer, ex.context)
    if not ctx_ids:
        raise DataError(f"example {ex.id!r}: empty context")
    budget, overlap = _qa_window_budget(config, len(q_ids), chunk_cfg)
    chunk_set = chunk_with_stride(
        ctx_ids, ChunkingConfig(chunk_len=budget, overlap=overlap), doc_id=ex.id
    )
    gold = ex.answers[0]
    bstart, bend = _byte_span(ex.context, int(gold["start_char"]), gold["text"])
    tok_span = _token_span(ctx_spans, bstart, bend)
    if tok_span is None:
        raise DataError(f"example {ex.id!r}: answer span maps to no tokens")
    feats = []
    ctx_offset = 2 + len(q_ids)  # CLS + question + SEP
    for chunk in chunk_set.chunks:
        ids = np.concatenate([
            [bpe.CLS_ID], q_ids, [bpe.SEP_ID], chunk.ids, [bpe.SEP_ID]
        ]).astype(np.int64)
        global_mask = np.zeros(len(ids), dtype=bool)
        global_mask[: len(q_ids) + 1] = True  # CLS + question tokens
        ts, te = tok_span
        if chunk.start <= ts and te < chunk.end:
            start_label = ctx_offset + ts - chunk.start
            end_label = ctx_offset + te - chunk.start
        else:
            start_label = end_label = 0  # answer not in this window: point at CLS
        feats.append({
            "id": ex.id,
            "ids": ids,
            "global": global_mask,
            "start": start_label,
            "end": end_label,
            "ctx_offset": ctx_offset,
            "chunk": chunk,
        })
    return feats


def _featurize_ner(ex: NerExample, tokenizer, config, label_space):
    tag_to_id = {t: i for i, t in enumerate(label_space)}
    sub_ids: list[int] = []
    sub_labels: list[int] = []
    word_first: list[int] = []
    for word, tag in zip(ex.tokens, ex.tags):
        if tag not in tag_to_id:
            raise DataError(f"example {ex.id!r}: tag {tag!r} not in label space {label_space}")
        pieces = bpe.encode(tokenizer, word)
        if not pieces:
            raise DataError(f"example {ex.id!r}: token {word!r} produced no subtokens")
        word_first.append(len(sub_ids))
        sub_ids.extend(pieces)
        sub_labels.extend([tag_to_id[tag]] + [IGNORE_ID] * (len(pieces) - 1))
    budget = config.max_positions - 2
    if len(sub_ids) > budget:
        raise DataError(
            f"example {ex.id!r}: {len(sub_ids)} subtokens exceed the single-window "
            f"budget {budget}; route long documents through predict_ner"
        )
    ids = np.array([bpe.CLS_ID] + sub_ids + [bpe.SEP_ID], dtype=np.int64)
    labels = np.array([IGNORE_ID] + sub_labels + [IGNORE_ID], dtype=np.int64)
    global_mask = np.zeros(len(ids), dtype=bool)
    return {
        "id": ex.id,
        "ids": ids,
        "labels": labels,
        "global": global_mask,
        "word_first": word_first,
        "n_sub": len(sub_ids),
    }


def _featurize_cls(ex: ClsExample, tokenizer, config, label_space):
    ids = bpe.encode(tokenizer, ex.text)[: config.max_positions - 2]
    if not ids:
        raise DataError(f"example {ex.id!r}: empty text")
    row = np.array([bpe.CLS_ID] + ids + [bpe.SEP_ID], dtype=np.int64)
    global_mask = np.zeros(len(row), dtype=bool)
    if ex.labels is not None:
        vec = np.array([1.0 if name in ex.labels else 0.0 for name in label_space])
        if config.head.num_labels != len(label_space):
            raise ConfigError(
                f"head has {config.head.num_labels} labels, data implies {len(label_space)}"
            )
        return {"id": ex.id, "ids": row, "global": global_mask, "label_vec": vec}
    if not 0 <= ex.label < config.head.num_labels:
        raise DataError(f"example {ex.id!r}: label {ex.label} out of range")
    return {"id": ex.id, "ids": row, "global": global_mask, "label": ex.label}


def _featurize_nli(ex: NliExample, tokenizer, config):
    ids = (
        [bpe.CLS_ID]
        + bpe.encode(tokenizer, ex.premise)
        + [bpe.SEP_ID]
        + bpe.encode(tokenizer, ex.hypothesis)
        + [bpe.SEP_ID]
    )
    if len(ids) > config.max_positions:
        raise DataError(f"example {ex.id!r}: sentence pair exceeds max_positions")
    row = np.array(ids, dtype=np.int64)
    global_mask = np.zeros(len(row), dtype=bool)
    return {"id": ex.id, "ids": row, "global": global_mask, "label": NLI_LABELS.index(ex.label)}


def collate(task, feats) -> Batch:
    """Pad a list of features to a common length and build the labeled batch."""
    length = max(len(f["ids"]) for f in feats)
    bsz = len(feats)
    ids = np.full((bsz, length), bpe.PAD_ID, dtype=np.int64)
    pad = np.ones((bsz, length), dtype=bool)
    global_mask = np.zeros((bsz, length), dtype=bool)
    for r, f in enumerate(feats):
        n = len(f["ids"])
        ids[r, :n] = f["ids"]
        pad[r, :n] = False
        global_mask[r, :n] = f["global"]

    if task == "span_qa":
        labels = (
            np.array([f["start"] for f in feats], dtype=np.int64),
            np.array([f["end"] for f in feats], dtype=np.int64),
        )
    elif task == "token_cls":
        lab = np.full((bsz, length), IGNORE_ID, dtype=np.int64)
        for r, f in enumerate(feats):
            lab[r, : len(f["labels"])] = f["labels"]
        labels = lab
    elif task == "seq_cls" and "label_vec" in feats[0]:
        labels = np.stack([f["label_vec"] for f in feats], axis=0)
    else:
        labels = np.array([f["label"] for f in feats], dtype=np.int64)
    return Batch(token_ids=ids, pad_mask=pad, global_mask=global_mask, labels=labels)


# ---------------------------------------------------------------------------
# prediction


def _forward_logits(ckpt, feat):
    batch = collate_single(feat)
    hidden = encode_sequence(ckpt, batch)
    return apply_head(ckpt, hidden)


def collate_single(feat) -> Batch:
    ids = np.asarray(feat["ids"], dtype=np.int64)[None, :]
    pad = np.zeros_like(ids, dtype=bool)
    global_mask = np.asarray(feat["global"], dtype=bool)[None, :]
    return Batch(token_ids=ids, pad_mask=pad, global_mask=global_mask)


def predict_qa(ckpt, tokenizer, examples, chunk_cfg=None,
               max_answer_len: int = DEFAULT_MAX_ANSWER_LEN) -> dict:
    """Best answer text per example id, via per-window spans aggregated globally."""
    if chunk_cfg is None:
        chunk_cfg = ChunkingConfig(chunk_len=ckpt.config.max_positions, overlap=0)
    out = {}
    for ex in examples:
        feats = _featurize_qa(ex, tokenizer, ckpt.config, chunk_cfg)
        starts, ends, chunks = [], [], []
        for f in feats:
            start_logits, end_logits = _forward_logits(ckpt, f)
            clen = len(f["chunk"].ids)
            off = f["ctx_offset"]
            starts.append(start_logits.data[0, off : off + clen])
            ends.append(end_logits.data[0, off : off + clen])
            chunks.append(f["chunk"])
        chunk_set = ChunkSet(doc_id=ex.id, chunks=tuple(chunks))
        ts, te, _score = aggregate_qa_spans(starts, ends, chunk_set, max_answer_len)
        _, ctx_spans = bpe.encode_with_offsets(tokenizer, ex.context)
        raw = ex.context.encode("utf-8")[ctx_spans[ts][0] : ctx_spans[te][1]]
        out[ex.id] = raw.decode("utf-8", errors="replace").strip()
    return out


def predict_ner(ckpt, tokenizer, examples, chunk_cfg=None, label_space=None) -> dict:
    """Word-level IOB tags per example id; long inputs are chunked and merged."""
    if label_space is None:
        raise ConfigError("predict_ner needs the tag label space")
    if chunk_cfg is None:
        chunk_cfg = ChunkingConfig(chunk_len=ckpt.config.max_positions, overlap=0)
    budget = ckpt.config.max_positions - 2
    chunk_len = min(chunk_cfg.chunk_len, budget)
    overlap = min(chunk_cfg.overlap, chunk_len - 1) if chunk_len > 1 else 0
    out = {}
    for ex in examples:
        sub_ids = []
        word_first = []
        for word in ex.tokens:
            pieces = bpe.encode(tokenizer, word)
            word_first.append(len(sub_ids))
            sub_ids.extend(pieces)
        chunk_set = chunk_with_stride(
            np.asarray(sub_ids, dtype=np.int64),
            ChunkingConfig(chunk_len=chunk_len, overlap=overlap),
            doc_id=ex.id,
        )
        per_chunk = []
        for chunk in chunk_set.chunks:
            ids = np.concatenate([[bpe.CLS_ID], chunk.ids, [bpe.SEP_ID]]).astype(np.int64)
            feat = {"ids": ids, "global": np.zeros(len(ids), dtype=bool)}
            logits = _forward_logits(ckpt, feat)
            per_chunk.append(np.argmax(logits.data[0, 1 : 1 + len(chunk.ids)], axis=-1))
        sub_tags = aggregate_token_predictions(per_chunk, chunk_set)
        out[ex.id] = [label_space[int(sub_tags[i])] for i in word_first]
    return out


def predict_cls(ckpt, tokenizer, examples, chunk_cfg=None) -> dict:
    """Per-example probability vector from the long-document classifier."""
    if chunk_cfg is None:
        chunk_cfg = ChunkingConfig(chunk_len=ckpt.config.max_positions, overlap=0)
    out = {}
    for ex in examples:
        ids = bpe.encode(tokenizer, ex.text)
        probs, per_chunk = classify_long_document(ckpt, ids, chunk_cfg)
        out[ex.id] = {"probs": probs, "per_chunk": [list(map(float, p)) for p in per_chunk]}
    return out


def predict_nli(ckpt, tokenizer, examples) -> dict:
    out = {}
    for ex in examples:
        feat = _featurize_nli(ex, tokenizer, ckpt.config)
        logits = _forward_logits(ckpt, feat)
        out[ex.id] = NLI_LABELS[int(np.argmax(logits.data[0]))]
    return out


# ---------------------------------------------------------------------------
# dev metrics


def dev_metric_name(task: str) -> str:
    return {"span_qa": "f1", "token_cls": "f1", "seq_cls": "auc", "nli": "accuracy"}[task]


def evaluate_task(task, ckpt, tokenizer, examples, chunk_cfg=None, label_space=None) -> dict:
    """Task-appropriate metrics over a labeled example set."""
    if not examples:
        raise DataError("no examples to evaluate")
    if task == "span_qa":
        preds = predict_qa(ckpt, tokenizer, examples, chunk_cfg)
        em = f1 = 0.0
        for ex in examples:
            scores = qa_em_f1(preds[ex.id], [a["text"] for a in ex.answers])
            em += scores["em"]
            f1 += scores["f1"]
        return {"em": em / len(examples), "f1": f1 / len(examples)}
    if task == "token_cls":
        preds = predict_ner(ckpt, tokenizer, examples, chunk_cfg, label_space=label_space)
        pairs = [(list(ex.tags), preds[ex.id]) for ex in examples]
        return ner_entity_f1(pairs)
    if task == "seq_cls":
        preds = predict_cls(ckpt, tokenizer, examples, chunk_cfg)
        if examples[0].labels is not None:
            per_label = []
            for li, name in enumerate(label_space):
                scores = [preds[ex.id]["probs"][li] for ex in examples]
                labels = [1 if name in ex.labels else 0 for ex in examples]
                pos = sum(labels)
                if pos == 0 or pos == len(labels):
                    continue
                per_label.append({"auc": roc_auc(scores, labels), "positive_count": pos})
            if not per_label:
                raise DataError("no label with both classes present; AUC undefined")
            return {"auc": weighted_mean_auc(per_label)}
        scores = [preds[ex.id]["probs"][1] for ex in examples]
        labels = [ex.label for ex in examples]
        return {"auc": roc_auc(scores, labels)}
    if task == "nli":
        preds = predict_nli(ckpt, tokenizer, examples)
        return {"accuracy": accuracy([preds[ex.id] for ex in examples],
                                     [ex.label for ex in examples])}
    raise ConfigError(f"unknown task {task!r}")
