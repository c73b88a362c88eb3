"""MLM masking, pretraining with bit-exact resume, masked-prediction evaluation,
and task fine-tuning with epoch-level dev selection.

Everything that varies across steps is a pure function of (seed, step), so a run
resumed from a checkpoint at step k replays steps k+1.. identically to an
uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bpe
from . import tensor as T
from .errors import ConfigError, DataError, TrainingError
from .model import (
    IGNORE_ID,
    Batch,
    Checkpoint,
    apply_head,
    clone_params,
    encode_sequence,
    forward_loss,
    init_model,
)
from .optim import OptimizerState, adamw_step, lr_at


@dataclass(frozen=True)
class MaskingScheme:
    rate: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError("mask rate must be in (0, 1]")
        total = self.mask_fraction + self.random_fraction + self.keep_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"action split must sum to 1, got {total}")


# evaluation protocol: 10% of tokens, pure MASK replacement
EVAL_MASKING = MaskingScheme(rate=0.10, mask_fraction=1.0, random_fraction=0.0, keep_fraction=0.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    warmup_steps: int = 0
    total_steps: int | None = None
    batch_size: int = 4
    epochs: int = 6
    grad_accum_steps: int = 1
    eval_every: int = 0
    checkpoint_every: int = 0
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.grad_accum_steps < 1:
            raise ConfigError("batch_size/grad_accum_steps must be >= 1 and epochs >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")


@dataclass(frozen=True)
class MlmEvalReport:
    perplexity: float
    top5_accuracy: float
    masked_position_count: int

    def __post_init__(self):
        if self.perplexity < 1.0 - 1e-9:
            raise TrainingError(f"perplexity {self.perplexity} < 1")
        if not 0.0 <= self.top5_accuracy <= 1.0:
            raise TrainingError("top-5 accuracy out of [0, 1]")


def masked_position_count(rate: float, eligible: int) -> int:
    """round(rate * eligible) with a floor of one position (round half to even)."""
    return max(1, round(rate * eligible))


def apply_mlm_masking(ids, scheme: MaskingScheme, vocab_size: int,
                      rng: np.random.Generator | None = None):
    """Corrupt a token sequence for MLM training.

    Selects round(rate * eligible) positions (minimum 1) uniformly without
    replacement among non-special tokens, then applies the action split:
    replace with MASK / replace with a random non-special token / keep. Returns
    (corrupted ids, labels) where labels hold the original id at selected
    positions and IGNORE_ID elsewhere.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if rng is None:
        rng = np.random.default_rng(scheme.seed)
    eligible = np.flatnonzero(ids >= bpe.NUM_SPECIALS)
    if eligible.size == 0:
        raise DataError("no eligible (non-special, non-pad) tokens to mask")
    count = masked_position_count(scheme.rate, eligible.size)
    picked = eligible[rng.choice(eligible.size, size=count, replace=False)]
    corrupted = ids.copy()
    labels = np.full_like(ids, IGNORE_ID)
    labels[picked] = ids[picked]
    actions = rng.random(count)
    for pos, u in zip(picked, actions):
        if u < scheme.mask_fraction:
            corrupted[pos] = bpe.MASK_ID
        elif u < scheme.mask_fraction + scheme.random_fraction:
            corrupted[pos] = int(rng.integers(bpe.NUM_SPECIALS, vocab_size))
        # else: keep the original token
    return corrupted, labels


def pack_documents(token_docs, max_positions: int) -> list[np.ndarray]:
    """Greedy packing: documents joined by SEP fill CLS-prefixed windows of
    max_positions tokens; long documents spill into the next window."""
    stream: list[int] = []
    for doc in token_docs:
        stream.extend(int(t) for t in doc)
        stream.append(bpe.SEP_ID)
    if not stream:
        raise DataError("cannot pack an empty corpus")
    body = max_positions - 1
    sequences = []
    for i in range(0, len(stream), body):
        window = stream[i : i + body]
        seq = np.array([bpe.CLS_ID] + window, dtype=np.int64)
        if (seq >= bpe.NUM_SPECIALS).any():
            sequences.append(seq)
    return sequences


def _collate_mlm(sequences, scheme, vocab_size, seed, step):
    """Pad to the longest sequence and mask each row with its own derived rng."""
    length = max(len(s) for s in sequences)
    bsz = len(sequences)
    ids = np.full((bsz, length), bpe.PAD_ID, dtype=np.int64)
    pad = np.ones((bsz, length), dtype=bool)
    labels = np.full((bsz, length), IGNORE_ID, dtype=np.int64)
    for r, seq in enumerate(sequences):
        rng = np.random.default_rng([scheme.seed, seed, step, r])
        corrupted, row_labels = apply_mlm_masking(seq, scheme, vocab_size, rng=rng)
        ids[r, : len(seq)] = corrupted
        labels[r, : len(seq)] = row_labels
        pad[r, : len(seq)] = False
    return Batch(token_ids=ids, pad_mask=pad, global_mask=np.zeros_like(pad), labels=labels)


def training_step(ckpt: Checkpoint, batch: Batch, lr: float) -> float:
    """One forward/backward/AdamW update. Returns the scalar loss."""
    if ckpt.optimizer is None:
        raise TrainingError("checkpoint has no optimizer state")
    for p in ckpt.params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = forward_loss(ckpt, batch, train=True)
        T.backward(tape, loss)
    grads = {name: p.grad for name, p in ckpt.params.items() if p.grad is not None}
    adamw_step(ckpt.params, grads, ckpt.optimizer, lr=lr)
    return loss.item()


def pretrain_mlm(corpus, tokenizer: bpe.BpeModel, model_config, train_config: TrainConfig,
                 scheme: MaskingScheme | None = None, resume_from: Checkpoint | None = None,
                 checkpoint_dir=None, log: list | None = None):
    """Masked-language-model pretraining over a packed corpus.

    Deterministic given seeds; resuming from a saved checkpoint at step k
    reproduces the uninterrupted run bit-exactly. Returns (checkpoint, log).
    """
    if tokenizer.vocab_size != model_config.vocab_size:
        raise ConfigError(
            f"tokenizer vocab {tokenizer.vocab_size} != model vocab {model_config.vocab_size}"
        )
    if scheme is None:
        scheme = MaskingScheme(seed=train_config.seed)
    token_docs = [bpe.encode(tokenizer, doc.text) if hasattr(doc, "text") else list(doc)
                  for doc in corpus]
    if not token_docs:
        raise DataError("empty pretraining corpus")
    sequences = pack_documents(token_docs, model_config.max_positions)

    steps_per_epoch = math.ceil(len(sequences) / train_config.batch_size)
    total_steps = train_config.total_steps
    if total_steps is None:
        total_steps = steps_per_epoch * train_config.epochs

    if resume_from is not None:
        ckpt = resume_from
        if ckpt.optimizer is None:
            raise TrainingError("resume checkpoint is missing optimizer state")
    else:
        ckpt = init_model(model_config, seed=train_config.seed)
        ckpt.optimizer = OptimizerState(
            ckpt.params, lr=train_config.lr, weight_decay=train_config.weight_decay
        )
    if log is None:
        log = []

    seed = train_config.seed
    for step in range(ckpt.step, total_steps):
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        order = np.random.default_rng([seed, 101, epoch]).permutation(len(sequences))
        chosen = order[pos * train_config.batch_size : (pos + 1) * train_config.batch_size]
        batch = _collate_mlm([sequences[i] for i in chosen], scheme,
                             model_config.vocab_size, seed, step)
        lr = lr_at(step, train_config.lr, train_config.warmup_steps, total_steps)
        loss = training_step(ckpt, batch, lr)
        ckpt.step = step + 1
        log.append({"step": ckpt.step, "split": "train", "loss": loss})
        if checkpoint_dir and train_config.checkpoint_every \
                and ckpt.step % train_config.checkpoint_every == 0:
            from .checkpoint import save_checkpoint  # deferred: avoids import cycle
            save_checkpoint(ckpt, f"{checkpoint_dir}/step-{ckpt.step}")
    return ckpt, log


def mlm_logits(ckpt: Checkpoint, core_ids) -> np.ndarray:
    """Forward [CLS] ids [SEP] through an MLM model; logits for the core positions."""
    row = np.concatenate([[bpe.CLS_ID], np.asarray(core_ids, dtype=np.int64), [bpe.SEP_ID]])
    batch = Batch(
        token_ids=row[None, :],
        pad_mask=np.zeros((1, len(row)), dtype=bool),
        global_mask=np.zeros((1, len(row)), dtype=bool),
    )
    hidden = encode_sequence(ckpt, batch)
    logits = apply_head(ckpt, hidden)
    return logits.data[0, 1:-1, :]


def top_k_ids(logits_row: np.ndarray, k: int = 5) -> np.ndarray:
    """Ids of the k highest logits; ties broken toward the lower id."""
    order = np.lexsort((np.arange(logits_row.size), -logits_row))
    return order[:k]


def evaluate_mlm(model, token_docs, truncate_to: int, mask_rate: float, seed: int,
                 vocab_size: int | None = None) -> MlmEvalReport:
    """Masked-prediction evaluation: truncate each document, replace
    round(mask_rate * eligible) tokens (minimum 1) with MASK, then score.

    Perplexity is exp of the mean negative log-likelihood over masked positions
    (64-bit); top-5 accuracy counts masked positions whose true id is among the
    five highest logits, ties toward lower ids.

    ``model`` is a Checkpoint, or a callable (corrupted_ids, doc_index) ->
    logits [len, vocab] for oracle-style evaluation hooks.
    """
    docs = [np.asarray(d, dtype=np.int64) for d in token_docs]
    if not docs:
        raise DataError("no documents to evaluate")
    if isinstance(model, Checkpoint):
        vocab_size = model.config.vocab_size
        logits_fn = lambda ids, di: mlm_logits(model, ids)
    else:
        if vocab_size is None:
            raise ConfigError("vocab_size is required when evaluating a callable")
        logits_fn = model

    nll_sum = 0.0
    hits = 0
    total = 0
    for di, doc in enumerate(docs):
        doc = doc[:truncate_to]
        eligible = np.flatnonzero(doc >= bpe.NUM_SPECIALS)
        if eligible.size == 0:
            raise DataError(f"document {di} has no maskable tokens")
        rng = np.random.default_rng([seed, di])
        count = masked_position_count(mask_rate, eligible.size)
        picked = np.sort(eligible[rng.choice(eligible.size, size=count, replace=False)])
        corrupted = doc.copy()
        corrupted[picked] = bpe.MASK_ID
        logits = np.asarray(logits_fn(corrupted, di), dtype=np.float64)
        if logits.shape != (len(doc), vocab_size):
            raise DataError(
                f"model returned logits {logits.shape}, expected {(len(doc), vocab_size)}"
            )
        for pos in picked:
            row = logits[pos]
            m = row.max()
            lse = m + np.log(np.exp(row - m).sum())
            nll_sum += lse - row[doc[pos]]
            if doc[pos] in top_k_ids(row, 5):
                hits += 1
            total += 1
    return MlmEvalReport(
        perplexity=float(np.exp(nll_sum / total)),
        top5_accuracy=hits / total,
        masked_position_count=total,
    )


def finetune(task: str, train_examples, dev_examples, ckpt: Checkpoint,
             tokenizer: bpe.BpeModel, train_config: TrainConfig, chunk_cfg=None,
             label_space=None):
    """Fine-tune up to train_config.epochs, evaluating the dev metric after each
    epoch and returning (best checkpoint, log). Ties prefer the earlier epoch;
    zero epochs returns the input checkpoint untouched.
    """
    from . import tasks

    features = tasks.featurize(task, train_examples, tokenizer, ckpt.config, chunk_cfg,
                               label_space=label_space)
    if train_config.epochs == 0:
        return ckpt, []
    if not features:
        raise DataError("no trainable features produced from the training set")
    if ckpt.optimizer is None:
        ckpt.optimizer = OptimizerState(
            ckpt.params, lr=train_config.lr, weight_decay=train_config.weight_decay
        )

    steps_per_epoch = math.ceil(len(features) / train_config.batch_size)
    total_steps = steps_per_epoch * train_config.epochs
    seed = train_config.seed
    log: list[dict] = []
    best = None  # (metric, -epoch) maximized
    best_params = None
    best_step = 0
    step = 0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng([seed, 301, epoch]).permutation(len(features))
        for pos in range(steps_per_epoch):
            chosen = order[pos * train_config.batch_size : (pos + 1) * train_config.batch_size]
            batch = tasks.collate(task, [features[i] for i in chosen])
            lr = lr_at(step, train_config.lr, train_config.warmup_steps, total_steps)
            loss = training_step(ckpt, batch, lr)
            step += 1
            log.append({"step": step, "split": "train", "loss": loss})
        dev_metrics = tasks.evaluate_task(task, ckpt, tokenizer, dev_examples, chunk_cfg,
                                          label_space=label_space)
        metric = dev_metrics[tasks.dev_metric_name(task)]
        log.append({"step": step, "split": "dev", "epoch": epoch + 1, **dev_metrics})
        if best is None or metric > best[0]:
            best = (metric, epoch)
            best_params = clone_params(ckpt.params)
            best_step = step
    restored = Checkpoint(config=ckpt.config, params=best_params, optimizer=None, step=best_step)
    return restored, log
