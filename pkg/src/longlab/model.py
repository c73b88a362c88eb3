"""Transformer encoder stack with four task heads, parameter init, and warm start.

Post-norm blocks over learned token + absolute position embeddings, pattern-
masked multi-head attention per the configured AttentionConfig. Padding must be
a contiguous tail; padded positions are simply excluded from the per-sequence
forward (pattern built for the true length), which keeps them out of every key
set, then zero-filled so batch shapes line up.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import tensor as T
from .attention import AttentionPattern, attention_forward, build_pattern
from .errors import CheckpointError, ConfigError, DataError
from .optim import OptimizerState

HEAD_KINDS = ("mlm", "span_qa", "token_cls", "seq_cls")
IGNORE_ID = -100  # label value excluded from every loss


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "longformer"  # full | longformer | bigbird
    window_radius: int = 64
    global_tokens: tuple[int, ...] = (0,)
    block_size: int = 64
    global_block_count: int = 1
    random_blocks_per_query: int = 1
    seed: int = 0
    separate_global_projections: bool = False

    def __post_init__(self):
        if self.kind not in ("full", "longformer", "bigbird"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.window_radius < 0:
            raise ConfigError("window_radius must be >= 0")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        object.__setattr__(self, "global_tokens", tuple(sorted(self.global_tokens)))


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "mlm"
    num_tags: int = 0       # token_cls
    num_labels: int = 0     # seq_cls
    multilabel: bool = False

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "token_cls" and self.num_tags < 1:
            raise ConfigError("token_cls head needs num_tags >= 1")
        if self.kind == "seq_cls" and self.num_labels < 1:
            raise ConfigError("seq_cls head needs num_labels >= 1")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_positions: int
    d_model: int
    num_layers: int
    num_heads: int
    d_ff: int
    attention: AttentionConfig = AttentionConfig()
    dropout_rate: float = 0.0
    head: HeadConfig = HeadConfig()

    def __post_init__(self):
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        for name in ("vocab_size", "d_model", "num_layers", "num_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass
class Batch:
    token_ids: np.ndarray            # [B, L] int
    pad_mask: np.ndarray             # [B, L] bool, True at padding
    global_mask: np.ndarray          # [B, L] bool, True where token is global
    labels: object = None            # head-specific

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        self.global_mask = np.asarray(self.global_mask, dtype=bool)
        if self.token_ids.ndim != 2:
            raise DataError("token_ids must be [B, L]")
        if self.pad_mask.shape != self.token_ids.shape or self.global_mask.shape != self.token_ids.shape:
            raise DataError("pad_mask/global_mask must match token_ids shape")
        if (self.pad_mask & self.global_mask).any():
            raise DataError("padding tokens can never be global")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, T.Tensor]
    optimizer: OptimizerState | None = None
    step: int = 0


def param_template(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter the config implies."""
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_positions, d),
        "embed.ln.gamma": (d,),
        "embed.ln.beta": (d,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{proj}"] = (d, d)
            shapes[p + f"attn.b{proj[1]}"] = (d,)
        if config.attention.separate_global_projections:
            for proj in ("wq", "wk", "wv"):
                shapes[p + f"attn.global_{proj}"] = (d, d)
                shapes[p + f"attn.global_b{proj[1]}"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ffn.w1"] = (d, ff)
        shapes[p + "ffn.b1"] = (ff,)
        shapes[p + "ffn.w2"] = (ff, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    head = config.head
    if head.kind == "mlm":
        shapes["head.dense.w"] = (d, d)
        shapes["head.dense.b"] = (d,)
        shapes["head.ln.gamma"] = (d,)
        shapes["head.ln.beta"] = (d,)
        shapes["head.proj.w"] = (d, config.vocab_size)
        shapes["head.proj.b"] = (config.vocab_size,)
    elif head.kind == "span_qa":
        shapes["head.span.w"] = (d, 2)
        shapes["head.span.b"] = (2,)
    elif head.kind == "token_cls":
        shapes["head.tags.w"] = (d, head.num_tags)
        shapes["head.tags.b"] = (head.num_tags,)
    else:  # seq_cls: linear head straight off the position-0 hidden state
        shapes["head.cls.w"] = (d, head.num_labels)
        shapes["head.cls.b"] = (head.num_labels,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # BERT-family init: normal(0, std) redrawn outside two standard deviations
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_model(config: ModelConfig, seed: int, warm_start: Checkpoint | None = None) -> Checkpoint:
    """Deterministic init: truncated normal weights, zero biases, unit norm gains.

    warm_start copies matching tensors from an existing checkpoint; position
    embeddings may differ in length and are repeat-tiled when growing (so the
    first source_rows rows match the source exactly) or truncated when
    shrinking. Any other shape conflict is an error.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    for name, shape in param_template(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf.startswith("b") or leaf == "beta":
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape)
        params[name] = T.Tensor(data, requires_grad=True)

    if warm_start is not None:
        for name, tensor in params.items():
            src = warm_start.params.get(name)
            if src is None:
                continue
            if src.data.shape == tensor.data.shape:
                tensor.data = src.data.copy()
            elif name == "embed.pos":
                src_len = src.data.shape[0]
                new_len = tensor.data.shape[0]
                if src.data.shape[1:] != tensor.data.shape[1:]:
                    raise CheckpointError(f"warm start: {name} width mismatch")
                reps = -(-new_len // src_len)
                tensor.data = np.tile(src.data, (reps, 1))[:new_len].copy()
            else:
                raise CheckpointError(
                    f"warm start: {name} shape {src.data.shape} != {tensor.data.shape}"
                )
    return Checkpoint(config=config, params=params)


# small cache: per-example global sets produce distinct patterns whose expanded
# index tables are large, so rebuilds stay cheap instead of hoarding memory
@lru_cache(maxsize=16)
def _cached_pattern(attn_cfg: AttentionConfig, n: int, extra_globals: tuple) -> AttentionPattern:
    return build_pattern(attn_cfg, n, extra_globals)


def _mix_by_mask(base: T.Tensor, special: T.Tensor, mask_col: np.ndarray) -> T.Tensor:
    # rows flagged in mask_col take values from `special`, others from `base`
    m = mask_col.astype(np.float64)[:, None]
    return base * (1.0 - m) + special * m


def encode_sequence(ckpt: Checkpoint, batch: Batch, train: bool = False,
                    dropout_rng: np.random.Generator | None = None) -> T.Tensor:
    """Run the encoder stack; returns hidden states [B, L, d_model]."""
    cfg = ckpt.config
    params = ckpt.params
    ids = batch.token_ids
    bsz, length = ids.shape
    if length > cfg.max_positions:
        raise DataError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token id out of range for vocab_size {cfg.vocab_size}")

    use_dropout = train and cfg.dropout_rate > 0.0
    if use_dropout and dropout_rng is None:
        raise ConfigError("training with dropout needs an explicit dropout_rng")

    def maybe_dropout(x: T.Tensor) -> T.Tensor:
        return T.dropout(x, cfg.dropout_rate, dropout_rng) if use_dropout else x

    d, nh = cfg.d_model, cfg.num_heads
    dh = d // nh
    scale = 1.0 / np.sqrt(dh)

    outputs = []
    for b in range(bsz):
        pad_row = batch.pad_mask[b]
        n_real = int((~pad_row).sum())
        if pad_row[:n_real].any():
            raise DataError("padding must be a contiguous tail")
        row_ids = ids[b, :n_real]
        extra_globals = tuple(int(i) for i in np.flatnonzero(batch.global_mask[b, :n_real]))
        pattern = _cached_pattern(cfg.attention, n_real, extra_globals)
        global_cols = np.zeros(n_real, dtype=bool)
        if cfg.attention.kind == "longformer":
            for g in cfg.attention.global_tokens:
                if g < n_real:
                    global_cols[g] = True
            global_cols[list(extra_globals)] = True
        elif cfg.attention.kind == "bigbird":
            global_cols[: min(n_real, cfg.attention.global_block_count * cfg.attention.block_size)] = True

        x = T.take_rows(params["embed.tok"], row_ids) + T.take_rows(
            params["embed.pos"], np.arange(n_real)
        )
        x = T.layer_norm(x, params["embed.ln.gamma"], params["embed.ln.beta"])
        x = maybe_dropout(x)

        for i in range(cfg.num_layers):
            p = f"layer{i}."
            q = x @ params[p + "attn.wq"] + params[p + "attn.bq"]
            k = x @ params[p + "attn.wk"] + params[p + "attn.bk"]
            v = x @ params[p + "attn.wv"] + params[p + "attn.bv"]
            if cfg.attention.separate_global_projections:
                # global rows use the global query projection; global columns are
                # seen by everyone through the global key/value projections
                qg = x @ params[p + "attn.global_wq"] + params[p + "attn.global_bq"]
                kg = x @ params[p + "attn.global_wk"] + params[p + "attn.global_bk"]
                vg = x @ params[p + "attn.global_wv"] + params[p + "attn.global_bv"]
                q = _mix_by_mask(q, qg, global_cols)
                k = _mix_by_mask(k, kg, global_cols)
                v = _mix_by_mask(v, vg, global_cols)

            q3 = T.transpose(T.reshape(q, (n_real, nh, dh)), (1, 0, 2))
            k3 = T.transpose(T.reshape(k, (n_real, nh, dh)), (1, 0, 2))
            v3 = T.transpose(T.reshape(v, (n_real, nh, dh)), (1, 0, 2))
            head_outs = []
            for h in range(nh):
                qh = T.reshape(T.narrow(q3, 0, h, 1), (n_real, dh))
                kh = T.reshape(T.narrow(k3, 0, h, 1), (n_real, dh))
                vh = T.reshape(T.narrow(v3, 0, h, 1), (n_real, dh))
                head_outs.append(attention_forward(qh, kh, vh, pattern, scale))
            attn = T.reshape(T.transpose(T.stack(head_outs, axis=0), (1, 0, 2)), (n_real, d))
            attn = attn @ params[p + "attn.wo"] + params[p + "attn.bo"]
            x = T.layer_norm(x + maybe_dropout(attn), params[p + "ln1.gamma"], params[p + "ln1.beta"])

            h1 = T.gelu(x @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
            h2 = h1 @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
            x = T.layer_norm(x + maybe_dropout(h2), params[p + "ln2.gamma"], params[p + "ln2.beta"])

        if n_real < length:
            x = T.concat([x, T.Tensor(np.zeros((length - n_real, d)))], axis=0)
        outputs.append(x)
    return T.stack(outputs, axis=0)


def apply_head(ckpt: Checkpoint, hidden: T.Tensor):
    """Task head on top of hidden states [B, L, d].

    mlm -> [B, L, V]; span_qa -> (start [B, L], end [B, L]);
    token_cls -> [B, L, num_tags]; seq_cls -> [B, num_labels] from position 0.
    """
    cfg = ckpt.config
    params = ckpt.params
    bsz, length, d = hidden.data.shape
    kind = cfg.head.kind
    if kind == "seq_cls":
        cls = T.reshape(T.narrow(hidden, 1, 0, 1), (bsz, d))
        return cls @ params["head.cls.w"] + params["head.cls.b"]
    flat = T.reshape(hidden, (bsz * length, d))
    if kind == "mlm":
        t = T.gelu(flat @ params["head.dense.w"] + params["head.dense.b"])
        t = T.layer_norm(t, params["head.ln.gamma"], params["head.ln.beta"])
        logits = t @ params["head.proj.w"] + params["head.proj.b"]
        return T.reshape(logits, (bsz, length, cfg.vocab_size))
    if kind == "span_qa":
        logits = T.reshape(flat @ params["head.span.w"] + params["head.span.b"], (bsz, length, 2))
        start = T.reshape(T.narrow(logits, 2, 0, 1), (bsz, length))
        end = T.reshape(T.narrow(logits, 2, 1, 1), (bsz, length))
        return start, end
    if kind == "token_cls":
        logits = flat @ params["head.tags.w"] + params["head.tags.b"]
        return T.reshape(logits, (bsz, length, cfg.head.num_tags))
    raise ConfigError(f"unknown head kind {kind!r}")


def head_loss(ckpt: Checkpoint, logits, labels) -> T.Tensor:
    """Scalar training loss for the configured head."""
    cfg = ckpt.config
    kind = cfg.head.kind
    if kind == "mlm":
        bsz, length, vocab = logits.data.shape
        flat = T.reshape(logits, (bsz * length, vocab))
        return T.cross_entropy_mean(flat, np.asarray(labels).reshape(-1))
    if kind == "span_qa":
        start_logits, end_logits = logits
        starts, ends = labels
        return 0.5 * (
            T.cross_entropy_mean(start_logits, starts) + T.cross_entropy_mean(end_logits, ends)
        )
    if kind == "token_cls":
        bsz, length, tags = logits.data.shape
        flat = T.reshape(logits, (bsz * length, tags))
        return T.cross_entropy_mean(flat, np.asarray(labels).reshape(-1))
    if kind == "seq_cls":
        if cfg.head.multilabel:
            return T.bce_with_logits_mean(logits, labels)
        return T.cross_entropy_mean(logits, labels)
    raise ConfigError(f"unknown head kind {kind!r}")


def forward_loss(ckpt: Checkpoint, batch: Batch, train: bool = False,
                 dropout_rng=None) -> T.Tensor:
    hidden = encode_sequence(ckpt, batch, train=train, dropout_rng=dropout_rng)
    logits = apply_head(ckpt, hidden)
    return head_loss(ckpt, logits, batch.labels)


def clone_params(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def with_attention(config: ModelConfig, attention: AttentionConfig) -> ModelConfig:
    """Same model, different attention pattern (parameter shapes must agree)."""
    if attention.separate_global_projections != config.attention.separate_global_projections:
        raise ConfigError("cannot swap attention configs with different projection layouts")
    return replace(config, attention=attention)
