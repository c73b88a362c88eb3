"""Experiment configuration: one YAML file plus dotted-path overrides.

The file aggregates every knob a run needs (paths, tokenizer, model, attention,
masking, training, chunking, eval, bench). ``load_config`` -> ``to_dict`` is
lossless for the normalized form, and overrides like ``train.lr=2e-5`` are
applied before validation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

import yaml

from .errors import ConfigError
from .longdoc import ChunkingConfig
from .model import AttentionConfig, HeadConfig, ModelConfig
from .training import MaskingScheme, TrainConfig


@dataclass(frozen=True)
class CorpusSection:
    path: str = ""
    format: str = "jsonl"  # jsonl | plain-lines


@dataclass(frozen=True)
class TokenizerSection:
    path: str = ""
    vocab_size: int = 300


@dataclass(frozen=True)
class ModelSection:
    vocab_size: int | None = None  # None: take the trained tokenizer's size
    max_positions: int = 4096
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 2
    d_ff: int = 64
    dropout_rate: float = 0.0
    head: dict | None = None


@dataclass(frozen=True)
class SynthSection:
    num_docs: int = 64
    doc_length_tokens: int = 256
    vocab_words: int = 16
    dependency_distance: int = 64
    dependency_rules: dict | None = None
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    truncate_to: int = 512
    mask_rate: float = 0.10
    seed: int = 0
    corpus_path: str | None = None  # default: corpus.path


@dataclass(frozen=True)
class FinetuneSection:
    task: str = "token_cls"
    train_path: str = ""
    dev_path: str = ""
    init_checkpoint: str | None = None


@dataclass(frozen=True)
class PredictSection:
    task: str = "token_cls"
    dataset_path: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class BenchSection:
    sizes: tuple = (256, 512, 1024, 2048, 4096)
    kinds: tuple = ("full", "longformer", "bigbird")
    full_cap: int = 2048
    d_head: int = 16
    reps: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    corpus: CorpusSection = CorpusSection()
    tokenizer: TokenizerSection = TokenizerSection()
    model: ModelSection = ModelSection()
    attention: AttentionConfig = AttentionConfig()
    masking: MaskingScheme = MaskingScheme()
    train: TrainConfig = TrainConfig()
    chunking: ChunkingConfig = ChunkingConfig()
    synth: SynthSection = SynthSection()
    eval: EvalSection = EvalSection()
    finetune: FinetuneSection = FinetuneSection()
    predict: PredictSection = PredictSection()
    bench: BenchSection = BenchSection()

    def model_config(self, vocab_size: int | None = None, head: HeadConfig | None = None) -> ModelConfig:
        m = self.model
        vocab = m.vocab_size if m.vocab_size is not None else vocab_size
        if vocab is None:
            raise ConfigError("model.vocab_size is unset and no tokenizer size was supplied")
        if head is None:
            head = HeadConfig(**(m.head or {"kind": "mlm"}))
        return ModelConfig(
            vocab_size=vocab,
            max_positions=m.max_positions,
            d_model=m.d_model,
            num_layers=m.num_layers,
            num_heads=m.num_heads,
            d_ff=m.d_ff,
            attention=self.attention,
            dropout_rate=m.dropout_rate,
            head=head,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"]["global_tokens"] = list(self.attention.global_tokens)
        d["bench"]["sizes"] = list(self.bench.sizes)
        d["bench"]["kinds"] = list(self.bench.kinds)
        return d


_TUPLE_FIELDS = {
    (AttentionConfig, "global_tokens"),
    (BenchSection, "sizes"),
    (BenchSection, "kinds"),
}


def _build(cls, raw: dict | None, path: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key {path}.{sorted(unknown)[0]}")
    for name in list(raw):
        if (cls, name) in _TUPLE_FIELDS and isinstance(raw[name], list):
            raw[name] = tuple(raw[name])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {path} section: {exc}") from exc


_SECTIONS = {
    "corpus": CorpusSection,
    "tokenizer": TokenizerSection,
    "model": ModelSection,
    "attention": AttentionConfig,
    "masking": MaskingScheme,
    "train": TrainConfig,
    "chunking": ChunkingConfig,
    "synth": SynthSection,
    "eval": EvalSection,
    "finetune": FinetuneSection,
    "predict": PredictSection,
    "bench": BenchSection,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs: dict[str, Any] = {}
    for key in ("seed", "output_dir"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw.pop(key), key)
    if raw:
        raise ConfigError(f"unknown config key {sorted(raw)[0]}")
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark else ""
        raise ConfigError(f"config parse error in {path}{where}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root in {path} must be a mapping")
    for ov in overrides or []:
        raw = apply_override(raw, ov)
    return config_from_dict(raw)


def apply_override(raw: dict, override: str) -> dict:
    """Apply one dotted-path override, e.g. train.lr=2e-5 (value parsed as YAML)."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} must look like section.key=value")
    dotted, _, value_text = override.partition("=")
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override {override!r} has an empty path segment")
    try:
        value = yaml.safe_load(value_text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {override!r}: bad value ({exc})") from exc
    if isinstance(value, str):
        # YAML 1.1 reads bare "2e-5" as a string; overrides mean the number
        try:
            value = float(value)
        except ValueError:
            pass
    node = raw
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value
    return raw


def serialize_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
