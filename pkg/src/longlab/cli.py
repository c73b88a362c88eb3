"""Command-line entry point wiring the modules into reproducible experiments.

    longlab <subcommand> <config.yaml> [section.key=value ...]

Subcommands: preprocess, train-tokenizer, pretrain, evaluate-mlm, finetune,
predict, evaluate, synth-data, bench-attention. Every run writes a manifest
(config snapshot, seeds, version, wall time, status) under output_dir, even on
failure. Metric artifacts carry no timestamps so identical-seed runs produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, bpe, tasks, textprep, training
from .attention import build_pattern, attention_forward, pattern_stats
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, LonglabError
from .longdoc import ChunkingConfig
from .model import HeadConfig
from .tensor import Tensor
from .textprep import SynthSpec

SUBCOMMANDS = (
    "preprocess",
    "train-tokenizer",
    "pretrain",
    "evaluate-mlm",
    "finetune",
    "predict",
    "evaluate",
    "synth-data",
    "bench-attention",
)


def _version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"longlab-{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"longlab-{__version__}"


def _write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_jsonl(path, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _out(config: ExperimentConfig, name: str) -> str:
    return os.path.join(config.output_dir, name)


def _load_tokenizer(config: ExperimentConfig) -> bpe.BpeModel:
    if not config.tokenizer.path:
        raise ConfigError("tokenizer.path is not set")
    return bpe.load_bpe(config.tokenizer.path)


def _chunk_cfg(config: ExperimentConfig) -> ChunkingConfig:
    return config.chunking


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_preprocess(config: ExperimentConfig) -> None:
    docs = textprep.load_corpus(config.corpus.path, config.corpus.format)
    rows = []
    for raw in docs:
        clean = textprep.clean_note(raw)
        rows.append({"id": clean.id, "text": clean.text})
    _write_jsonl(_out(config, "clean.jsonl"), rows)


def _cmd_train_tokenizer(config: ExperimentConfig) -> None:
    docs = textprep.load_corpus(config.corpus.path, config.corpus.format)
    model = bpe.train_bpe(docs, config.tokenizer.vocab_size)
    path = config.tokenizer.path or _out(config, "tokenizer.json")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    bpe.save_bpe(model, path)


def _cmd_synth_data(config: ExperimentConfig) -> None:
    s = config.synth
    if not s.dependency_rules:
        raise ConfigError("synth.dependency_rules is empty")
    spec = SynthSpec(
        num_docs=s.num_docs,
        doc_length_tokens=s.doc_length_tokens,
        vocab_words=s.vocab_words,
        dependency_distance=s.dependency_distance,
        dependency_rules=dict(s.dependency_rules),
        seed=s.seed,
    )
    docs, annotations = textprep.synth_corpus_with_annotations(spec)
    _write_jsonl(_out(config, "synth.jsonl"), [{"id": d.id, "text": d.text} for d in docs])
    _write_jsonl(_out(config, "synth_meta.jsonl"), annotations)


def _cmd_pretrain(config: ExperimentConfig) -> None:
    tokenizer = _load_tokenizer(config)
    docs = list(textprep.load_corpus(config.corpus.path, config.corpus.format))
    if not docs:
        raise DataError(f"corpus {config.corpus.path} is empty")
    model_cfg = config.model_config(vocab_size=tokenizer.vocab_size, head=HeadConfig(kind="mlm"))
    ckpt, log = training.pretrain_mlm(
        docs, tokenizer, model_cfg, config.train,
        scheme=config.masking,
        checkpoint_dir=_out(config, "checkpoints"),
    )
    save_checkpoint(ckpt, _out(config, "checkpoint"))
    _write_jsonl(_out(config, "pretrain_log.jsonl"), log)


def _cmd_evaluate_mlm(config: ExperimentConfig) -> None:
    tokenizer = _load_tokenizer(config)
    ckpt = load_checkpoint(_out(config, "checkpoint"))
    corpus_path = config.eval.corpus_path or config.corpus.path
    docs = list(textprep.load_corpus(corpus_path, config.corpus.format))
    token_docs = [bpe.encode(tokenizer, d.text) for d in docs]
    report = training.evaluate_mlm(
        ckpt, token_docs,
        truncate_to=config.eval.truncate_to,
        mask_rate=config.eval.mask_rate,
        seed=config.eval.seed,
    )
    _write_json(_out(config, "mlm_eval.json"), {
        "perplexity": report.perplexity,
        "top5_accuracy": report.top5_accuracy,
        "masked_position_count": report.masked_position_count,
    })


def _finetune_label_space(task, train_examples):
    space = tasks.build_label_space(task, train_examples)
    return space


def _head_for_task(task, label_space) -> HeadConfig:
    if task == "span_qa":
        return HeadConfig(kind="span_qa")
    if task == "token_cls":
        return HeadConfig(kind="token_cls", num_tags=len(label_space))
    if task == "nli":
        return HeadConfig(kind="seq_cls", num_labels=3)
    multilabel = not (label_space == (0, 1))
    return HeadConfig(kind="seq_cls", num_labels=max(2, len(label_space)), multilabel=multilabel)


def _cmd_finetune(config: ExperimentConfig) -> None:
    tokenizer = _load_tokenizer(config)
    task = config.finetune.task
    train_examples = tasks.load_examples(task, config.finetune.train_path)
    dev_examples = tasks.load_examples(task, config.finetune.dev_path)
    label_space = _finetune_label_space(task, train_examples)
    head = _head_for_task(task, label_space)

    if config.finetune.init_checkpoint:
        base = load_checkpoint(config.finetune.init_checkpoint)
        model_cfg = config.model_config(vocab_size=tokenizer.vocab_size, head=head)
        from .model import init_model
        ckpt = init_model(model_cfg, seed=config.seed, warm_start=base)
    else:
        from .model import init_model
        model_cfg = config.model_config(vocab_size=tokenizer.vocab_size, head=head)
        ckpt = init_model(model_cfg, seed=config.seed)

    best, log = training.finetune(
        task, train_examples, dev_examples, ckpt, tokenizer, config.train,
        chunk_cfg=_chunk_cfg(config), label_space=label_space,
    )
    save_checkpoint(best, _out(config, "finetuned"))
    _write_json(_out(config, "label_space.json"), {"task": task, "labels": list(label_space)})
    _write_jsonl(_out(config, "finetune_log.jsonl"), log)


def _cmd_predict(config: ExperimentConfig) -> None:
    tokenizer = _load_tokenizer(config)
    task = config.predict.task
    examples = tasks.load_examples(task, config.predict.dataset_path)
    ckpt = load_checkpoint(config.predict.checkpoint)
    label_space = tasks.build_label_space(task, examples)
    rows = []
    if task == "span_qa":
        preds = tasks.predict_qa(ckpt, tokenizer, examples, _chunk_cfg(config))
        rows = [{"id": ex.id, "task": task, "prediction": preds[ex.id]} for ex in examples]
    elif task == "token_cls":
        preds = tasks.predict_ner(ckpt, tokenizer, examples, _chunk_cfg(config), label_space)
        rows = [{"id": ex.id, "task": task, "prediction": preds[ex.id]} for ex in examples]
    elif task == "seq_cls":
        preds = tasks.predict_cls(ckpt, tokenizer, examples, _chunk_cfg(config))
        rows = [
            {
                "id": ex.id,
                "task": task,
                "prediction": [float(x) for x in preds[ex.id]["probs"]],
                "per_chunk": preds[ex.id]["per_chunk"],
            }
            for ex in examples
        ]
    else:
        preds = tasks.predict_nli(ckpt, tokenizer, examples)
        rows = [{"id": ex.id, "task": task, "prediction": preds[ex.id]} for ex in examples]
    _write_jsonl(_out(config, "predictions.jsonl"), rows)


def _cmd_evaluate(config: ExperimentConfig) -> None:
    tokenizer = _load_tokenizer(config)
    task = config.predict.task
    examples = tasks.load_examples(task, config.predict.dataset_path)
    ckpt = load_checkpoint(config.predict.checkpoint)
    label_space = tasks.build_label_space(task, examples)
    metrics = tasks.evaluate_task(task, ckpt, tokenizer, examples, _chunk_cfg(config),
                                  label_space=label_space)
    _write_json(_out(config, "metrics.json"), {
        "task": task,
        "metrics": metrics,
        "n_examples": len(examples),
    })


def _cmd_bench_attention(config: ExperimentConfig) -> None:
    b = config.bench
    rows = []
    for kind in b.kinds:
        for n in b.sizes:
            attn_cfg = (
                config.attention if config.attention.kind == kind
                else type(config.attention)(kind=kind, window_radius=config.attention.window_radius,
                                            global_tokens=config.attention.global_tokens,
                                            block_size=config.attention.block_size,
                                            global_block_count=config.attention.global_block_count,
                                            random_blocks_per_query=config.attention.random_blocks_per_query,
                                            seed=config.attention.seed)
            )
            if kind == "full" and n > b.full_cap:
                # memory guard: exact count is closed-form, timing skipped
                rows.append({"kind": kind, "n": n, "pair_count": n * n,
                             "density": 1.0, "median_forward_ms": "skipped"})
                continue
            pattern = build_pattern(attn_cfg, n)
            stats = pattern_stats(pattern)
            rng = np.random.default_rng([config.seed, n])
            q = Tensor(rng.normal(size=(n, b.d_head)))
            k = Tensor(rng.normal(size=(n, b.d_head)))
            v = Tensor(rng.normal(size=(n, b.d_head)))
            times = []
            for _ in range(b.reps):
                t0 = time.perf_counter()
                attention_forward(q, k, v, pattern, scale=1.0 / np.sqrt(b.d_head))
                times.append((time.perf_counter() - t0) * 1000.0)
            rows.append({
                "kind": kind,
                "n": n,
                "pair_count": stats["pair_count"],
                "density": stats["density"],
                "median_forward_ms": float(np.median(times)),
            })
    path = _out(config, "bench.csv")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["kind", "n", "pair_count", "density",
                                                "median_forward_ms"])
        writer.writeheader()
        writer.writerows(rows)


_HANDLERS = {
    "preprocess": _cmd_preprocess,
    "train-tokenizer": _cmd_train_tokenizer,
    "pretrain": _cmd_pretrain,
    "evaluate-mlm": _cmd_evaluate_mlm,
    "finetune": _cmd_finetune,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "synth-data": _cmd_synth_data,
    "bench-attention": _cmd_bench_attention,
}


def run(subcommand: str, config_path: str, overrides: list[str] | None = None) -> int:
    """Run one subcommand; writes a run manifest under output_dir even on failure."""
    started = time.time()
    manifest: dict = {"subcommand": subcommand, "version": _version_string()}
    config = None
    try:
        config = load_config(config_path, overrides)
        manifest["config"] = config.to_dict()
        manifest["seed"] = config.seed
        _HANDLERS[subcommand](config)
        manifest["status"] = "ok"
        exit_code = 0
    except LonglabError as exc:
        manifest["status"] = "error"
        manifest["error_category"] = exc.category
        manifest["error"] = str(exc)
        print(f"error ({exc.category}): {exc}", file=sys.stderr)
        exit_code = 1
    manifest["wall_time_s"] = time.time() - started
    out_dir = config.output_dir if config is not None else "."
    try:
        _write_json(os.path.join(out_dir, "run_manifest.json"), manifest)
    except OSError as exc:
        print(f"warning: could not write run manifest: {exc}", file=sys.stderr)
    return exit_code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="longlab",
        description="Desk-scale experiments with long-context sparse-attention encoders.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="YAML experiment config")
    parser.add_argument("overrides", nargs="*", help="dotted overrides, e.g. train.lr=2e-5")
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
