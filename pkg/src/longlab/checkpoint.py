"""Checkpoint persistence: JSON manifest + contiguous binary blob.

A checkpoint directory holds ``manifest.json`` (format version, model config,
ordered tensor records with name/shape/dtype/byte offset, optional optimizer
hyperparameters) and ``params.bin`` (little-endian floats, concatenated in
record order). Training state round-trips bit-exactly: tensors are written in
their in-memory float64 by default; a float32 switch exists to halve disk size
when exact resume is not needed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .model import AttentionConfig, Checkpoint, HeadConfig, ModelConfig, param_template
from .optim import OptimizerState
from .tensor import Tensor

FORMAT_VERSION = 1
_MANIFEST = "manifest.json"
_BLOB = "params.bin"


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["attention"]["global_tokens"] = list(config.attention.global_tokens)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    attn = dict(d.pop("attention"))
    attn["global_tokens"] = tuple(attn.get("global_tokens", ()))
    head = dict(d.pop("head"))
    return ModelConfig(attention=AttentionConfig(**attn), head=HeadConfig(**head), **d)


def save_checkpoint(ckpt: Checkpoint, path, include_optimizer: bool = True,
                    float32: bool = False) -> None:
    os.makedirs(path, exist_ok=True)
    dtype = "<f4" if float32 else "<f8"
    entries: list[tuple[str, np.ndarray]] = list((n, t.data) for n, t in ckpt.params.items())
    optimizer = ckpt.optimizer if include_optimizer else None
    if optimizer is not None:
        for name in ckpt.params:
            entries.append((f"optim.m.{name}", optimizer.m[name]))
            entries.append((f"optim.v.{name}", optimizer.v[name]))

    records = []
    offset = 0
    chunks = []
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        records.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(ckpt.config),
        "step": ckpt.step,
        "tensors": records,
        "blob_bytes": offset,
        "optimizer": optimizer.hyperparams() if optimizer is not None else None,
    }
    with open(os.path.join(path, _MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, _BLOB), "wb") as fh:
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    manifest_path = os.path.join(path, _MANIFEST)
    blob_path = os.path.join(path, _BLOB)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc.msg}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format version {manifest.get('format_version')!r} != supported {FORMAT_VERSION}"
        )
    config = config_from_dict(manifest["config"])

    records = manifest["tensors"]
    expected = 0
    for rec in records:
        if rec["offset"] != expected:
            raise CheckpointError(f"tensor {rec['name']!r}: offset table is not contiguous")
        expected += int(np.prod(rec["shape"], dtype=np.int64)) * np.dtype(rec["dtype"]).itemsize
    if expected != manifest["blob_bytes"]:
        raise CheckpointError("manifest tensor records do not match declared blob size")
    try:
        blob = open(blob_path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob: {exc}") from exc
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob is {len(blob)} bytes, manifest declares {manifest['blob_bytes']} (truncated?)"
        )

    arrays: dict[str, np.ndarray] = {}
    for rec in records:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(
            blob, dtype=np.dtype(rec["dtype"]), count=count, offset=rec["offset"]
        ).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(np.float64)

    template = param_template(config)
    params: dict[str, Tensor] = {}
    for name, shape in template.items():
        if name not in arrays:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {arrays[name].shape}, config implies {shape}"
            )
        params[name] = Tensor(arrays[name], requires_grad=True)
    param_names = set(template)
    for name in arrays:
        if name not in param_names and not name.startswith("optim."):
            raise CheckpointError(f"unexpected tensor {name!r}")

    optimizer = None
    opt_info = manifest.get("optimizer")
    if opt_info is not None:
        optimizer = OptimizerState(
            params,
            lr=opt_info["lr"],
            beta1=opt_info["beta1"],
            beta2=opt_info["beta2"],
            eps=opt_info["eps"],
            weight_decay=opt_info["weight_decay"],
        )
        optimizer.step = int(opt_info["step"])
        for name in params:
            for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
                key = f"optim.{kind}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"missing optimizer tensor {key!r}")
                store[name] = arrays[key].copy()

    return Checkpoint(config=config, params=params, optimizer=optimizer, step=int(manifest["step"]))
