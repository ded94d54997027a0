"""Checkpoint container: a JSON manifest line plus one raw float32 block.

The manifest lists every tensor's name, shape, element type, and byte
offset into the block that follows, so any language can read the file.
Model config and both vocabularies ride along in the manifest, which makes
a checkpoint self-contained for translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffArray
from .data import Vocabulary
from .errors import CheckpointError
from .model import ModelConfig, ModelParams

_MAGIC = "kvnmt-checkpoint"
_FORMAT = 1


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    src_vocab: Vocabulary | None
    trg_vocab: Vocabulary | None
    meta: dict


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    src_vocab: Vocabulary | None = None,
                    trg_vocab: Vocabulary | None = None,
                    meta: dict | None = None) -> None:
    tensors = []
    blocks = []
    offset = 0
    for name in params:
        arr = params[name].data.astype("<f4")
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f4",
            "offset": offset,
        })
        raw = arr.tobytes()
        blocks.append(raw)
        offset += len(raw)
    manifest = {
        "magic": _MAGIC,
        "format": _FORMAT,
        "config": config.to_dict(),
        "src_vocab": [list(e) for e in src_vocab.entries()] if src_vocab else None,
        "trg_vocab": [list(e) for e in trg_vocab.entries()] if trg_vocab else None,
        "meta": meta or {},
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        for raw in blocks:
            f.write(raw)


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    with open(path, "rb") as f:
        header = f.readline()
        block = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest line: {exc}") from None
    if manifest.get("magic") != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    arrays = {}
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        raw = block[start : start + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: tensor {spec['name']} is truncated")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        arrays[spec["name"]] = DiffArray(arr, tracked=True)
    config = ModelConfig.from_dict(manifest["config"])
    src_vocab = (Vocabulary.from_entries(manifest["src_vocab"])
                 if manifest.get("src_vocab") else None)
    trg_vocab = (Vocabulary.from_entries(manifest["trg_vocab"])
                 if manifest.get("trg_vocab") else None)
    return Checkpoint(params=ModelParams(arrays), config=config,
                      src_vocab=src_vocab, trg_vocab=trg_vocab,
                      meta=manifest.get("meta", {}))
