"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RANCKPT1"
    u64 metadata length, metadata as UTF-8 JSON
    repeated until EOF:
        u32 name length, name bytes (UTF-8)
        u32 rank, u32 per dimension
        float32 payload, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import LabelVocabulary
from .model import RANConfig, RANModel

MAGIC = b"RANCKPT1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        metadata = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    arrays: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return arrays, metadata


def save_model(path, model: RANModel, extra: dict | None = None) -> None:
    metadata = {
        "config": model.config.to_dict(),
        "vocab": model.vocab.classes,
        "in_channels": model.in_channels,
        "creator": {"library": "ran_har", "version": __version__},
    }
    if extra:
        metadata.update(extra)
    write_checkpoint(path, {k: v.data for k, v in model.parameters().items()}, metadata)


def load_model(path) -> tuple[RANModel, dict]:
    arrays, metadata = read_checkpoint(path)
    try:
        config = RANConfig.from_dict(metadata["config"])
        vocab = LabelVocabulary(metadata["vocab"])
        model = RANModel.create(config, vocab, int(metadata["in_channels"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete metadata ({exc})") from None
    model.load_parameters(arrays)
    return model, metadata
