"""On-disk checkpoint container.

Layout: magic bytes "ARAE", one version byte (=1), a little-endian uint32
manifest byte length, the UTF-8 JSON manifest (config, vocabulary, label
names, ordered parameter descriptors with name/shape/byte offset), then the
raw little-endian fp32 parameter payloads in manifest order. The loader
verifies magic, version, and total length.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import ParamStore, Tensor
from .corpus import Vocabulary
from .model import CalibrationStats, Checkpoint, TrainConfig

MAGIC = b"ARAE"
VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a valid checkpoint of a supported version."""


def _write_container(path, manifest, arrays):
    payload = b"".join(a.astype("<f4").tobytes() for a in arrays)
    manifest = dict(manifest, payload_bytes=len(payload))
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    if data[4] != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {data[4]}")
    (mlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + mlen:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    manifest = json.loads(data[9 : 9 + mlen].decode("utf-8"))
    payload = data[9 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointFormatError(
            f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}"
        )
    return manifest, payload


def _param_entries(stores):
    entries, arrays, offset = [], [], 0
    for store_name, store in stores.items():
        for name, tensor in store.items():
            entries.append(
                {"name": name, "store": store_name, "shape": list(tensor.shape), "offset": offset}
            )
            arrays.append(tensor.array)
            offset += tensor.size * 4
    return entries, arrays


def _load_stores(manifest, payload):
    stores = {}
    offset = 0
    for entry in manifest["params"]:
        if entry["offset"] != offset:
            raise CheckpointFormatError(f"non-contiguous payload at {entry['name']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        store = stores.setdefault(entry["store"], ParamStore())
        store.add(entry["name"], Tensor(raw.astype(np.float64).reshape(shape)))
    if offset != len(payload):
        raise CheckpointFormatError("payload longer than manifest describes")
    return stores


def save_checkpoint(ckpt, path):
    entries, arrays = _param_entries(ckpt.stores)
    manifest = {
        "kind": "arae",
        "config": ckpt.cfg.to_dict(),
        "vocab": {"tokens": ckpt.vocab.tokens, "min_freq": ckpt.vocab.min_freq},
        "labels": ckpt.label_names,
        "label_marginal": ckpt.label_marginal,
        "calibration": ckpt.calibration.to_dict() if ckpt.calibration else None,
        "params": entries,
    }
    _write_container(path, manifest, arrays)


def load_checkpoint(path):
    manifest, payload = _read_container(path)
    if manifest.get("kind") != "arae":
        raise CheckpointFormatError(f"{path}: not an ARAE model checkpoint")
    cfg = TrainConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"]["tokens"], manifest["vocab"]["min_freq"])
    calibration = (
        CalibrationStats.from_dict(manifest["calibration"]) if manifest["calibration"] else None
    )
    stores = _load_stores(manifest, payload)
    missing = {"enc", "dec", "gen", "critic"} - set(stores)
    if missing:
        raise CheckpointFormatError(f"{path}: missing parameter groups {sorted(missing)}")
    return Checkpoint(
        VERSION,
        cfg,
        vocab,
        manifest["labels"],
        manifest["label_marginal"],
        stores,
        calibration,
    )


def save_lm_checkpoint(lm, path):
    """Language-model checkpoints share the container with kind='lm'."""
    entries, arrays = _param_entries({"lm": lm.store})
    manifest = {
        "kind": "lm",
        "config": lm.cfg.to_dict(),
        "vocab": {"tokens": lm.vocab.tokens, "min_freq": lm.vocab.min_freq},
        "labels": [],
        "label_marginal": [],
        "calibration": None,
        "params": entries,
    }
    _write_container(path, manifest, arrays)


def load_lm_checkpoint(path):
    from .evaluation import LmConfig, LMCheckpoint

    manifest, payload = _read_container(path)
    if manifest.get("kind") != "lm":
        raise CheckpointFormatError(f"{path}: not a language-model checkpoint")
    cfg = LmConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"]["tokens"], manifest["vocab"]["min_freq"])
    return LMCheckpoint(cfg, vocab, _load_stores(manifest, payload)["lm"])
