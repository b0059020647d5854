"""Checkpoint serialization.

Single-file binary format (little-endian), written deterministically so
identical models produce identical bytes::

    magic   6 bytes  "RKCP1\\0"
    u32     format version (1)
    u64     metadata length
    JSON    metadata (sorted keys): model config, mode, seed, epoch,
            class names, bn flag, ordered tensor index (name + shape)
    f32[]   tensor payloads, concatenated in index order

Tensors cover parameters, batch-norm running statistics, and the per-band
normalization statistics the model was trained with. Compute is float64;
storage is float32, so reloaded logits may drift by ~1e-6 relative.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BandStats
from .errors import DataFormatError
from .model import ModelConfig, RepKanModel

CKPT_MAGIC = b"RKCP1\x00"
CKPT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    model: RepKanModel
    seed: int
    epoch: int
    class_names: list
    norm_stats: BandStats | None

    @property
    def mode(self):
        return self.model.mode


def _model_tensors(model: RepKanModel):
    tensors = [(name, p.value) for name, p in model.named_parameters()]
    tensors += model.named_buffers()
    return tensors


def save_checkpoint(model: RepKanModel, path, *, seed: int = 0, epoch: int = 0,
                    class_names=None, norm_stats: BandStats | None = None) -> None:
    tensors = _model_tensors(model)
    if norm_stats is not None:
        tensors += [("norm.mean", np.asarray(norm_stats.mean)),
                    ("norm.std", np.asarray(norm_stats.std))]
    meta = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "mode": model.mode,
        "seed": int(seed),
        "epoch": int(epoch),
        "bn_populated": model.bn_populated(),
        "class_names": list(class_names) if class_names is not None else None,
        "has_norm_stats": norm_stats is not None,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> LoadedCheckpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        try:
            meta = json.loads(f.read(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt checkpoint metadata: {exc}") from exc
        payload = f.read()

    config = ModelConfig.from_dict(meta["config"])
    model = RepKanModel(config, seed=meta["seed"])
    if meta["mode"] == "deploy":
        model.set_bn_populated()
        model = model.fuse()
    expected = {name: arr for name, arr in _model_tensors(model)}
    if meta.get("has_norm_stats"):
        expected["norm.mean"] = np.empty(config.in_channels)
        expected["norm.std"] = np.empty(config.in_channels)

    seen = set()
    offset = 0
    loaded = {}
    for entry in meta["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise DataFormatError(f"{path}: unexpected tensor {name!r} for this config")
        if expected[name].shape != shape:
            raise DataFormatError(
                f"{path}: tensor {name!r} has shape {shape}, "
                f"config requires {expected[name].shape}")
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise DataFormatError(f"{path}: truncated payload at tensor {name!r}")
        offset += 4 * count
        loaded[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise DataFormatError(f"{path}: missing tensor {missing[0]!r}")

    for name, p in model.named_parameters():
        p.value[...] = loaded[name]
    for name, buf in model.named_buffers():
        buf[...] = loaded[name]
    if meta.get("bn_populated") and model.mode == "train":
        model.set_bn_populated()

    norm_stats = None
    if meta.get("has_norm_stats"):
        norm_stats = BandStats(loaded["norm.mean"], loaded["norm.std"])
    return LoadedCheckpoint(
        model=model,
        seed=meta["seed"],
        epoch=meta["epoch"],
        class_names=meta.get("class_names"),
        norm_stats=norm_stats,
    )
