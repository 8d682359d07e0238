"""Versioned checkpoint files: a JSON header (config, parameter manifest,
optional fold/adapter metadata) followed by the little-endian float64
payload in manifest order. Round-trips are bit-exact."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FOLDLAB\n"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    kind: str  # "dense" or "folded"
    config: dict
    arrays: dict  # name -> float64 ndarray
    vocab: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    manifest = []
    offset = 0
    names = list(ckpt.arrays)
    for name in names:
        arr = ckpt.arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "manifest": manifest,
        "total_params": offset,
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a foldlab checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header['format_version']}")
        payload = fh.read()
    expected = 8 * header["total_params"]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, manifest declares {expected}")
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"] * 8
        arrays[entry["name"]] = np.frombuffer(
            payload[start : start + size * 8], dtype="<f8").reshape(shape).copy()
    return CheckpointData(kind=header["kind"], config=header["config"], arrays=arrays,
                          vocab=header["vocab"], extra=header["extra"])


def dense_to_checkpoint(model, vocab="", extra=None):
    from .model import DenseModel  # noqa: F401 (type context)

    return CheckpointData(kind="dense", config=model.config.to_dict(),
                          arrays={k: t.data for k, t in model.params.items()},
                          vocab=vocab, extra=extra or {})


def dense_from_checkpoint(ckpt):
    from . import tensor as T
    from .model import DenseModel, ModelConfig

    if ckpt.kind != "dense":
        raise ValueError(f"expected a dense checkpoint, got kind {ckpt.kind!r}")
    params = {k: T.Tensor(a.copy(), requires_grad=True) for k, a in ckpt.arrays.items()}
    return DenseModel(ModelConfig.from_dict(ckpt.config), params)
