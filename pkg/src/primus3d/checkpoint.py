"""PCK1 checkpoint format: magic, version, JSON manifest, raw float32 tensors.

Layout: b"PCK1" | u32 version | u64 manifest length | manifest JSON |
little-endian float32 tensor data in manifest order.  The manifest carries
the full model config plus named tensor entries with shape and offset
(relative to the start of the data section).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError
from .transformer import PrimusConfig, PrimusModel, replace_blocks_with_identity

PCK_MAGIC = b"PCK1"
PCK_VERSION = 1


def save_checkpoint(path, model: PrimusModel) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data.astype("<f4"))
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw.tobytes(order="C"))
        offset += len(blobs[-1])
    manifest = {
        "config": model.config.to_dict(),
        "identity_blocks": sorted(model.identity_blocks),
        "tensors": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PCK_MAGIC)
        fh.write(struct.pack("<I", PCK_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> PrimusModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PCK_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}, expected {PCK_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != PCK_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()
    config = PrimusConfig.from_dict(manifest["config"])
    model = PrimusModel(config, rng=np.random.default_rng(0), dtype=dtype)
    params = dict(model.named_parameters())
    saved = {e["name"] for e in manifest["tensors"]}
    if saved != set(params):
        missing = sorted(set(params) - saved)
        extra = sorted(saved - set(params))
        raise ConfigError(f"checkpoint tensors do not match model: missing {missing}, extra {extra}")
    for entry in manifest["tensors"]:
        t = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ConfigError(f"checkpoint tensor {entry['name']} has shape {shape}, model expects {t.shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
    if manifest.get("identity_blocks"):
        model = replace_blocks_with_identity(model, manifest["identity_blocks"])
    return model
