"""Binary checkpoints: JSON manifest header plus raw little-endian float32 payload.

Layout:
    PRUNEKIT_CKPT v1\n
    <decimal manifest byte length>\n
    <manifest JSON>          (sorted keys; config, per-layer shapes, tensor index, meta)
    <payload>                (tensors back to back at their declared offsets)

The manifest's shape record is sufficient to rebuild a pruned model without
the original configuration. Per-tensor CRC32 checksums are validated on load.
"""

from __future__ import annotations

import dataclasses
import json
import zlib

import numpy as np

from .model import DecoderLayer, Model, ModelConfig
from .tensor import Tensor

MAGIC = b"PRUNEKIT_CKPT v1\n"


class CheckpointError(ValueError):
    """Malformed checkpoint or checksum mismatch."""


def save(model, path, meta=None):
    """Write the model to `path`; `meta` is free-form JSON-safe run metadata."""
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        raw = arr.tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": 1,
        "config": dataclasses.asdict(model.config),
        "layer_shapes": [list(s) for s in model.layer_shapes()],
        "tensors": tensors,
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode("ascii"))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_manifest(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        line = f.readline()
        try:
            header_len = int(line.strip())
        except ValueError:
            raise CheckpointError(f"{path}: malformed manifest length") from None
        header = f.read(header_len)
        if len(header) != header_len:
            raise CheckpointError(f"{path}: truncated manifest")
        manifest = json.loads(header.decode("utf-8"))
        payload_start = f.tell()
    return manifest, payload_start


def load(path):
    """Rebuild the model (including pruned shapes); returns (model, manifest)."""
    manifest, payload_start = read_manifest(path)
    if manifest.get("format_version") != 1:
        raise CheckpointError(f"{path}: unsupported format version")
    with open(path, "rb") as f:
        f.seek(payload_start)
        payload = f.read()

    arrays = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()

    config = ModelConfig(**manifest["config"])
    layer_shapes = [tuple(s) for s in manifest["layer_shapes"]]

    def take(name, frozen=False):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        return Tensor(arrays.pop(name), requires_grad=not frozen)

    layers = []
    for i, (n_heads, d_ffn) in enumerate(layer_shapes):
        layers.append(DecoderLayer(
            wq=take(f"layers.{i}.attn.wq"), wk=take(f"layers.{i}.attn.wk"),
            wv=take(f"layers.{i}.attn.wv"), wo=take(f"layers.{i}.attn.wo"),
            w_up=take(f"layers.{i}.mlp.up"), w_down=take(f"layers.{i}.mlp.down"),
            attn_gain=take(f"layers.{i}.attn.gain"), mlp_gain=take(f"layers.{i}.mlp.gain"),
            n_heads=n_heads, d_ffn=d_ffn))
    model = Model(
        config,
        vision_w=take("vision.w", frozen=True),
        proj_w1=take("projector.w1"), proj_b1=take("projector.b1"),
        proj_w2=take("projector.w2"), proj_b2=take("projector.b2"),
        embed=take("embed.w"), layers=layers,
        final_gain=take("final_norm.g"), head_w=take("head.w"))
    if arrays:
        raise CheckpointError(f"{path}: unexpected extra tensors {sorted(arrays)}")
    return model, manifest
