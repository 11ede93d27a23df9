"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic b"MOPCKPT\\0"
    8 bytes   uint64 manifest length M
    M bytes   UTF-8 JSON manifest
    N bytes   payload: float32 little-endian tensors, back to back

The manifest records the format version, the model config, each layer's
active head and neuron counts, the payload length and an ordered tensor
index of ``{name, dtype, shape, offset, length}`` with offsets relative to
the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import (ContractError, ManifestError, TruncatedPayloadError,
                      VersionMismatchError)
from ..model import PROJECTIONS, ModelConfig, TransformerLayer, TransformerModel
from ..tensor import Tensor

MAGIC = b"MOPCKPT\x00"
FORMAT_VERSION = 1
DTYPE = "<f4"
_LEN = struct.Struct("<Q")


def to_bytes(model: TransformerModel) -> bytes:
    if any(layer.adapters for layer in model.layers):
        raise ContractError("merge LoRA adapters before saving")
    index, chunks, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype=DTYPE).tobytes()
        index.append({"name": name, "dtype": DTYPE, "shape": list(t.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layers": [{"n_heads": layer.n_heads, "d_ff": layer.d_ff} for layer in model.layers],
        "payload_length": offset,
        "tensors": index,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def save_checkpoint(model: TransformerModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(blob: bytes) -> TransformerModel:
    if len(blob) < len(MAGIC) + _LEN.size or blob[: len(MAGIC)] != MAGIC:
        raise ManifestError("not a checkpoint file (bad magic)")
    (m_len,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + m_len > len(blob):
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = json.loads(blob[start:start + m_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, reader supports {FORMAT_VERSION}")

    payload = memoryview(blob)[start + m_len:]
    expected = manifest.get("payload_length")
    if not isinstance(expected, int):
        raise ManifestError("manifest lacks payload_length")
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, manifest declares {expected}")
    if len(payload) > expected:
        raise ManifestError(f"{len(payload) - expected} trailing bytes after payload")

    tensors, cursor = {}, 0
    for entry in manifest.get("tensors", []):
        shape, off, length = entry["shape"], entry["offset"], entry["length"]
        if entry.get("dtype") != DTYPE:
            raise ManifestError(f"{entry['name']}: unsupported dtype {entry.get('dtype')}")
        if off != cursor:
            raise ManifestError(f"{entry['name']}: offset {off} breaks index order (expected {cursor})")
        if int(np.prod(shape, dtype=np.int64)) * 4 != length:
            raise ManifestError(f"{entry['name']}: shape {shape} does not match length {length}")
        if off + length > expected:
            raise ManifestError(f"{entry['name']}: extends past the payload")
        arr = np.frombuffer(payload[off:off + length], dtype=DTYPE).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
        cursor = off + length
    if cursor != expected:
        raise ManifestError("tensor index does not cover the payload")
    return _assemble(manifest, tensors)


def _assemble(manifest: dict, tensors: dict) -> TransformerModel:
    try:
        config = ModelConfig(**manifest["config"])
        layers = []
        for i, shape in enumerate(manifest["layers"]):
            parts = {name: Tensor(tensors[f"layers.{i}.{name}"])
                     for name in PROJECTIONS + ("norm_attn", "norm_mlp")}
            layer = TransformerLayer(**parts, d_head=config.d_head)
            if layer.n_heads != shape["n_heads"] or layer.d_ff != shape["d_ff"]:
                raise ManifestError(f"layer {i} widths disagree with tensor shapes")
            layers.append(layer)
        model = TransformerModel(config, Tensor(tensors["embedding"]), layers,
                                 Tensor(tensors["final_norm"]), Tensor(tensors["lm_head"]))
    except KeyError as exc:
        raise ManifestError(f"missing entry {exc}") from exc
    expected = {name for name, _ in model.named_parameters()}
    if expected != set(tensors):
        raise ManifestError(f"unexpected tensors: {sorted(set(tensors) - expected)}")
    return model


def load_checkpoint(path) -> TransformerModel:
    return from_bytes(Path(path).read_bytes())
