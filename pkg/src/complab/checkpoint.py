"""Binary checkpoint container.

Layout, all integers little-endian:

    bytes 0..3   magic "CLAB"
    bytes 4..5   format version (u16), currently 1
    bytes 6..9   manifest length in bytes (u32)
    manifest     canonical JSON (sorted keys, compact separators, utf-8)
    payload      tensor data in manifest order, no padding between tensors

Full-precision tensors store raw little-endian float32, row-major.
Quantized tensors store ceil(n/2) packed code bytes followed by
ceil(n/block_size) float32 scales. Every payload length is derived from
the manifest, so the format is self-describing and deterministic:
serializing the same model twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import ModelConfig, TransformerModel
from .quant import Precision, QuantizedTensor
from .tensor import Tensor

MAGIC = b"CLAB"
VERSION = 1
_HEADER_LEN = 10


def _manifest_for(model: TransformerModel) -> dict:
    tensors = []
    for name, p in model.named_parameters():
        if isinstance(p, QuantizedTensor):
            tensors.append({
                "name": name,
                "shape": list(p.shape),
                "format": "nf4",
                "block_size": p.block_size,
            })
        else:
            tensors.append({
                "name": name,
                "shape": list(p.data.shape),
                "format": "fp32",
            })
    return {
        "config": model.config.to_dict(),
        "precision": model.precision.value,
        "block_size": model.quant_block_size,
        "tensors": tensors,
    }


def serialize_bytes(model: TransformerModel) -> bytes:
    manifest = json.dumps(
        _manifest_for(model), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    parts = [
        MAGIC,
        VERSION.to_bytes(2, "little"),
        len(manifest).to_bytes(4, "little"),
        manifest,
    ]
    for _, p in model.named_parameters():
        if isinstance(p, QuantizedTensor):
            parts.append(p.codes.tobytes())
            parts.append(p.scales.astype("<f4").tobytes())
        else:
            parts.append(p.data.astype("<f4").tobytes())
    return b"".join(parts)


def serialize(model: TransformerModel, path) -> int:
    """Write the checkpoint; returns bytes written."""
    data = serialize_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def serialized_size(model: TransformerModel) -> int:
    return len(serialize_bytes(model))


def model_hash(model: TransformerModel) -> str:
    return hashlib.sha256(serialize_bytes(model)).hexdigest()


def deserialize_bytes(data: bytes) -> TransformerModel:
    if len(data) < _HEADER_LEN:
        raise CheckpointFormatError(
            f"truncated header: {len(data)} bytes at offset 0, need {_HEADER_LEN}"
        )
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r} at offset 0")
    version = int.from_bytes(data[4:6], "little")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    manifest_len = int.from_bytes(data[6:10], "little")
    end = _HEADER_LEN + manifest_len
    if len(data) < end:
        raise CheckpointFormatError(
            f"truncated manifest at offset {len(data)}, expected {end} bytes"
        )
    try:
        manifest = json.loads(data[_HEADER_LEN:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(
            f"invalid manifest JSON at offset {_HEADER_LEN}: {e}"
        ) from None

    try:
        config = ModelConfig.from_dict(manifest["config"])
        precision = Precision(manifest["precision"])
        entries = manifest["tensors"]
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointFormatError(
            f"manifest missing or invalid field at offset {_HEADER_LEN}: {e}"
        ) from None

    params = {}
    offset = end
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            fmt = entry["format"]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(
                f"bad tensor entry at offset {_HEADER_LEN}: {e}"
            ) from None
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if fmt == "fp32":
            nbytes = 4 * n
            chunk = data[offset:offset + nbytes]
            if len(chunk) < nbytes:
                raise CheckpointFormatError(
                    f"truncated payload for {name} at offset {offset}: "
                    f"need {nbytes} bytes, have {len(chunk)}"
                )
            arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
            params[name] = Tensor(arr.copy(), requires_grad=True)
            offset += nbytes
        elif fmt == "nf4":
            block = int(entry.get("block_size", 0))
            if block < 1:
                raise CheckpointFormatError(
                    f"tensor {name} missing block_size at offset {_HEADER_LEN}"
                )
            code_bytes = (n + 1) // 2
            scale_bytes = 4 * ((n + block - 1) // block)
            nbytes = code_bytes + scale_bytes
            chunk = data[offset:offset + nbytes]
            if len(chunk) < nbytes:
                raise CheckpointFormatError(
                    f"truncated payload for {name} at offset {offset}: "
                    f"need {nbytes} bytes, have {len(chunk)}"
                )
            codes = np.frombuffer(chunk[:code_bytes], dtype=np.uint8).copy()
            scales = np.frombuffer(chunk[code_bytes:], dtype="<f4").astype(np.float32)
            params[name] = QuantizedTensor(shape, block, codes, scales.copy())
            offset += nbytes
        else:
            raise CheckpointFormatError(
                f"unknown tensor format {fmt!r} for {name} at offset {_HEADER_LEN}"
            )
    if offset != len(data):
        raise CheckpointFormatError(
            f"{len(data) - offset} trailing bytes at offset {offset}"
        )

    try:
        model = TransformerModel(config, params)
    except KeyError as e:
        raise CheckpointFormatError(
            f"manifest tensor list incomplete: missing {e.args[0]!r}"
        ) from None
    model.precision = precision
    model.quant_block_size = manifest.get("block_size")
    return model


def deserialize(path) -> TransformerModel:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return deserialize_bytes(p.read_bytes())
