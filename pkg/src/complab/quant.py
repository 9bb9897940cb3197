"""Blockwise 4-bit quantization with the published NF4 codebook.

Tensors are flattened row-major, cut into fixed-size blocks, and scaled
by each block's absolute maximum so values land in [-1, 1]. Each value
maps to the nearest of 16 codebook levels (ties keep the lower index)
and two 4-bit codes pack into one byte, low nibble first. Reconstruction
is level * scale, so re-quantizing a reconstructed tensor is a fixed
point: the codes and scales come back bit-identical.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointFormatError,
    NumericError,
    ParameterError,
    PrecisionStateError,
)
from .reports import StageReport
from .tensor import Tensor

DEFAULT_BLOCK_SIZE = 64

# 16-entry normal-float codebook: 7 negative levels, zero, 8 positive
# levels, endpoints at -1 and +1
NF4_LEVELS = np.array(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=np.float32,
)


class Precision(enum.Enum):
    """Model-level precision state; gates which stages may run."""

    FULL = "fp32"
    QUANTIZED_4BIT = "nf4"


@dataclass
class QuantizedTensor:
    """Packed 4-bit codes plus per-block float32 absmax scales.

    codes: uint8, length ceil(n/2); element 2i sits in the low nibble of
    byte i, element 2i+1 in the high nibble. An odd tail leaves the final
    high nibble zero. scales: float32, length ceil(n/block_size).
    """

    shape: tuple
    block_size: int
    codes: np.ndarray
    scales: np.ndarray

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def payload_bytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes

    def dequantize(self) -> np.ndarray:
        return dequantize_array(self)

    def copy(self) -> "QuantizedTensor":
        return QuantizedTensor(
            tuple(self.shape), self.block_size, self.codes.copy(), self.scales.copy()
        )


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def _unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    low = packed & 0x0F
    high = packed >> 4
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = low
    out[1::2] = high
    return out[:n]


def _nearest_level(values: np.ndarray) -> np.ndarray:
    """Index of the closest codebook level; exact ties take the lower index."""
    idx = np.searchsorted(NF4_LEVELS, values, side="left")
    lo = np.clip(idx - 1, 0, 15)
    hi = np.clip(idx, 0, 15)
    d_lo = values - NF4_LEVELS[lo]
    d_hi = NF4_LEVELS[hi] - values
    return np.where(d_lo <= d_hi, lo, hi).astype(np.uint8)


def quantize_array(x: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedTensor:
    if block_size < 1:
        raise ParameterError(f"block_size must be positive, got {block_size}")
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize non-finite values")
    flat = x.reshape(-1)
    n = flat.size
    n_blocks = (n + block_size - 1) // block_size
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:n] = flat
    scales = np.abs(padded).reshape(n_blocks, block_size).max(axis=1)
    per_elem = np.repeat(scales, block_size)[:n]
    normalized = np.where(per_elem > 0, flat / np.where(per_elem > 0, per_elem, 1.0), 0.0)
    codes = _nearest_level(normalized.astype(np.float32))
    return QuantizedTensor(tuple(x.shape), int(block_size), _pack_nibbles(codes), scales)


def dequantize_array(q: QuantizedTensor) -> np.ndarray:
    if not np.all(np.isfinite(q.scales)):
        raise CheckpointFormatError("quantized tensor has non-finite block scales")
    n = q.element_count
    codes = _unpack_nibbles(q.codes, n)
    per_elem = np.repeat(q.scales, q.block_size)[:n]
    return (NF4_LEVELS[codes] * per_elem).reshape(q.shape)


def quantize_tensor(t, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedTensor:
    data = t.data if isinstance(t, Tensor) else t
    return quantize_array(data, block_size)


def dequantize_tensor(q: QuantizedTensor) -> Tensor:
    """Reconstruct as a trainable full-precision tensor."""
    return Tensor(dequantize_array(q), requires_grad=True)


def quantization_error_bound(block_size: int = DEFAULT_BLOCK_SIZE) -> float:
    """Worst-case absolute reconstruction error for one element, as a
    multiple of its block scale: half the widest gap between levels."""
    gaps = np.diff(NF4_LEVELS)
    return float(gaps.max() / 2.0)


def quantize_model(model, block_size: int = DEFAULT_BLOCK_SIZE) -> StageReport:
    """Quantize every parameter in place and flip the precision state."""
    if model.precision is not Precision.FULL:
        raise PrecisionStateError(
            f"quantize requires a full-precision model, state is {model.precision.value}"
        )
    t0 = time.perf_counter()
    before_payload = payload_size(model)
    before_file = storage_size(model)
    model.map_parameters(lambda name, p: quantize_tensor(p, block_size))
    model.precision = Precision.QUANTIZED_4BIT
    model.quant_block_size = block_size
    after_payload = payload_size(model)
    after_file = storage_size(model)
    return StageReport(
        stage="Q",
        duration_seconds=time.perf_counter() - t0,
        details={
            "block_size": block_size,
            "payload_bytes_before": before_payload,
            "payload_bytes_after": after_payload,
            "file_bytes_before": before_file,
            "file_bytes_after": after_file,
            "payload_ratio": before_payload / after_payload,
        },
    )


def dequantize_model(model) -> StageReport:
    """Reconstruct every parameter to trainable float32 in place."""
    if model.precision is not Precision.QUANTIZED_4BIT:
        raise PrecisionStateError(
            f"dequantize requires a quantized model, state is {model.precision.value}"
        )
    t0 = time.perf_counter()
    before = payload_size(model)
    model.map_parameters(lambda name, p: dequantize_tensor(p))
    model.precision = Precision.FULL
    model.quant_block_size = None
    return StageReport(
        stage="D",
        duration_seconds=time.perf_counter() - t0,
        details={"payload_bytes_before": before, "payload_bytes_after": payload_size(model)},
    )


def payload_size(model) -> int:
    """Raw tensor payload bytes: 4 per float32 element, or packed codes
    plus scales for quantized tensors."""
    total = 0
    for _, p in model.named_parameters():
        if isinstance(p, QuantizedTensor):
            total += p.payload_bytes
        else:
            total += p.data.nbytes
    return total


def storage_size(model) -> int:
    """Size in bytes of the model serialized to the checkpoint format."""
    from .checkpoint import serialized_size

    return serialized_size(model)
