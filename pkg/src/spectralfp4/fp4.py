"""NVFP4 block quantization: E2M1 codes sharing one E4M3 scale per block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .precision import (
    E4M3_MAX,
    E4M3_MIN_SUBNORMAL,
    FP4_MAX,
    DenseMatrix,
    EmulatedFormat,
    RoundingMode,
    round_to_format,
)

DEFAULT_BLOCK = 16


@dataclass(frozen=True)
class QuantizedBlockTensor:
    """Quantized form of a 2-D matrix.

    ``codes`` has the matrix shape and holds E2M1 values; ``scales`` has shape
    ``(rows, ceil(cols / block_size))``. Blocks run along the last axis and
    never span two rows.
    """

    codes: np.ndarray
    scales: np.ndarray
    block_size: int = DEFAULT_BLOCK
    mode: RoundingMode = RoundingMode.NEAREST_EVEN
    tensor_scale: float = 1.0  # optional per-tensor FP32 factor, 1.0 when unused

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def n_blocks(self) -> int:
        return self.scales.shape[1]


def _as_2d(m) -> np.ndarray:
    arr = np.asarray(m.data if isinstance(m, DenseMatrix) else m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    return arr


def _blocked(arr: np.ndarray, t: int) -> np.ndarray:
    rows, cols = arr.shape
    nb = -(-cols // t)
    pad = nb * t - cols
    if pad:
        arr = np.pad(arr, ((0, 0), (0, pad)))
    return arr.reshape(rows, nb, t)


def block_scales(m, block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """Per-block E4M3 scale: block max over 6, rounded up in magnitude."""
    blocks = _blocked(_as_2d(m), block_size)
    amax = np.abs(blocks).max(axis=-1) if blocks.size else np.zeros(blocks.shape[:2])
    scales = round_to_format(amax / FP4_MAX, EmulatedFormat.FP8_E4M3, RoundingMode.ROUND_UP_MAGNITUDE)
    scales = np.asarray(scales, dtype=np.float64)
    scales[(scales == 0) & (amax > 0)] = E4M3_MIN_SUBNORMAL  # amax / 6 underflowed
    scales[amax == 0] = 1.0
    return scales


def tensor_scale_for(arr: np.ndarray) -> float:
    """FP32 per-tensor factor mapping the tensor max onto the top of the E4M3 x E2M1 range."""
    amax = float(np.abs(arr).max()) if arr.size else 0.0
    if amax == 0.0:
        return 1.0
    exact = amax / (FP4_MAX * E4M3_MAX)
    g = np.float32(exact)
    if float(g) < exact:  # round up so the largest block scale stays within E4M3
        g = np.nextafter(g, np.float32(np.inf))
    g = float(g)
    return g if g > 0 else 1.0


def quantize_nvfp4(m, block_size: int = DEFAULT_BLOCK,
                   mode: RoundingMode = RoundingMode.NEAREST_EVEN,
                   rng: np.random.Generator | None = None,
                   tensor_scale: bool = False) -> QuantizedBlockTensor:
    """Block-quantize ``m``; with ``tensor_scale`` a per-tensor FP32 factor is
    divided out first so block scales use the whole E4M3 range."""
    if block_size < 1:
        raise ValueError("block size must be positive")
    arr = _as_2d(m)
    g = tensor_scale_for(arr) if tensor_scale else 1.0
    if g != 1.0:
        arr = arr / g
    rows, cols = arr.shape
    scales = block_scales(arr, block_size)
    blocks = _blocked(arr, block_size)
    scaled = blocks / scales[..., None]
    codes = round_to_format(scaled, EmulatedFormat.FP4_E2M1, mode, rng)
    codes = np.asarray(codes).reshape(rows, blocks.shape[1] * block_size)[:, :cols]
    return QuantizedBlockTensor(np.ascontiguousarray(codes), scales, block_size, mode, g)


def dequantize(q: QuantizedBlockTensor) -> np.ndarray:
    rows, cols = q.shape
    if q.codes.size == 0:
        return np.zeros((rows, cols))
    per_elem = np.repeat(q.scales, q.block_size, axis=1)[:, :cols]
    out = q.codes * per_elem
    return out * q.tensor_scale if q.tensor_scale != 1.0 else out


def fake_quantize(m, block_size: int = DEFAULT_BLOCK,
                  mode: RoundingMode = RoundingMode.NEAREST_EVEN,
                  rng: np.random.Generator | None = None,
                  tensor_scale: bool = False) -> np.ndarray:
    """Quantize then dequantize in one call."""
    return dequantize(quantize_nvfp4(m, block_size, mode, rng, tensor_scale))


def zero_fraction(m, q: QuantizedBlockTensor) -> float:
    """Fraction of nonzero entries of ``m`` that dequantize to exactly zero."""
    arr = _as_2d(m)
    if arr.shape != q.shape:
        raise ValueError(f"shape mismatch {arr.shape} vs {q.shape}")
    nonzero = arr != 0
    count = int(nonzero.sum())
    if count == 0:
        return 0.0
    return float(np.sum(nonzero & (dequantize(q) == 0)) / count)
