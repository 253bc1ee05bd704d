"""Software emulation of the low-precision number formats used by the engine.

Every format is treated as a projection of float64: values are carried in
float64 arrays and ``round_to_format`` snaps them onto the representable grid
of BF16, FP8 (E4M3) or FP4 (E2M1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class EmulatedFormat(enum.IntEnum):
    WIDE = 0
    BF16 = 1
    FP8_E4M3 = 2
    FP4_E2M1 = 3


class RoundingMode(enum.Enum):
    NEAREST_EVEN = "rtn"
    STOCHASTIC = "sr"
    ROUND_UP_MAGNITUDE = "up"


@dataclass(frozen=True)
class _Grid:
    precision: int  # significand bits including the implicit one
    emin: int  # exponent of the smallest normal number
    max_value: float


_GRIDS = {
    EmulatedFormat.BF16: _Grid(8, -126, float((2 - 2.0**-7) * 2.0**127)),
    EmulatedFormat.FP8_E4M3: _Grid(4, -6, 448.0),
    EmulatedFormat.FP4_E2M1: _Grid(2, 0, 6.0),
}

FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
FP4_MAX = 6.0
E4M3_MAX = 448.0
E4M3_MIN_SUBNORMAL = 2.0**-9


def format_max(fmt: EmulatedFormat) -> float:
    if fmt is EmulatedFormat.WIDE:
        return float(np.finfo(np.float64).max)
    return _GRIDS[fmt].max_value


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot round non-finite values")


def _round_bf16_nearest(x: np.ndarray) -> np.ndarray:
    # Round-half-even on the float64 bit pattern: keep 7 of 52 fraction bits.
    bits = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
    drop = np.uint64(45)
    lsb = (bits >> drop) & np.uint64(1)
    bits = (bits + (np.uint64((1 << 44) - 1) + lsb)) & ~np.uint64((1 << 45) - 1)
    out = bits.view(np.float64)
    grid = _GRIDS[EmulatedFormat.BF16]
    mag = np.abs(out)
    if mag.min(initial=np.inf) < 2.0**grid.emin:
        tiny = np.abs(x) < 2.0**grid.emin
        out = np.where(tiny, _round_grid(x, grid, RoundingMode.NEAREST_EVEN, None), out)
    # Anything that rounds to 2**128 or beyond overflows to infinity, as IEEE
    # BF16 does. Training loops detect this as divergence.
    if mag.max(initial=0.0) >= 2.0**128:
        out = np.where(np.abs(out) >= 2.0**128, np.copysign(np.inf, out), out)
    return out


_EXP_MASK = np.uint64(0x7FF)
_MANT_BITS = np.uint64(52)


def _round_grid(x: np.ndarray, grid: _Grid, mode: RoundingMode, rng) -> np.ndarray:
    mag = np.abs(x)
    # Unbiased exponent straight from the float64 bit pattern.
    e = ((mag.view(np.uint64) >> _MANT_BITS) & _EXP_MASK).astype(np.int64)
    exponent = np.maximum(e, grid.emin + 1023) - (grid.precision - 1)
    quantum = (exponent.astype(np.uint64) << _MANT_BITS).view(np.float64)
    scaled = mag / quantum  # exact: quantum is a power of two
    if mode is RoundingMode.NEAREST_EVEN:
        r = np.rint(scaled)
    elif mode is RoundingMode.ROUND_UP_MAGNITUDE:
        r = np.ceil(scaled)
    elif mode is RoundingMode.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        r = np.floor(scaled)
        r += rng.random(np.shape(scaled)) < (scaled - r)
    else:
        raise ValueError(f"unknown rounding mode {mode!r}")
    r *= quantum
    np.minimum(r, grid.max_value, out=r)
    return np.copysign(r, x)


def round_to_format(x, fmt: EmulatedFormat, mode: RoundingMode = RoundingMode.NEAREST_EVEN,
                    rng: np.random.Generator | None = None):
    """Round ``x`` (scalar or array) onto the grid of ``fmt``.

    FP4 and E4M3 saturate at their largest finite magnitude; BF16 under
    nearest-even overflows to infinity like IEEE hardware. Stochastic
    rounding picks the upper neighbour with probability equal to the
    fractional distance, so it is unbiased inside the representable range.
    """
    fmt = EmulatedFormat(fmt)
    if fmt is EmulatedFormat.WIDE:
        raise ValueError("WIDE is the carrier format; nothing to round to")
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if fmt is EmulatedFormat.BF16 and mode is RoundingMode.NEAREST_EVEN:
        out = _round_bf16_nearest(arr)
    else:
        out = _round_grid(arr, _GRIDS[fmt], mode, rng)
    if np.ndim(x) == 0:
        return float(out[0])
    return out


def is_representable(x, fmt: EmulatedFormat) -> np.ndarray:
    """Elementwise test that ``x`` lies exactly on the grid of ``fmt``."""
    fmt = EmulatedFormat(fmt)
    arr = np.asarray(x, dtype=np.float64)
    if fmt is EmulatedFormat.WIDE:
        return np.isfinite(arr)
    ok = np.isfinite(arr)
    safe = np.where(ok, arr, 0.0)
    return ok & (round_to_format(safe, fmt) == safe) & (np.abs(safe) <= format_max(fmt))


class DenseMatrix:
    """Row-major float64 matrix tagged with the precision its values lie on.

    Behaves as an array through ``__array__`` so numpy routines accept it.
    """

    __slots__ = ("_data", "format_tag")

    def __init__(self, data, format_tag: EmulatedFormat = EmulatedFormat.WIDE, *, check: bool = True):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, 0)
        if arr.ndim != 2:
            raise ValueError(f"DenseMatrix needs 2-D data, got shape {arr.shape}")
        fmt = EmulatedFormat(format_tag)
        if check and fmt is not EmulatedFormat.WIDE and arr.size:
            if not np.all(is_representable(arr, fmt)):
                raise ValueError(f"values are not representable in {fmt.name}")
        arr.setflags(write=False)
        self._data = arr
        self.format_tag = fmt

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.format_tag == other.format_tag and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"DenseMatrix({self.rows}x{self.cols}, {self.format_tag.name})"


def cast_matrix(m, fmt: EmulatedFormat, mode: RoundingMode = RoundingMode.NEAREST_EVEN,
                rng: np.random.Generator | None = None) -> DenseMatrix:
    fmt = EmulatedFormat(fmt)
    src = m.data if isinstance(m, DenseMatrix) else np.asarray(m, dtype=np.float64)
    if fmt is EmulatedFormat.WIDE:
        return DenseMatrix(src, fmt)
    return DenseMatrix(round_to_format(src, fmt, mode, rng), fmt, check=False)


def bf16(x: np.ndarray) -> np.ndarray:
    """Shorthand for nearest-even rounding of an array to BF16."""
    return round_to_format(np.asarray(x, dtype=np.float64), EmulatedFormat.BF16)


def gemm(a: np.ndarray, b: np.ndarray, accumulate: str = "bf16", chunk: int | None = 64) -> np.ndarray:
    """Matrix product with emulated accumulator precision.

    ``accumulate="bf16"`` sums the contraction in slices of ``chunk`` products
    and rounds the running sum to BF16 after each slice (``chunk=None`` rounds
    once at the end). ``"wide"`` is a plain float64 product.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    if accumulate == "wide":
        return a @ b
    if accumulate != "bf16":
        raise ValueError(f"unknown accumulator {accumulate!r}")
    depth = a.shape[-1]
    if chunk is None or depth <= chunk:
        return bf16(a @ b)
    acc = bf16(a[:, :chunk] @ b[:chunk])
    for start in range(chunk, depth, chunk):
        acc = bf16(acc + a[:, start:start + chunk] @ b[start:start + chunk])
    return acc
