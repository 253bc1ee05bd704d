"""File formats and report plumbing.

Binary layouts are little-endian throughout:

* matrix file: 12-byte magic, u32 version, u64 rows, u64 cols, u8 format
  tag, then ``rows * cols`` float64 values in row-major order;
* quantized tensor file: 12-byte magic, u32 version, u64 rows, u64 cols,
  u32 block size, u8 rounding, f64 per-tensor scale, then one E4M3 byte per block scale and the
  element codes packed two per byte (low nibble holds the even index). A
  code is ``sign << 3 | index`` into the E2M1 magnitude table;
* weight checkpoint: 12-byte magic, u32 version, u32 metadata length, JSON
  metadata, then the ``u``, ``s`` (as a 1 x k row), ``v`` and ``residual``
  matrices as consecutive matrix records.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import struct
import sys
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .engine import MetisWeight
from .fp4 import QuantizedBlockTensor
from .precision import FP4_MAGNITUDES, DenseMatrix, EmulatedFormat, RoundingMode

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

MATRIX_MAGIC = b"SPECFP4-MATX"
QTENSOR_MAGIC = b"SPECFP4-QTNS"
WEIGHT_MAGIC = b"SPECFP4-WGHT"
FORMAT_VERSION = 1
SCHEMA_VERSION = "1.0"

_MATRIX_HEAD = struct.Struct("<12sIQQB")
_QTENSOR_HEAD = struct.Struct("<12sIQQIBd")
_WEIGHT_HEAD = struct.Struct("<12sII")
_ROUNDING_CODES = {RoundingMode.NEAREST_EVEN: 0, RoundingMode.STOCHASTIC: 1, RoundingMode.ROUND_UP_MAGNITUDE: 2}


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


class TruncatedFileError(FormatError):
    pass


class MagicMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class NonFiniteValueError(ValueError):
    def __init__(self, field_path: str):
        super().__init__(f"non-finite value in field {field_path!r}")
        self.field = field_path


# ---------------------------------------------------------------------------
# dense matrices
# ---------------------------------------------------------------------------

def _check_head(buf: bytes, head: struct.Struct, magic: bytes, what: str) -> tuple:
    if len(buf) < len(magic):
        raise TruncatedFileError(f"{what}: file shorter than its magic number")
    if buf[:len(magic)] != magic:
        raise MagicMismatchError(f"{what}: bad magic {buf[:len(magic)]!r}")
    if len(buf) < head.size:
        raise TruncatedFileError(f"{what}: header truncated ({len(buf)} of {head.size} bytes)")
    fields_ = head.unpack_from(buf)
    if fields_[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{what}: unknown version {fields_[1]}")
    return fields_


def matrix_to_bytes(m) -> bytes:
    if isinstance(m, DenseMatrix):
        data, fmt = m.data, m.format_tag
    else:
        data, fmt = np.asarray(m, dtype=np.float64), EmulatedFormat.WIDE
    if data.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {data.shape}")
    rows, cols = data.shape
    head = _MATRIX_HEAD.pack(MATRIX_MAGIC, FORMAT_VERSION, rows, cols, int(fmt))
    return head + np.ascontiguousarray(data, dtype="<f8").tobytes()


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[DenseMatrix, int]:
    """Decode one matrix record starting at ``offset``; return it and the end offset."""
    view = memoryview(buf)[offset:]
    _, _, rows, cols, fmt = _check_head(bytes(view[:_MATRIX_HEAD.size]), _MATRIX_HEAD, MATRIX_MAGIC, "matrix")
    try:
        tag = EmulatedFormat(fmt)
    except ValueError as exc:
        raise FormatError(f"matrix: unknown format tag {fmt}") from exc
    size = rows * cols * 8
    end = _MATRIX_HEAD.size + size
    if len(view) < end:
        raise TruncatedFileError(f"matrix: payload truncated ({len(view) - _MATRIX_HEAD.size} of {size} bytes)")
    data = np.frombuffer(view[_MATRIX_HEAD.size:end], dtype="<f8").reshape(rows, cols)
    return DenseMatrix(data.astype(np.float64), tag), offset + end


def write_matrix(path, m) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def read_matrix(path) -> DenseMatrix:
    buf = Path(path).read_bytes()
    m, end = matrix_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"matrix: {len(buf) - end} trailing bytes")
    return m


def read_matrix_csv(path) -> DenseMatrix:
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if line and not line[0].lstrip().startswith("#"):
                rows.append([float(v) for v in line])
    if not rows:
        return DenseMatrix(np.zeros((0, 0)))
    if len({len(r) for r in rows}) != 1:
        raise FormatError("CSV matrix rows have different lengths")
    return DenseMatrix(np.array(rows))


def load_matrix(path) -> DenseMatrix:
    """Read a binary matrix file, or a CSV/NPY file by extension."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return read_matrix_csv(p)
    if p.suffix.lower() == ".npy":
        return DenseMatrix(np.load(p, allow_pickle=False))
    return read_matrix(p)


# ---------------------------------------------------------------------------
# E4M3 bytes and packed FP4 codes
# ---------------------------------------------------------------------------

def _e4m3_table() -> np.ndarray:
    codes = np.arange(256, dtype=np.int64)
    sign = np.where(codes >> 7, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    mant = codes & 0x7
    val = np.where(exp == 0, mant / 8.0 * 2.0**-6, (1 + mant / 8.0) * 2.0 ** (exp - 7))
    val = sign * val
    val[(exp == 0xF) & (mant == 0x7)] = np.nan  # the single NaN encoding per sign
    return val


E4M3_VALUES = _e4m3_table()
_E4M3_POSITIVE = {float(v): i for i, v in enumerate(E4M3_VALUES[:128]) if np.isfinite(v)}


def encode_e4m3(values) -> np.ndarray:
    """Bytes for values already on the non-negative E4M3 grid."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    out = np.empty(flat.size, dtype=np.uint8)
    for i, v in enumerate(flat):
        try:
            out[i] = _E4M3_POSITIVE[float(v)]
        except KeyError as exc:
            raise ValueError(f"{v!r} is not a non-negative E4M3 value") from exc
    return out.reshape(np.shape(values))


def decode_e4m3(codes) -> np.ndarray:
    return E4M3_VALUES[np.asarray(codes, dtype=np.uint8)]


def encode_fp4(values) -> np.ndarray:
    """Nibble codes ``sign << 3 | magnitude index`` for E2M1 values."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(FP4_MAGNITUDES, np.abs(v))
    idx = np.minimum(idx, FP4_MAGNITUDES.size - 1)
    if not np.array_equal(FP4_MAGNITUDES[idx], np.abs(v)):
        raise ValueError("values are not on the E2M1 grid")
    sign = np.signbit(v).astype(np.uint8)
    return (sign << 3 | idx.astype(np.uint8)).astype(np.uint8)


def decode_fp4(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint8)
    mag = FP4_MAGNITUDES[c & 0x7]
    return np.where(c & 0x8, -mag, mag)


def pack_nibbles(codes) -> bytes:
    c = np.asarray(codes, dtype=np.uint8).ravel()
    if c.size % 2:
        c = np.append(c, np.uint8(0))
    return (c[0::2] | (c[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.uint8)
    out[0::2] = b & 0xF
    out[1::2] = b >> 4
    return out[:count]


def qtensor_to_bytes(q: QuantizedBlockTensor) -> bytes:
    rows, cols = q.shape
    head = _QTENSOR_HEAD.pack(QTENSOR_MAGIC, FORMAT_VERSION, rows, cols, q.block_size,
                              _ROUNDING_CODES[q.mode], q.tensor_scale)
    return head + encode_e4m3(q.scales).tobytes() + pack_nibbles(encode_fp4(q.codes))


def qtensor_from_bytes(buf: bytes) -> QuantizedBlockTensor:
    _, _, rows, cols, block, mode, tscale = _check_head(buf, _QTENSOR_HEAD, QTENSOR_MAGIC, "quantized tensor")
    if block < 1:
        raise FormatError("quantized tensor: block size must be positive")
    if not (math.isfinite(tscale) and tscale > 0):
        raise FormatError("quantized tensor: tensor scale must be positive and finite")
    modes = {v: k for k, v in _ROUNDING_CODES.items()}
    if mode not in modes:
        raise FormatError(f"quantized tensor: unknown rounding code {mode}")
    n_blocks = -(-cols // block) if cols else 0
    n_scales = rows * n_blocks
    n_codes = rows * cols
    need = _QTENSOR_HEAD.size + n_scales + (n_codes + 1) // 2
    if len(buf) < need:
        raise TruncatedFileError(f"quantized tensor: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise FormatError(f"quantized tensor: {len(buf) - need} trailing bytes")
    pos = _QTENSOR_HEAD.size
    scales = decode_e4m3(np.frombuffer(buf, np.uint8, n_scales, pos)).reshape(rows, n_blocks)
    codes = decode_fp4(unpack_nibbles(buf[pos + n_scales:], n_codes)).reshape(rows, cols)
    return QuantizedBlockTensor(codes, scales, block, modes[mode], tscale)


def write_qtensor(path, q: QuantizedBlockTensor) -> None:
    Path(path).write_bytes(qtensor_to_bytes(q))


def read_qtensor(path) -> QuantizedBlockTensor:
    return qtensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# weight checkpoints
# ---------------------------------------------------------------------------

def save_weight(path, w: MetisWeight, seed: int = 0, step: int = 0) -> None:
    meta = json.dumps({"k": w.k, "seed": int(seed), "step": int(step), "shape": list(w.shape)}).encode()
    parts = [_WEIGHT_HEAD.pack(WEIGHT_MAGIC, FORMAT_VERSION, len(meta)), meta]
    for arr in (w.u, w.s[None, :], w.v, w.residual):
        parts.append(matrix_to_bytes(arr))
    Path(path).write_bytes(b"".join(parts))


def load_weight(path) -> tuple[MetisWeight, dict]:
    buf = Path(path).read_bytes()
    _, _, n_meta = _check_head(buf, _WEIGHT_HEAD, WEIGHT_MAGIC, "weight")
    pos = _WEIGHT_HEAD.size
    if len(buf) < pos + n_meta:
        raise TruncatedFileError("weight: metadata truncated")
    meta = json.loads(buf[pos:pos + n_meta])
    pos += n_meta
    mats = []
    for _ in range(4):
        m, pos = matrix_from_bytes(buf, pos)
        mats.append(m.data)
    if pos != len(buf):
        raise FormatError("weight: trailing bytes")
    u, s, v, r = mats
    s = s.reshape(-1) if s.size else np.zeros(0)
    w = MetisWeight(u.reshape(r.shape[0], -1), s, v.reshape(r.shape[1], -1), r)
    if w.k != meta["k"]:
        raise FormatError("weight: metadata rank disagrees with stored factors")
    return w, meta


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """Parse a TOML or JSON experiment config into a plain dict."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".toml":
        return tomllib.loads(p.read_text(encoding="utf-8"))
    if suffix == ".json":
        return json.loads(p.read_bytes())
    raise ValueError(f"unsupported config extension {p.suffix!r} (use .toml or .json)")


def config_hash(config: dict) -> str:
    canon = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_SERIES = {"type": "array", "items": _NUM}

SCHEMAS = {
    "run": {
        "type": "object",
        "required": ["config", "losses", "final_train_loss", "final_eval_loss", "layers",
                     "op_ratio", "wall_time", "diverged_at"],
        "properties": {
            "config": {"type": "object"},
            "losses": _SERIES,
            "final_train_loss": _NUM_OR_NULL,
            "final_eval_loss": _NUM_OR_NULL,
            "layers": {"type": "object"},
            "op_ratio": _NUM,
            "wall_time": _NUM,
            "diverged_at": {"type": ["integer", "null"]},
        },
    },
    "analysis": {
        "type": "object",
        "required": ["shape", "k", "spectrum", "elbow", "histograms", "residual_range_ratio"],
        "properties": {
            "shape": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            "k": {"type": "integer", "minimum": 0},
            "spectrum": _SERIES,
            "elbow": {"type": "object", "required": ["index", "fraction", "max_curvature", "flat"]},
            "histograms": {"type": "object"},
            "residual_range_ratio": _NUM_OR_NULL,
        },
    },
    "quantize": {
        "type": "object",
        "required": ["shape", "block_size", "rounding", "rel_error", "zero_fraction"],
        "properties": {"rel_error": _NUM, "zero_fraction": _NUM},
    },
    "sweep": {
        "type": "object",
        "required": ["ranks", "final_losses", "relative_spread", "within_tolerance"],
        "properties": {"ranks": _SERIES, "final_losses": _SERIES, "relative_spread": _NUM,
                       "within_tolerance": {"type": "boolean"}},
    },
    "compare": {
        "type": "object",
        "required": ["regimes", "final_losses"],
        "properties": {"regimes": {"type": "array", "items": {"type": "string"}},
                       "final_losses": {"type": "object"}},
    },
    "cost": {
        "type": "object",
        "required": ["baseline", "terms", "overhead", "ratio"],
        "properties": {"ratio": _NUM},
    },
}


def _plain(obj):
    """Convert dataclasses, enums and numpy values to JSON-ready Python types."""
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def check_finite(obj, path: str = "") -> None:
    """Raise ``NonFiniteValueError`` naming the first NaN or infinity found."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise NonFiniteValueError(path or "<root>")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            check_finite(v, f"{path}.{k}" if path else str(k))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            check_finite(v, f"{path}[{i}]")


@dataclass
class ReportEnvelope:
    kind: str
    payload: dict
    config: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION
    tool_version: str = __version__
    timestamp: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if self.kind not in SCHEMAS:
            raise ValueError(f"unknown report kind {self.kind!r}")
        self.payload = _plain(self.payload)
        self.config = _plain(self.config)
        if not self.timestamp:
            self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def validate(self) -> None:
        try:
            jsonschema.validate(self.payload, SCHEMAS[self.kind])
        except jsonschema.ValidationError as exc:
            raise ValueError(f"{self.kind} payload invalid: {exc.message}") from exc

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
            "kind": self.kind,
            "config_hash": self.config_hash,
            "config": self.config,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportEnvelope":
        env = cls(kind=d["kind"], payload=d["payload"], config=d.get("config", {}),
                  schema_version=d["schema_version"], tool_version=d["tool_version"],
                  timestamp=d["timestamp"], config_hash=d["config_hash"])
        env.validate()
        return env


def emit_report(record, fmt: str = "json") -> bytes:
    """Serialize a report.

    JSON accepts an envelope or any record; CSV accepts flat series only: a
    mapping of equal-length columns, or a run report (its loss series).
    Field order follows the record; float values use the shortest
    representation that reads back to the same double.
    """
    if isinstance(record, ReportEnvelope):
        record.validate()
        data = record.to_dict()
    else:
        data = _plain(record)
    if fmt == "json":
        check_finite(data)
        return (json.dumps(data, indent=2, allow_nan=False) + "\n").encode()
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(record, ReportEnvelope):
        data = data["payload"]
    columns = _flat_columns(data)
    check_finite(columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    writer.writerow(names)
    for row in zip(*(columns[n] for n in names)):
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode()


def _flat_columns(data) -> dict:
    if isinstance(data, dict) and "losses" in data and isinstance(data["losses"], list):
        return {"step": list(range(len(data["losses"]))), "loss": data["losses"]}
    if isinstance(data, dict) and data and all(isinstance(v, list) for v in data.values()):
        lengths = {len(v) for v in data.values()}
        if len(lengths) != 1:
            raise ValueError("CSV columns have different lengths")
        for name, col in data.items():
            if any(isinstance(v, (list, dict)) for v in col):
                raise ValueError(f"column {name!r} is not flat")
        return dict(data)
    raise ValueError("CSV output needs a flat series (mapping of equal-length columns)")


def parse_report(raw: bytes) -> dict:
    return json.loads(raw)
