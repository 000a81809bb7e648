"""Whole-matrix multiply on top of the tile model, the HWKT tile-binary format, and bitwise comparison.

HWKT layout (all integers little-endian)::

    offset 0   b"HWKT"
    offset 4   version (0x01)
    offset 5   format code: 1 fp32, 2 fp16, 3 bf16, 4 fp8 (E4M3)
    offset 6   two reserved bytes (zero)
    offset 8   rows (u32)
    offset 12  cols (u32)
    offset 16  rows * cols element patterns, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FP32, FloatFormat, decode_table, format_by_code
from .pipeline import PipelineProfile, fold_bits

__all__ = [
    "Matrix",
    "ComparisonReport",
    "TileFileError",
    "ShapeError",
    "FormatMismatchError",
    "read_matrix",
    "write_matrix",
    "matmul",
    "compare",
    "ulp_distance",
]

MAGIC = b"HWKT"
VERSION = 1
_HEADER = struct.Struct("<4sBBHII")


class TileFileError(ValueError):
    """Malformed HWKT file."""


class ShapeError(ValueError):
    pass


class FormatMismatchError(ValueError):
    pass


@dataclass
class Matrix:
    """A rows x cols grid of raw bit patterns in one format."""

    fmt: FloatFormat
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"matrix data must be 2-D, got shape {data.shape}")
        if data.size and int(data.max()) >> self.fmt.total_bits:
            raise ValueError(f"pattern wider than {self.fmt.total_bits} bits in {self.fmt.name} matrix")
        self.data = np.ascontiguousarray(data, dtype=self.fmt.dtype)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, fmt: FloatFormat, rows: int, cols: int) -> "Matrix":
        return cls(fmt, np.zeros((rows, cols), dtype=fmt.dtype))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, VERSION, self.fmt.code, 0, self.rows, self.cols)
        return header + self.data.astype(self.data.dtype.newbyteorder("<"), copy=False).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Matrix":
        if len(blob) < 4 or blob[:4] != MAGIC:
            raise TileFileError("bad magic: not an HWKT tile file")
        if len(blob) < _HEADER.size:
            raise TileFileError("truncated header")
        _, version, code, _, rows, cols = _HEADER.unpack_from(blob)
        if version != VERSION:
            raise TileFileError(f"unsupported HWKT version {version}")
        try:
            fmt = format_by_code(code)
        except ValueError:
            raise TileFileError(f"unknown format code {code}") from None
        itemsize = np.dtype(fmt.dtype).itemsize
        need = rows * cols * itemsize
        payload = blob[_HEADER.size:]
        if len(payload) < need:
            raise TileFileError(f"truncated payload: {len(payload)} of {need} bytes")
        if len(payload) > need:
            raise TileFileError(f"{len(payload) - need} trailing bytes after payload")
        data = np.frombuffer(payload, dtype=np.dtype(fmt.dtype).newbyteorder("<"))
        return cls(fmt, data.reshape(rows, cols).astype(fmt.dtype))


def read_matrix(path: str | os.PathLike) -> Matrix:
    return Matrix.from_bytes(Path(path).read_bytes())


def write_matrix(matrix: Matrix, path: str | os.PathLike) -> None:
    Path(path).write_bytes(matrix.to_bytes())


def _pad(bits: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if bits.shape == (rows, cols):
        return bits
    out = np.zeros((rows, cols), dtype=bits.dtype)
    out[: bits.shape[0], : bits.shape[1]] = bits
    return out


def matmul(a: Matrix, b: Matrix, c: Matrix, profile: PipelineProfile, workers: int = 1,
           backend: str | None = None) -> Matrix:
    """D = C + A.B, folding K in ascending 16-wide steps through the tile model.

    K is zero-padded to a multiple of 16.  Rows and columns are independent
    cells of the same fold, so M and N need no padding.
    """
    fmt = profile.input_format
    if a.fmt != fmt or b.fmt != fmt:
        raise FormatMismatchError(f"A and B must be {fmt.name}, got {a.fmt.name} and {b.fmt.name}")
    if c.fmt != FP32:
        raise FormatMismatchError(f"C must be fp32, got {c.fmt.name}")
    m, k = a.shape
    if b.rows != k:
        raise ShapeError(f"A is {m}x{k} but B is {b.rows}x{b.cols}")
    n = b.cols
    if c.shape != (m, n):
        raise ShapeError(f"C must be {m}x{n}, got {c.rows}x{c.cols}")
    kp = max(16, -(-k // 16) * 16)
    ab = _pad(a.data, m, kp)[None]
    bb = _pad(b.data, kp, n)[None]
    out = fold_bits(ab, bb, c.data[None], profile, workers=workers, backend=backend)
    return Matrix(FP32, out[0])


def _ordered(bits: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Map sign-magnitude patterns onto integers that count representable values in order."""
    bits = bits.astype(np.int64)
    sign = bits >> (fmt.total_bits - 1)
    mag = bits & ((1 << (fmt.total_bits - 1)) - 1)
    return np.where(sign == 1, -mag, mag)


def _is_nan(bits: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    if fmt == FP32:
        b = bits.astype(np.uint32)
        return ((b >> 23) & 0xFF == 0xFF) & (b & 0x7FFFFF != 0)
    neg, sig, exp, special = decode_table(fmt)
    return special[bits] & (sig[bits] != 0)


def ulp_distance(lhs: np.ndarray, rhs: np.ndarray, fmt: FloatFormat = FP32) -> np.ndarray:
    """Number of representable steps between patterns; -1 where either side is NaN."""
    dist = np.abs(_ordered(lhs, fmt) - _ordered(rhs, fmt))
    return np.where(_is_nan(lhs, fmt) | _is_nan(rhs, fmt), -1, dist)


@dataclass
class ComparisonReport:
    total: int
    mismatches: int
    samples: list[tuple[int, int, str, str]]
    max_ulp: int | None

    @property
    def identical(self) -> bool:
        return self.mismatches == 0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "mismatches": self.mismatches,
            "samples": [{"row": r, "col": c, "lhs": lh, "rhs": rh} for r, c, lh, rh in self.samples],
            "max_ulp": self.max_ulp,
        }

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def compare(lhs: Matrix, rhs: Matrix, max_samples: int = 20) -> ComparisonReport:
    """Bitwise comparison; NaNs compare by exact pattern and are left out of ``max_ulp``."""
    if lhs.fmt != rhs.fmt:
        raise FormatMismatchError(f"cannot compare {lhs.fmt.name} with {rhs.fmt.name}")
    if lhs.shape != rhs.shape:
        raise ShapeError(f"cannot compare {lhs.rows}x{lhs.cols} with {rhs.rows}x{rhs.cols}")
    diff = lhs.data != rhs.data
    where = np.argwhere(diff)
    digits = lhs.fmt.total_bits // 4
    samples = [(int(r), int(c), f"{int(lhs.data[r, c]):0{digits}x}", f"{int(rhs.data[r, c]):0{digits}x}")
               for r, c in where[:max_samples]]
    max_ulp = None
    if len(where):
        d = ulp_distance(lhs.data[diff], rhs.data[diff], lhs.fmt)
        d = d[d >= 0]
        if d.size:
            max_ulp = int(d.max())
    return ComparisonReport(int(lhs.data.size), int(len(where)), samples, max_ulp)
