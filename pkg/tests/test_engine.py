from __future__ import annotations

import numpy as np
import pytest

from helpers import pat
from tcemu.engine import (
    FormatMismatchError,
    Matrix,
    ShapeError,
    TileFileError,
    compare,
    matmul,
    read_matrix,
    ulp_distance,
    write_matrix,
)
from tcemu.formats import BF16, FP8_E4M3, FP16, FP32
from tcemu.oracle import random_accumulators, random_inputs
from tcemu.pipeline import AMPERE, HOPPER, Tile, tile_mma


def _random(rng, m, k, n, fmt=FP16, stratum="uniform"):
    a = Matrix(fmt, random_inputs(rng, (m, k), fmt, stratum))
    b = Matrix(fmt, random_inputs(rng, (k, n), fmt, stratum))
    c = Matrix(FP32, random_accumulators(rng, (m, n), fmt, stratum))
    return a, b, c


@pytest.mark.parametrize("fmt", [FP16, BF16, FP8_E4M3, FP32], ids=lambda f: f.name)
def test_tile_file_round_trip(fmt, tmp_path):
    rng = np.random.default_rng(0)
    data = rng.integers(0, 1 << fmt.total_bits, (5, 7), dtype=np.uint64).astype(fmt.dtype)
    m = Matrix(fmt, data)
    blob = m.to_bytes()
    assert len(blob) == 16 + 35 * np.dtype(fmt.dtype).itemsize
    assert blob[:4] == b"HWKT"
    write_matrix(m, tmp_path / "m.hwkt")
    back = read_matrix(tmp_path / "m.hwkt")
    assert back.fmt is fmt and np.array_equal(back.data, data)


def test_tile_file_header_layout():
    blob = Matrix(FP16, np.array([[0x3C00, 0xC000]], dtype=np.uint16)).to_bytes()
    assert blob[4] == 1 and blob[5] == 2
    assert blob[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert blob[16:] == bytes([0x00, 0x3C, 0x00, 0xC0])


def test_tile_file_errors():
    good = Matrix(FP16, np.zeros((16, 32), dtype=np.uint16)).to_bytes()
    with pytest.raises(TileFileError, match="magic"):
        Matrix.from_bytes(b"")
    with pytest.raises(TileFileError, match="magic"):
        Matrix.from_bytes(b"XXXX" + good[4:])
    with pytest.raises(TileFileError, match="header"):
        Matrix.from_bytes(good[:10])
    with pytest.raises(TileFileError, match="truncated"):
        Matrix.from_bytes(good[:16 + 1023])
    with pytest.raises(TileFileError, match="trailing"):
        Matrix.from_bytes(good + b"\0")
    with pytest.raises(TileFileError, match="format code"):
        Matrix.from_bytes(good[:5] + bytes([9]) + good[6:])
    with pytest.raises(TileFileError, match="version"):
        Matrix.from_bytes(good[:4] + bytes([7]) + good[5:])


def test_matrix_validation():
    with pytest.raises(ShapeError):
        Matrix(FP16, np.zeros(16, dtype=np.uint16))
    with pytest.raises(ValueError):
        Matrix(FP8_E4M3, np.array([[0x100]]))


@pytest.mark.parametrize("prof", [AMPERE, HOPPER], ids=["ampere", "hopper"])
def test_single_tile_matmul_is_tile_mma(prof):
    a, b, c = _random(np.random.default_rng(1), 16, 16, 16)
    d = matmul(a, b, c, prof)
    ref = tile_mma(Tile(FP16, a.data), Tile(FP16, b.data), Tile(FP32, c.data), prof)
    assert np.array_equal(d.data, ref.bits)


def test_long_k_chains_tiles_in_order():
    a, b, c = _random(np.random.default_rng(2), 16, 48, 16, stratum="cancel")
    acc = Tile(FP32, c.data)
    for k in range(0, 48, 16):
        acc = tile_mma(Tile(FP16, a.data[:, k:k + 16]), Tile(FP16, b.data[k:k + 16, :]), acc, AMPERE)
    assert np.array_equal(matmul(a, b, c, AMPERE).data, acc.bits)


def test_scalar_product():
    one = lambda x, f=FP16: Matrix(f, np.array([[pat(x, f)]]))
    d = matmul(one(2047.0), one(2047.0), one(0.0, FP32), AMPERE)
    assert d.shape == (1, 1) and int(d.data[0, 0]) == pat(4190209.0, FP32)


def test_zero_padding_is_neutral():
    rng = np.random.default_rng(3)
    a, b, c = _random(rng, 7, 21, 5)
    d = matmul(a, b, c, HOPPER)
    ap = Matrix(FP16, np.pad(a.data, ((0, 0), (0, 11))))
    bp = Matrix(FP16, np.pad(b.data, ((0, 11), (0, 0))))
    assert np.array_equal(matmul(ap, bp, c, HOPPER).data, d.data)
    # each output cell only sees its own row and column
    assert np.array_equal(matmul(Matrix(FP16, a.data[2:3]), b, Matrix(FP32, c.data[2:3]), HOPPER).data,
                          d.data[2:3])


def test_worker_count_and_backend_do_not_change_output():
    a, b, c = _random(np.random.default_rng(4), 64, 64, 48, BF16, "cancel")
    prof = AMPERE.with_format(BF16)
    ref = matmul(a, b, c, prof).data
    for workers in (2, 3, 8):
        assert np.array_equal(matmul(a, b, c, prof, workers=workers).data, ref)
    assert np.array_equal(matmul(a, b, c, prof, backend="numpy").data, ref)


def test_matmul_rejects_bad_operands():
    a, b, c = _random(np.random.default_rng(5), 4, 8, 3)
    with pytest.raises(ShapeError):
        matmul(a, Matrix(FP16, b.data[:7]), c, AMPERE)
    with pytest.raises(ShapeError):
        matmul(a, b, Matrix(FP32, c.data[:3]), AMPERE)
    with pytest.raises(FormatMismatchError):
        matmul(a, b, c, AMPERE.with_format(BF16))
    with pytest.raises(FormatMismatchError):
        matmul(a, b, Matrix(FP16, c.data.astype(np.uint16)), AMPERE)


def test_compare_reports_first_differences(tmp_path):
    rng = np.random.default_rng(6)
    x = Matrix(FP32, rng.integers(0, 0x7F000000, (8, 8), dtype=np.uint32))
    assert compare(x, Matrix(FP32, x.data.copy())).identical
    y = Matrix(FP32, x.data.copy())
    y.data[3, 5] ^= 1
    rep = compare(x, y)
    assert (rep.total, rep.mismatches, rep.max_ulp) == (64, 1, 1)
    assert rep.samples[0][:2] == (3, 5) and len(rep.samples[0][2]) == 8
    rep.write(tmp_path / "r.json")
    assert set(rep.to_dict()) == {"total", "mismatches", "samples", "max_ulp"}
    with pytest.raises(ShapeError):
        compare(x, Matrix(FP32, x.data[:4]))


def test_ulp_distance_crosses_zero_and_skips_nan():
    lhs = np.array([0x00000001, 0x3F800000, 0x7FC00000], dtype=np.uint32)
    rhs = np.array([0x80000001, 0x3F800003, 0x3F800000], dtype=np.uint32)
    assert ulp_distance(lhs, rhs).tolist() == [2, 3, -1]
    nan = Matrix(FP32, np.array([[0x7FC00000]], dtype=np.uint32))
    other = Matrix(FP32, np.array([[0x7FC00001]], dtype=np.uint32))
    rep = compare(nan, other)
    assert rep.mismatches == 1 and rep.max_ulp is None
    assert compare(nan, nan).identical
