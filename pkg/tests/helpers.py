"""Small builders shared by the test modules."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from tcemu.cli import main
from tcemu.engine import Matrix, read_matrix, write_matrix
from tcemu.formats import FP32, decode, from_exact
from tcemu.oracle import exact_tile_mma, random_tiles
from tcemu.pipeline import Tile, mma_batch, tile_mma
from tcemu.probes import build_suite, run_suite, simulator_device, write_responses


def pat(x: float, fmt) -> int:
    """Exact bit pattern of a binary float value; fails if ``fmt`` cannot hold it."""
    n, d = float(x).as_integer_ratio()
    k = -(d.bit_length() - 1)
    bits = from_exact(n, k, fmt)
    assert float(decode(bits, fmt)) == x, f"{x!r} is not exact in {fmt.name}"
    return bits


def f32(bits: int) -> float:
    return float(decode(int(bits), FP32))


def cell(products, profile, c: float = 0.0, slots=None, check_oracle: bool = True) -> int:
    """FP32 pattern of D[0,0] for products [(a, b), ...] placed in slots 1, 2, ... (or ``slots``)."""
    fmt = profile.input_format
    a, b, ct = Tile.zeros(fmt), Tile.zeros(fmt), Tile.zeros(FP32)
    slots = slots or range(1, len(products) + 1)
    for s, (x, y) in zip(slots, products):
        a.bits[0, s - 1] = pat(x, fmt)
        b.bits[s - 1, 0] = pat(y, fmt)
    ct.bits[0, 0] = pat(c, FP32)
    d = int(tile_mma(a, b, ct, profile).bits[0, 0])
    if check_oracle:
        ref = int(exact_tile_mma(a.bits, b.bits, ct.bits, profile)[0, 0])
        assert d == ref, f"pipeline {d:08x} != oracle {ref:08x}"
    return d


def p2(e: int) -> tuple[float, float]:
    """A product equal to 2**e, split as 2**ceil(e/2) * 2**floor(e/2)."""
    return math.ldexp(1.0, -(-e // 2)), math.ldexp(1.0, e // 2)


def tiles_equal(x: np.ndarray, y: np.ndarray) -> bool:
    return x.shape == y.shape and bool((np.asarray(x) == np.asarray(y)).all())


def check_hw_dump(dump_dir, arch: str, work_dir) -> None:
    """Run the documented dump workflow through the CLI and assert a perfect match.

    Dump layout: ``responses.jsonl`` (probe responses for the full suite) and
    ``a.hwkt``/``b.hwkt``/``c.hwkt``/``d.hwkt`` (stacked random tiles and the
    device's outputs).
    """
    dump, work = Path(dump_dir), Path(work_dir)
    dtype = read_matrix(dump / "a.hwkt").fmt.name
    assert main(["probe", "infer", "--responses", str(dump / "responses.jsonl"), "--dtype", dtype,
                 "--out", str(work / "profile.json"), "--expect-arch", arch]) == 0
    sim = work / "sim.hwkt"
    assert main(["simulate", "--arch", arch, "--dtype", dtype, "--a", str(dump / "a.hwkt"),
                 "--b", str(dump / "b.hwkt"), "--c", str(dump / "c.hwkt"), "--out", str(sim)]) == 0
    report = work / "report.json"
    assert main(["compare", "--lhs", str(dump / "d.hwkt"), "--rhs", str(sim),
                 "--report", str(report)]) == 0
    assert json.loads(report.read_text())["mismatches"] == 0


def make_dump(dump_dir, profile, n_tiles: int = 64, seed: int = 0) -> None:
    """Write a dump in the hardware layout, answered by the simulator."""
    dump = Path(dump_dir)
    dump.mkdir(parents=True, exist_ok=True)
    fmt = profile.input_format
    write_responses(run_suite(build_suite(fmt), simulator_device(profile)), dump / "responses.jsonl")
    a, b, c = random_tiles(fmt, n_tiles, np.random.default_rng(seed), "uniform")
    d = mma_batch(a, b, c, profile)
    for name, arr, f in (("a", a, fmt), ("b", b, fmt), ("c", c, FP32), ("d", d, FP32)):
        write_matrix(Matrix(f, arr.reshape(-1, 16)), dump / f"{name}.hwkt")
