"""Acceptance criteria 1-7.

Each check carries ``@pytest.mark.acceptance(number, title)``; the conftest
prints one PASS/FAIL/SKIP line per criterion at the end of the run.  All
numeric checks are exact bit equality; the only tolerances are the runtime
bounds stated with each criterion.
"""

from __future__ import annotations

import os
import time

import numpy as np
import pytest

from helpers import cell, check_hw_dump, f32, pat
from tcemu.engine import Matrix, matmul
from tcemu.formats import BF16, FP8_E4M3, FP16, FP32, decode, encode, ieee_add
from tcemu.oracle import (
    STRATA,
    exact_tile_mma,
    ieee_sequential_dot,
    random_accumulators,
    random_inputs,
    random_tiles,
)
from tcemu.pipeline import AMPERE, HOPPER, SHIPPED_PAIRS, mma_batch, shipped_profile
from tcemu.probes import (
    FULL_MASK,
    build_suite,
    floor_observable,
    infer_profile,
    run_suite,
    simulator_device,
)

GOLDEN = pytest.mark.acceptance(1, "golden probe outputs")
ORACLE = pytest.mark.acceptance(2, "oracle equivalence on random tiles")
ROUNDTRIP = pytest.mark.acceptance(3, "inference round-trip on shipped profiles")
LATTICE = pytest.mark.acceptance(4, "neutrality lattice")
DETERMINISM = pytest.mark.acceptance(5, "matmul determinism across worker counts")
IEEE = pytest.mark.acceptance(6, "IEEE reference round-trip and non-associativity witness")
HWDUMP = pytest.mark.acceptance(7, "hardware-dump path")

SEED = 20_240_917
ORACLE_PAIRS = [("ampere", FP16), ("ampere", BF16), ("hopper", FP16), ("hopper", BF16),
                ("hopper", FP8_E4M3)]
ORACLE_BUDGET_S = 30 * 60
LATTICE_BUDGET_S = 10 * 60
MATMUL_RUN_BUDGET_S = 60.0

_oracle_seconds: dict[str, float] = {}


def _pair_id(pair):
    return f"{pair[0]}-{pair[1].name}"


def _pair_ids(pairs):
    return [_pair_id(p) for p in pairs]


# --------------------------------------------------------------------------
# 1. golden values
# --------------------------------------------------------------------------

@GOLDEN
@pytest.mark.parametrize("prof", [AMPERE, HOPPER], ids=["ampere", "hopper"])
def test_full_precision_product(prof):
    assert cell([(2047.0, 2047.0)], prof) == pat(4190209.0, FP32)


@GOLDEN
@pytest.mark.parametrize("prof,boundary", [(AMPERE, 24), (HOPPER, 25)], ids=["ampere", "hopper"])
def test_width_boundary(prof, boundary):
    suite = build_suite(FP16, ["width"])
    results = suite.unpack(run_suite(suite, simulator_device(prof)))
    survived = [results[f"width/c{c:02d}"] == pat(2.0 ** -c, FP32) for c in range(1, 41)]
    assert survived.index(False) == boundary
    assert all(survived[:boundary]) and not any(survived[boundary:])


@GOLDEN
def test_alignment_rounding_tuple():
    pair = [(1.0, 1.0), (1.0, -1.0)]
    terms = [(2.0 ** -12, 2.0 ** -13), (2.0 ** -12, -2.0 ** -13),
             (1.5 * 2.0 ** -12, 2.0 ** -12), (1.5 * 2.0 ** -12, 2.0 ** -13)]
    got = tuple(f32(cell(pair + [t], AMPERE)) for t in terms)
    assert got == (0.0, 0.0, 2.0 ** -24, 0.0)


@GOLDEN
@pytest.mark.parametrize("arch,fmt", [p for p in SHIPPED_PAIRS if p[1] != FP8_E4M3],
                         ids=_pair_ids([p for p in SHIPPED_PAIRS if p[1] != FP8_E4M3]))
def test_no_post_multiplication_normalization(arch, fmt):
    prof = shipped_profile(arch, fmt)
    got = cell([(1.5, 1.5), (1.5, -1.5), (2.0 ** -12, 2.0 ** -12)], prof)
    assert got == pat(2.0 ** -24, FP32)


@GOLDEN
@pytest.mark.parametrize("prof", [AMPERE, HOPPER], ids=["ampere", "hopper"])
def test_final_rounding(prof):
    dom = (1.5 * 2.0 ** 12, 1.5 * 2.0 ** 12)
    x = 2.25 * 2.0 ** 24
    assert cell([dom, (3.0, 1.0)], prof) == pat(x, FP32)
    # oracle-derived: the exact sum x - 1 truncates to the FP32 grid point x - 4
    assert cell([dom, (1.0, -1.0)], prof) == pat(x - 4, FP32)


@GOLDEN
def test_out_of_range_accumulation():
    prof = AMPERE.with_format(BF16)
    big = 2.0 ** 127
    assert cell([(big, 2.0), (big, -2.0), (big, 1.0)], prof) == pat(2.0 ** 127, FP32)
    d = cell([(big, 2.0), (big, -big)], prof, slots=[1, 9])
    assert np.isinf(f32(d))


@GOLDEN
def test_minimal_contribution_pair():
    prof = AMPERE.with_format(BF16)
    t = 2.0 ** -74
    assert cell([(t, t), (t, -2.0 ** -82)], prof) == pat(2.0 ** -149, FP32)
    assert cell([(t, t), (t, -2.0 ** -83)], prof) == pat(2.0 ** -148, FP32)


@GOLDEN
@pytest.mark.parametrize("arch,floor", [("ampere", -132), ("hopper", -133)])
def test_exponent_floor_sweep(arch, floor):
    prof = shipped_profile(arch, BF16)
    w = prof.internal_width
    suite = build_suite(BF16, ["range"])
    results = suite.unpack(run_suite(suite, simulator_device(prof)))
    lost = [e for e in range(16, -149, -1) if results[f"range/w{w:02d}/e{e:+04d}"] == pat(2.0 ** e, FP32)]
    assert lost and lost[0] + 1 == floor


# --------------------------------------------------------------------------
# 2. oracle equivalence
# --------------------------------------------------------------------------

@ORACLE
@pytest.mark.parametrize("pair", ORACLE_PAIRS, ids=_pair_ids(ORACLE_PAIRS))
def test_oracle_equivalence(pair, oracle_trials):
    assert oracle_trials >= 10_000, "criterion requires at least 10,000 tiles per pair"
    arch, fmt = pair
    prof = shipped_profile(arch, fmt)
    rng = np.random.default_rng([SEED, ORACLE_PAIRS.index(pair)])
    per = -(-oracle_trials // len(STRATA))
    t0 = time.perf_counter()
    mismatched = []
    checked = 0
    for stratum in STRATA:
        a, b, c = random_tiles(fmt, per, rng, stratum)
        d = mma_batch(a, b, c, prof)
        for t in range(per):
            if not np.array_equal(exact_tile_mma(a[t], b[t], c[t], prof), d[t]):
                mismatched.append((stratum, t))
        checked += per
    _oracle_seconds[_pair_id(pair)] = time.perf_counter() - t0
    print(f"{_pair_id(pair)}: {checked} tiles, {len(mismatched)} mismatching, "
          f"{_oracle_seconds[_pair_id(pair)]:.1f}s")
    assert checked >= oracle_trials
    assert not mismatched, mismatched[:10]


@ORACLE
def test_oracle_total_runtime():
    if len(_oracle_seconds) < len(ORACLE_PAIRS):
        pytest.skip("equivalence runs did not all execute")
    assert sum(_oracle_seconds.values()) <= ORACLE_BUDGET_S


# --------------------------------------------------------------------------
# 3. inference round-trip
# --------------------------------------------------------------------------

@ROUNDTRIP
@pytest.mark.parametrize("arch,fmt", SHIPPED_PAIRS, ids=_pair_ids(SHIPPED_PAIRS))
def test_inference_round_trip(arch, fmt):
    prof = shipped_profile(arch, fmt)
    inferred = infer_profile(run_suite(build_suite(fmt), simulator_device(prof)), fmt)
    assert inferred.grouping == prof.grouping
    assert inferred.internal_width == prof.internal_width
    assert inferred.alignment_rounding == prof.alignment_rounding
    assert inferred.final_rounding == prof.final_rounding
    assert inferred.normalize_products == prof.normalize_products
    assert inferred.renormalize_subnormal_products == prof.renormalize_subnormal_products
    if floor_observable(fmt):
        assert inferred.exponent_floor == prof.exponent_floor
    else:
        # no two products of this format reach below FP32's normal range
        assert inferred.exponent_floor is None
    assert not inferred.mismatches(prof)
    assert all(inferred.evidence.get(f) for f in inferred.FIELDS)


# --------------------------------------------------------------------------
# 4. neutrality lattice
# --------------------------------------------------------------------------

@LATTICE
@pytest.mark.parametrize("prof,expected", [(AMPERE, {0x1FF, FULL_MASK}), (HOPPER, {FULL_MASK})],
                         ids=["ampere", "hopper"])
def test_neutrality_lattice(prof, expected):
    t0 = time.perf_counter()
    suite = build_suite(FP16, ["neutrality"])
    results = suite.unpack(run_suite(suite, simulator_device(prof)))
    neutral = {int(cid.split("/")[1], 16) for cid in results
               if cid.endswith("/cancel") and results[cid] == results[cid[:-6] + "zero"]}
    elapsed = time.perf_counter() - t0
    assert len(results) == 2 * ((1 << 17) - 18)
    assert neutral == expected
    assert elapsed <= LATTICE_BUDGET_S


# --------------------------------------------------------------------------
# 5. determinism
# --------------------------------------------------------------------------

@DETERMINISM
def test_matmul_determinism():
    n = 512
    rng = np.random.default_rng(SEED)
    a = Matrix(FP16, random_inputs(rng, (n, n), FP16, "narrow"))
    b = Matrix(FP16, random_inputs(rng, (n, n), FP16, "narrow"))
    c = Matrix(FP32, random_accumulators(rng, (n, n), FP16, "narrow"))
    reference = None
    slowest = 0.0
    for workers in (1, 4, os.cpu_count() or 1):
        for _ in range(10):
            t0 = time.perf_counter()
            d = matmul(a, b, c, AMPERE, workers=workers).data.tobytes()
            slowest = max(slowest, time.perf_counter() - t0)
            reference = reference or d
            assert d == reference, f"output changed with {workers} workers"
    print(f"slowest 512^3 run: {slowest:.2f}s")
    assert slowest <= MATMUL_RUN_BUDGET_S


# --------------------------------------------------------------------------
# 6. IEEE reference
# --------------------------------------------------------------------------

@IEEE
@pytest.mark.parametrize("fmt", [FP16, BF16], ids=lambda f: f.name)
def test_exhaustive_round_trip(fmt):
    for bits in range(1 << 16):
        assert encode(decode(bits, fmt), fmt) == bits, f"{bits:#06x}"


@IEEE
def test_non_associativity_witness():
    v = lambda x: decode(pat(x, FP16), FP16)
    ones = [v(1.0)] * 3
    zero = v(0.0)
    first = ieee_sequential_dot([v(65504.0), v(-65504.0), v(1.0)], ones, zero, FP16)
    second = ieee_sequential_dot([v(-65504.0), v(1.0), v(65504.0)], ones, zero, FP16)
    assert encode(first, FP16) == pat(1.0, FP16)
    assert encode(second, FP16) == pat(0.0, FP16)
    # the rounding step responsible: -65504 + 1 lands back on -65504
    assert encode(ieee_add(v(-65504.0), v(1.0), FP16), FP16) == pat(-65504.0, FP16)


# --------------------------------------------------------------------------
# 7. hardware dump
# --------------------------------------------------------------------------

@HWDUMP
def test_hardware_dump(request, tmp_path):
    dump = request.config.getoption("--hw-dump")
    arch = request.config.getoption("--hw-arch")
    if not dump:
        pytest.skip("no hardware dump given (--hw-dump DIR --hw-arch ARCH)")
    if not arch:
        pytest.fail("--hw-arch is required with --hw-dump")
    check_hw_dump(dump, arch, tmp_path)
