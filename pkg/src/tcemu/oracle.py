"""Independent reference evaluators.

``exact_mma_element`` re-derives the accumulation model from raw bit
patterns using plain Python integers.  It deliberately shares no code with
:mod:`tcemu.pipeline` or :mod:`tcemu.kernels` (it reads only the numeric
parameters of the profile and format), so agreement between the two is
evidence rather than tautology.

``ieee_sequential_dot`` is the naive CPU order: one correctly rounded
multiply and add after another.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .formats import FP32, FloatFormat, NanRule, UnpackedValue, ieee_add, ieee_mul

__all__ = [
    "ExactAccumulator",
    "exact_mma_element",
    "exact_tile_mma",
    "ieee_sequential_dot",
    "random_tiles",
    "random_inputs",
    "random_accumulators",
    "STRATA",
]

_F32_NAN = 0x7FC00000
_F32_POS_INF = 0x7F800000
_F32_NEG_INF = 0xFF800000


@dataclass
class ExactAccumulator:
    """Signed integer at a fixed binary scale: value = magnitude * 2**scale_exponent."""

    magnitude: int = 0
    scale_exponent: int = 0

    def add_floored(self, numerator: int, exponent: int) -> None:
        """Add numerator * 2**exponent after flooring its magnitude onto this grid."""
        shift = exponent - self.scale_exponent
        size = abs(numerator)
        if shift >= 0:
            q = size * (1 << shift)
        else:
            q = size // (1 << -shift)
        self.magnitude += q if numerator > 0 else -q


def _fields(bits: int, exponent_bits: int, mantissa_bits: int, e4m3: bool):
    """(kind, sign, significand, stored exponent); kind in 'num', 'inf', 'nan'."""
    sign = bits >> (exponent_bits + mantissa_bits)
    e = (bits >> mantissa_bits) & ((1 << exponent_bits) - 1)
    f = bits & ((1 << mantissa_bits) - 1)
    bias = (1 << (exponent_bits - 1)) - 1
    top = (1 << exponent_bits) - 1
    if e == top:
        if e4m3:
            if f == (1 << mantissa_bits) - 1:
                return "nan", sign, 0, 0
        else:
            return ("nan" if f else "inf"), sign, 0, 0
    if e == 0:
        return "num", sign, f, 1 - bias
    return "num", sign, f + (1 << mantissa_bits), e - bias


def _input_decoder(fmt: FloatFormat):
    e4m3 = fmt.nan_rule is NanRule.E4M3_ALL_ONES
    eb, mb = fmt.exponent_bits, fmt.mantissa_bits
    table = [_fields(b, eb, mb, e4m3) for b in range(1 << fmt.total_bits)]
    return table


_DECODERS: dict = {}


def _decoder(fmt: FloatFormat):
    if fmt not in _DECODERS:
        _DECODERS[fmt] = _input_decoder(fmt)
    return _DECODERS[fmt]


def _fp32_to_fp32_bits_tz(m: int, g: int) -> int:
    """Encode m * 2**g into FP32, truncating toward zero; overflow -> inf."""
    if m == 0:
        return 0
    sign = 1 if m < 0 else 0
    size = -m if sign else m
    top = g + size.bit_length() - 1
    if top >= 128:
        return _F32_NEG_INF if sign else _F32_POS_INF
    quantum = top - 23 if top >= -126 else -149
    d = g - quantum
    kept = size * (1 << d) if d >= 0 else size // (1 << -d)
    if kept >= 1 << 23:
        field = quantum + 23 + 127
        word = (field << 23) | (kept - (1 << 23))
    else:
        word = kept
    return (sign << 31) | word


def _fp32_term(bits: int):
    kind, sign, sig, exp = _fields(bits, 8, 23, False)
    if kind != "num" or sig == 0:
        return kind, None
    numerator = -sig if sign else sig
    lsb = exp - 23
    align = lsb + sig.bit_length() - 1 if exp > -126 or sig >> 23 else -126
    return kind, (numerator, lsb, align)


def exact_mma_element(c_bits: int, a_row: Sequence[int], b_col: Sequence[int], profile) -> int:
    """FP32 pattern of one output cell, from raw input patterns."""
    fmt = profile.input_format
    dec = _decoder(fmt)
    two_p = 2 * fmt.mantissa_bits
    width = profile.internal_width
    floor = profile.exponent_floor

    terms = []
    for x, y in zip(a_row, b_col):
        ka, sa, ma, ea = dec[int(x)]
        kb, sb, mb, eb = dec[int(y)]
        if ka != "num" or kb != "num":
            raise ValueError("non-finite MMA input")
        mag = ma * mb
        if mag == 0:
            terms.append(None)
            continue
        lsb = ea + eb - two_p
        align = ea + eb
        value_top = lsb + mag.bit_length() - 1  # floor(log2 |product|)
        if profile.normalize_products and value_top > align:
            align = value_top
        if profile.renormalize_subnormal_products and value_top < align:
            align = value_top
        terms.append(((-mag if sa ^ sb else mag), lsb, align))

    ckind, cterm = _fp32_term(int(c_bits))
    if ckind != "num":
        raise ValueError("non-finite accumulator input")

    prev_bits = None
    for group in profile.grouping:
        specials = []
        items = []
        for slot in group:
            if slot == "ACC":
                items.append(cterm)
            elif slot == "PREV":
                kind, term = _fp32_term(prev_bits)
                if kind == "nan":
                    specials.append("nan")
                elif kind == "inf":
                    specials.append(-1 if prev_bits >> 31 else 1)
                else:
                    items.append(term)
            else:
                items.append(terms[int(slot[1:]) - 1])
        if "nan" in specials or (1 in specials and -1 in specials):
            prev_bits = _F32_NAN
            continue
        if specials:
            prev_bits = _F32_POS_INF if specials[0] == 1 else _F32_NEG_INF
            continue
        items = [t for t in items if t is not None]
        if not items:
            prev_bits = 0
            continue
        e_max = max(t[2] for t in items)
        if floor is not None and floor > e_max:
            e_max = floor
        acc = ExactAccumulator(0, e_max - width)
        for numerator, lsb, _ in items:
            acc.add_floored(numerator, lsb)
        prev_bits = _fp32_to_fp32_bits_tz(acc.magnitude, acc.scale_exponent)
    return prev_bits


def exact_tile_mma(a_bits: np.ndarray, b_bits: np.ndarray, c_bits: np.ndarray, profile) -> np.ndarray:
    """Oracle evaluation of a whole 16x16 tile (slow: pure Python)."""
    a = [[int(v) for v in row] for row in np.asarray(a_bits)]
    bt = [[int(v) for v in col] for col in np.asarray(b_bits).T]
    c = np.asarray(c_bits)
    out = np.zeros((16, 16), dtype=np.uint32)
    for i in range(16):
        for j in range(16):
            out[i, j] = exact_mma_element(int(c[i, j]), a[i], bt[j], profile)
    return out


def ieee_sequential_dot(a_row: Sequence[UnpackedValue], b_col: Sequence[UnpackedValue],
                        c: UnpackedValue, accumulation_format: FloatFormat = FP32) -> UnpackedValue:
    """Left-to-right fold c + a0*b0 + a1*b1 + ... with IEEE rounding after every step."""
    acc = c
    for a, b in zip(a_row, b_col):
        acc = ieee_add(acc, ieee_mul(a, b, accumulation_format), accumulation_format)
    return acc


# --------------------------------------------------------------------------
# random tiles
# --------------------------------------------------------------------------

STRATA = ("uniform", "boundary", "narrow", "cancel")


def _finite_patterns(fmt: FloatFormat) -> np.ndarray:
    dec = _decoder(fmt)
    return np.array([b for b, d in enumerate(dec) if d[0] == "num"], dtype=np.int64)


def _compose(rng, sign, field, frac, fmt: FloatFormat) -> np.ndarray:
    bits = (sign << (fmt.total_bits - 1)) | (field << fmt.mantissa_bits) | frac
    if fmt.nan_rule is NanRule.E4M3_ALL_ONES:
        nan = (field == (1 << fmt.exponent_bits) - 1) & (frac == (1 << fmt.mantissa_bits) - 1)
        bits = np.where(nan, bits - 1, bits)
    return bits


def _pick_fields(rng, shape, fmt: FloatFormat, stratum: str, centre: int = 0) -> np.ndarray:
    top = (1 << fmt.exponent_bits) - 1
    max_field = top if fmt.nan_rule is NanRule.E4M3_ALL_ONES else top - 1
    if stratum == "boundary":
        edges = np.array([0, 0, 1, 2, max_field - 1, max_field])
        return edges[rng.integers(0, len(edges), shape)]
    # narrow: a few binades around the centre so products overlap heavily
    mid = fmt.bias + centre
    return np.clip(mid + rng.integers(-3, 4, shape), 0, max_field)


def random_inputs(rng: np.random.Generator, shape, fmt: FloatFormat, stratum: str = "uniform") -> np.ndarray:
    """Random finite input patterns for one stratum (``cancel`` draws like ``narrow``)."""
    if stratum == "uniform":
        pool = _finite_patterns(fmt)
        return pool[rng.integers(0, len(pool), shape)]
    sign = rng.integers(0, 2, shape)
    frac = rng.integers(0, 1 << fmt.mantissa_bits, shape)
    field = _pick_fields(rng, shape, fmt, "boundary" if stratum == "boundary" else "narrow")
    bits = _compose(rng, sign, field, frac, fmt)
    zero = rng.random(shape) < 0.1
    return np.where(zero, 0, bits)


def random_accumulators(rng: np.random.Generator, shape, fmt: FloatFormat,
                        stratum: str = "uniform") -> np.ndarray:
    """Random finite FP32 accumulator patterns scaled to ``fmt`` products."""
    kind = rng.integers(0, 4, shape)
    sign = rng.integers(0, 2, shape).astype(np.int64)
    frac = rng.integers(0, 1 << 23, shape).astype(np.int64)
    if stratum == "boundary":
        edges = np.array([0, 0, 1, 2, 253, 254])
        field = edges[rng.integers(0, len(edges), shape)]
    else:
        # magnitudes in the same range as the products
        lo = 2 * (1 - fmt.bias) + 127
        hi = 2 * fmt.bias + 129
        field = rng.integers(max(lo, 1), min(hi, 254) + 1, shape)
    scaled = (sign << 31) | (field << 23) | frac
    uniform = (sign << 31) | (rng.integers(0, 255, shape) << 23) | frac
    out = np.where(kind == 0, 0, np.where(kind == 1, uniform, scaled))
    return out.astype(np.uint32)


def random_tiles(fmt: FloatFormat, n: int, rng: np.random.Generator, stratum: str = "uniform"):
    """(A, B, C) stacks of ``n`` random finite tiles for the given stratum.

    ``uniform``  -- every finite bit pattern equally likely
    ``boundary`` -- exponents pinned to the subnormal / min-normal / max-finite edges
    ``narrow``   -- exponents within a few binades of 1, heavy overlap between terms
    ``cancel``   -- narrow tiles where the second half of K negates the first,
                    so large partial sums cancel and truncation decides the bits
    """
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}")
    a = random_inputs(rng, (n, 16, 16), fmt, stratum)
    b = random_inputs(rng, (n, 16, 16), fmt, stratum)
    if stratum == "cancel":
        sign_bit = 1 << (fmt.total_bits - 1)
        src = rng.integers(0, 16, (n, 8))
        dst = rng.integers(0, 16, (n, 8))
        for t in range(n):
            for s, d in zip(src[t], dst[t]):
                if s != d:
                    a[t, :, d] = a[t, :, s]
                    b[t, d, :] = b[t, s, :] ^ sign_bit
    c = random_accumulators(rng, (n, 16, 16), fmt, stratum)
    return a.astype(fmt.dtype), b.astype(fmt.dtype), c
