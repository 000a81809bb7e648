"""Binary floating-point formats: bit-exact decode/encode and reference IEEE arithmetic.

Values are carried as unbounded Python integers (sign, exponent, integer
significand) so no intermediate rounding ever happens before an explicit
``encode`` call.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "FloatFormat",
    "NanRule",
    "ValueClass",
    "UnpackedValue",
    "FormatCapabilityError",
    "FP32",
    "FP16",
    "BF16",
    "FP8_E4M3",
    "FORMATS",
    "format_by_name",
    "format_by_code",
    "decode",
    "encode",
    "ieee_mul",
    "ieee_add",
    "decode_table",
    "canonical_nan",
]

NEAREST_EVEN = "nearest_even"
TOWARD_ZERO = "toward_zero"


class FormatCapabilityError(ValueError):
    """Raised when a value cannot exist in the requested format (e.g. infinity in E4M3)."""


class NanRule(str, enum.Enum):
    IEEE = "ieee"
    E4M3_ALL_ONES = "e4m3_all_ones"


class ValueClass(str, enum.Enum):
    ZERO = "zero"
    SUBNORMAL = "subnormal"
    NORMAL = "normal"
    INFINITY = "infinity"
    NAN = "nan"


@dataclass(frozen=True)
class FloatFormat:
    name: str
    code: int
    exponent_bits: int
    mantissa_bits: int
    has_infinity: bool = True
    nan_rule: NanRule = NanRule.IEEE

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal (also used by subnormals)."""
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        top = (1 << self.exponent_bits) - 1
        if self.nan_rule is NanRule.IEEE:
            top -= 1
        return top - self.bias

    @property
    def max_significand(self) -> int:
        full = (1 << (self.mantissa_bits + 1)) - 1
        if self.nan_rule is NanRule.E4M3_ALL_ONES:
            full -= 1  # S.1111.111 is NaN
        return full

    @property
    def max_finite(self) -> tuple[int, int]:
        """(significand, power of two) pair of the largest finite magnitude."""
        return self.max_significand, self.max_exponent - self.mantissa_bits

    @property
    def dtype(self) -> type:
        return {8: np.uint8, 16: np.uint16, 32: np.uint32}[self.total_bits]

    def __str__(self) -> str:
        return self.name


FP32 = FloatFormat("fp32", 1, 8, 23)
FP16 = FloatFormat("fp16", 2, 5, 10)
BF16 = FloatFormat("bf16", 3, 8, 7)
FP8_E4M3 = FloatFormat("fp8", 4, 4, 3, has_infinity=False, nan_rule=NanRule.E4M3_ALL_ONES)

FORMATS = {f.name: f for f in (FP32, FP16, BF16, FP8_E4M3)}
_ALIASES = {"fp8_e4m3": "fp8", "e4m3": "fp8", "float16": "fp16", "half": "fp16",
            "bfloat16": "bf16", "float32": "fp32", "single": "fp32"}


def format_by_name(name: str) -> FloatFormat:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    try:
        return FORMATS[key]
    except KeyError:
        raise ValueError(f"unknown float format {name!r}") from None


def format_by_code(code: int) -> FloatFormat:
    for fmt in FORMATS.values():
        if fmt.code == code:
            return fmt
    raise ValueError(f"unknown format code {code}")


@dataclass(frozen=True)
class UnpackedValue:
    """A decoded number: value = (-1)**sign * significand * 2**(exponent - significand_scale)."""

    sign: int
    exponent: int
    significand: int
    significand_scale: int
    cls: ValueClass

    @property
    def is_finite(self) -> bool:
        return self.cls not in (ValueClass.INFINITY, ValueClass.NAN)

    @property
    def is_zero(self) -> bool:
        return self.cls is ValueClass.ZERO

    def exact(self) -> tuple[int, int]:
        """Return (signed integer, power of two) with value = n * 2**k."""
        n = -self.significand if self.sign else self.significand
        return n, self.exponent - self.significand_scale

    def __float__(self) -> float:
        if self.cls is ValueClass.NAN:
            return float("nan")
        if self.cls is ValueClass.INFINITY:
            return float("-inf") if self.sign else float("inf")
        n, k = self.exact()
        # ldexp keeps exactness for anything a double can hold
        return math.ldexp(float(n), k) if n else (-0.0 if self.sign else 0.0)


def _nan(sign: int = 0, payload: int = 0, scale: int = 0) -> UnpackedValue:
    # a NaN keeps its fraction field in ``significand`` so it can round-trip
    return UnpackedValue(sign, 0, payload, scale, ValueClass.NAN)


def _inf(sign: int) -> UnpackedValue:
    return UnpackedValue(sign, 0, 0, 0, ValueClass.INFINITY)


def canonical_nan(fmt: FloatFormat) -> int:
    if fmt.nan_rule is NanRule.E4M3_ALL_ONES:
        return (1 << (fmt.total_bits - 1)) - 1
    quiet = 1 << (fmt.mantissa_bits - 1)
    return (((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits) | quiet


def decode(bits: int, fmt: FloatFormat) -> UnpackedValue:
    if not 0 <= bits < (1 << fmt.total_bits):
        raise ValueError(f"pattern {bits:#x} is not a {fmt.total_bits}-bit {fmt.name} value")
    p = fmt.mantissa_bits
    sign = bits >> (fmt.total_bits - 1)
    field = (bits >> p) & ((1 << fmt.exponent_bits) - 1)
    frac = bits & ((1 << p) - 1)
    all_ones = field == (1 << fmt.exponent_bits) - 1
    if fmt.nan_rule is NanRule.IEEE and all_ones:
        return _nan(sign, frac, p) if frac else _inf(sign)
    if fmt.nan_rule is NanRule.E4M3_ALL_ONES and all_ones and frac == (1 << p) - 1:
        return _nan(sign, frac, p)
    if field == 0:
        if frac == 0:
            return UnpackedValue(sign, fmt.min_exponent, 0, p, ValueClass.ZERO)
        return UnpackedValue(sign, fmt.min_exponent, frac, p, ValueClass.SUBNORMAL)
    return UnpackedValue(sign, field - fmt.bias, frac | (1 << p), p, ValueClass.NORMAL)


def _round_magnitude(mag: int, exp2: int, fmt: FloatFormat, rounding: str) -> tuple[int, int]:
    """Round mag * 2**exp2 (mag > 0) onto the format's grid.

    Returns (significand, quantum exponent) before overflow checks; the
    significand is < 2**(p+1) unless rounding carried into a new binade.
    """
    p = fmt.mantissa_bits
    top = exp2 + mag.bit_length() - 1
    q = max(top, fmt.min_exponent) - p
    if exp2 >= q:
        return mag << (exp2 - q), q
    s = q - exp2
    m = mag >> s
    if rounding == NEAREST_EVEN:
        rem = mag & ((1 << s) - 1)
        half = 1 << (s - 1)
        if rem > half or (rem == half and m & 1):
            m += 1
    elif rounding != TOWARD_ZERO:
        raise ValueError(f"unsupported rounding {rounding!r}")
    if m >> (p + 1):
        m >>= 1
        q += 1
    return m, q


def _pack(sign: int, m: int, q: int, fmt: FloatFormat) -> int:
    p = fmt.mantissa_bits
    if m >> p:
        field = q + p + fmt.bias
        frac = m - (1 << p)
    else:
        field, frac = 0, m
    return (sign << (fmt.total_bits - 1)) | (field << p) | frac


def _max_finite_bits(sign: int, fmt: FloatFormat) -> int:
    m, q = fmt.max_finite
    return _pack(sign, m, q, fmt)


def _inf_bits(sign: int, fmt: FloatFormat) -> int:
    if not fmt.has_infinity:
        raise FormatCapabilityError(f"{fmt.name} has no infinity")
    return (sign << (fmt.total_bits - 1)) | (((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits)


def encode_exact(sign: int, mag: int, exp2: int, fmt: FloatFormat, rounding: str = NEAREST_EVEN,
                 overflow: str = "infinity") -> int:
    """Encode (-1)**sign * mag * 2**exp2 with one rounding step.

    ``overflow`` is ``"infinity"`` or ``"saturate"``; for formats without
    infinity an overflow under ``"infinity"`` produces the format's NaN.
    """
    if mag < 0:
        raise ValueError("magnitude must be non-negative")
    if mag == 0:
        return sign << (fmt.total_bits - 1)
    m, q = _round_magnitude(mag, exp2, fmt, rounding)
    max_m, max_q = fmt.max_finite
    if (m << max(q - max_q, 0)) > (max_m << max(max_q - q, 0)):
        if overflow == "saturate":
            return _max_finite_bits(sign, fmt)
        if overflow != "infinity":
            raise ValueError(f"unknown overflow rule {overflow!r}")
        if not fmt.has_infinity:
            return canonical_nan(fmt) | (sign << (fmt.total_bits - 1))
        return _inf_bits(sign, fmt)
    return _pack(sign, m, q, fmt)


def encode(v: UnpackedValue, fmt: FloatFormat, rounding: str = NEAREST_EVEN,
           overflow: str = "infinity") -> int:
    if v.cls is ValueClass.NAN:
        # payloads survive only between formats with the same fraction width
        if v.significand and v.significand_scale == fmt.mantissa_bits:
            return (v.sign << (fmt.total_bits - 1)) | (((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits) \
                | v.significand
        return canonical_nan(fmt)
    if v.cls is ValueClass.INFINITY:
        return _inf_bits(v.sign, fmt)
    return encode_exact(v.sign, v.significand, v.exponent - v.significand_scale, fmt,
                        rounding, overflow)


def from_exact(n: int, k: int, fmt: FloatFormat, rounding: str = NEAREST_EVEN,
               overflow: str = "infinity") -> int:
    """Bit pattern of n * 2**k (n signed), rounded once."""
    return encode_exact(int(n < 0), abs(n), k, fmt, rounding, overflow)


def ieee_mul(a: UnpackedValue, b: UnpackedValue, fmt: FloatFormat) -> UnpackedValue:
    """Correctly rounded (nearest-even) product in ``fmt``."""
    sign = a.sign ^ b.sign
    if a.cls is ValueClass.NAN or b.cls is ValueClass.NAN:
        return _nan()
    if a.cls is ValueClass.INFINITY or b.cls is ValueClass.INFINITY:
        if a.is_zero or b.is_zero:
            return _nan()
        return decode(encode(_inf(sign), fmt), fmt)
    mag = a.significand * b.significand
    exp2 = (a.exponent - a.significand_scale) + (b.exponent - b.significand_scale)
    return decode(encode_exact(sign, mag, exp2, fmt), fmt)


def ieee_add(a: UnpackedValue, b: UnpackedValue, fmt: FloatFormat) -> UnpackedValue:
    """Correctly rounded (nearest-even) sum in ``fmt``; exact cancellation gives +0."""
    if a.cls is ValueClass.NAN or b.cls is ValueClass.NAN:
        return _nan()
    if a.cls is ValueClass.INFINITY or b.cls is ValueClass.INFINITY:
        if a.cls is b.cls and a.sign != b.sign:
            return _nan()
        inf = a if a.cls is ValueClass.INFINITY else b
        return decode(encode(inf, fmt), fmt)
    if a.is_zero and b.is_zero:
        return decode((a.sign & b.sign) << (fmt.total_bits - 1), fmt)
    na, ka = a.exact()
    nb, kb = b.exact()
    k = min(ka, kb)
    total = (na << (ka - k)) + (nb << (kb - k))
    return decode(from_exact(total, k, fmt), fmt)


@lru_cache(maxsize=None)
def decode_table(fmt: FloatFormat) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Lookup arrays over every pattern of an 8/16-bit format.

    Returns (negative, significand, exponent, special) where exponent is the
    stored unbiased exponent (subnormals and zero use ``1 - bias``) and
    special flags infinity/NaN patterns.
    """
    if fmt.total_bits > 16:
        raise ValueError("decode tables are only built for formats up to 16 bits")
    bits = np.arange(1 << fmt.total_bits, dtype=np.int64)
    p = fmt.mantissa_bits
    neg = (bits >> (fmt.total_bits - 1)).astype(np.bool_)
    field = (bits >> p) & ((1 << fmt.exponent_bits) - 1)
    frac = bits & ((1 << p) - 1)
    all_ones = field == (1 << fmt.exponent_bits) - 1
    if fmt.nan_rule is NanRule.IEEE:
        special = all_ones
    else:
        special = all_ones & (frac == (1 << p) - 1)
    sig = np.where(field == 0, frac, frac | (1 << p))
    exp = np.where(field == 0, fmt.min_exponent, field - fmt.bias)
    sig = np.where(special, 0, sig)
    for arr in (neg, sig, exp, special):
        arr.setflags(write=False)
    return neg, sig.astype(np.int64), exp.astype(np.int64), special
