"""Tensor Core MMA model: raw products, truncating grouped accumulation, profiles.

The scalar functions here (:func:`multiply_raw`, :func:`group_sum`,
:func:`mma_element`) are the readable reference path.  :func:`tile_mma` and
:func:`fold_bits` run the same arithmetic through :mod:`tcemu.kernels`.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import kernels
from .formats import (
    BF16,
    FP8_E4M3,
    FP16,
    FP32,
    TOWARD_ZERO,
    FloatFormat,
    UnpackedValue,
    ValueClass,
    decode,
    decode_table,
    encode_exact,
    format_by_name,
)

__all__ = [
    "PipelineProfile",
    "RawProduct",
    "Tile",
    "UnsupportedInputError",
    "AMPERE",
    "LOVELACE",
    "HOPPER",
    "ARCHITECTURES",
    "SHIPPED_PAIRS",
    "shipped_profile",
    "multiply_raw",
    "group_sum",
    "mma_element",
    "tile_mma",
    "mma_batch",
    "fold_bits",
    "profile_to_dict",
    "profile_from_dict",
    "load_profile",
    "save_profile",
]

SLOT_NAMES = ("ACC",) + tuple(f"P{k}" for k in range(1, 17))
ROUNDING_MODES = ("toward_zero",)


class UnsupportedInputError(ValueError):
    """Infinity or NaN reached an MMA input; the model does not define it."""


def _slot_code(name: str) -> int:
    if name == "ACC":
        return kernels.ACC_SLOT
    if name == "PREV":
        return kernels.PREV_SLOT
    if name.startswith("P") and name[1:].isdigit() and 1 <= int(name[1:]) <= 16:
        return int(name[1:])
    raise ValueError(f"unknown operand slot {name!r}")


@dataclass(frozen=True)
class PipelineProfile:
    """Accumulation semantics of one architecture for one input format."""

    name: str
    input_format: FloatFormat
    grouping: tuple[tuple[str, ...], ...]
    internal_width: int
    exponent_floor: int | None
    accumulator_format: FloatFormat = FP32
    alignment_rounding: str = TOWARD_ZERO
    final_rounding: str = TOWARD_ZERO
    normalize_products: bool = False
    renormalize_subnormal_products: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grouping", tuple(tuple(g) for g in self.grouping))
        if self.accumulator_format != FP32:
            raise ValueError("only FP32 accumulation is modelled")
        if self.input_format.total_bits > 16:
            raise ValueError("input format must be an 8- or 16-bit format")
        if not 1 <= self.internal_width <= kernels.MAX_WIDTH:
            raise ValueError(f"internal width must lie in [1, {kernels.MAX_WIDTH}]")
        for attr in ("alignment_rounding", "final_rounding"):
            if getattr(self, attr) not in ROUNDING_MODES:
                raise ValueError(f"{attr}={getattr(self, attr)!r} is not modelled")
        seen: list[str] = []
        for g, group in enumerate(self.grouping):
            if not group:
                raise ValueError("empty group")
            has_prev = "PREV" in group
            if g == 0 and has_prev:
                raise ValueError("PREV cannot appear in the first group")
            if g > 0 and group.count("PREV") != 1:
                raise ValueError(f"group {g} must contain PREV exactly once")
            for slot in group:
                _slot_code(slot)
                if slot != "PREV":
                    seen.append(slot)
        if sorted(seen, key=_slot_code) != list(SLOT_NAMES):
            raise ValueError("each of ACC, P1..P16 must appear in exactly one group")

    @property
    def slot_groups(self) -> list[list[int]]:
        return [[_slot_code(s) for s in group] for group in self.grouping]

    def with_format(self, fmt: FloatFormat | str) -> "PipelineProfile":
        if isinstance(fmt, str):
            fmt = format_by_name(fmt)
        return replace(self, input_format=fmt)

    def semantic_fields(self) -> dict:
        """Everything except the display name."""
        d = profile_to_dict(self)
        d.pop("name")
        return d


def _chain(*groups: Sequence[str]) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(g) for g in groups)


_P = [f"P{k}" for k in range(1, 17)]

AMPERE = PipelineProfile(
    name="ampere",
    input_format=FP16,
    grouping=_chain(["ACC", *_P[:8]], ["PREV", *_P[8:]]),
    internal_width=24,
    exponent_floor=-132,
)
LOVELACE = replace(AMPERE, name="lovelace")
HOPPER = PipelineProfile(
    name="hopper",
    input_format=FP16,
    grouping=_chain(["ACC", *_P]),
    internal_width=25,
    exponent_floor=-133,
)
ARCHITECTURES = {p.name: p for p in (AMPERE, LOVELACE, HOPPER)}


SHIPPED_PAIRS = (("ampere", FP16), ("ampere", BF16), ("lovelace", FP16), ("lovelace", BF16),
                 ("hopper", FP16), ("hopper", BF16), ("hopper", FP8_E4M3))


def shipped_profile(arch: str, dtype: FloatFormat | str = FP16) -> PipelineProfile:
    """The characterized profile for an architecture and input format.

    FP8 MMA only exists on Hopper; other pairings need an explicit profile.
    """
    try:
        base = ARCHITECTURES[arch.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}") from None
    fmt = format_by_name(dtype) if isinstance(dtype, str) else dtype
    if (base.name, fmt) not in SHIPPED_PAIRS:
        raise ValueError(f"no shipped profile for {fmt.name} on {base.name}")
    return base.with_format(fmt)


# --------------------------------------------------------------------------
# profile documents
# --------------------------------------------------------------------------

_PROFILE_KEYS = ("name", "input_format", "accumulator_format", "grouping", "internal_width",
                 "exponent_floor", "alignment_rounding", "final_rounding",
                 "normalize_products", "renormalize_subnormal_products")


def profile_to_dict(profile: PipelineProfile) -> dict:
    return {
        "name": profile.name,
        "input_format": profile.input_format.name,
        "accumulator_format": profile.accumulator_format.name,
        "grouping": [list(g) for g in profile.grouping],
        "internal_width": profile.internal_width,
        "exponent_floor": profile.exponent_floor,
        "alignment_rounding": profile.alignment_rounding,
        "final_rounding": profile.final_rounding,
        "normalize_products": profile.normalize_products,
        "renormalize_subnormal_products": profile.renormalize_subnormal_products,
    }


def profile_from_dict(doc: dict, extra: Iterable[str] = ()) -> PipelineProfile:
    """Build a profile; keys outside the profile fields (and ``extra``) are rejected."""
    unknown = set(doc) - set(_PROFILE_KEYS) - set(extra)
    if unknown:
        raise ValueError(f"unknown profile fields: {sorted(unknown)}")
    missing = set(_PROFILE_KEYS) - set(doc)
    if missing:
        raise ValueError(f"missing profile fields: {sorted(missing)}")
    floor = doc["exponent_floor"]
    return PipelineProfile(
        name=str(doc["name"]),
        input_format=format_by_name(doc["input_format"]),
        accumulator_format=format_by_name(doc["accumulator_format"]),
        grouping=doc["grouping"],
        internal_width=int(doc["internal_width"]),
        exponent_floor=None if floor is None else int(floor),
        alignment_rounding=doc["alignment_rounding"],
        final_rounding=doc["final_rounding"],
        normalize_products=bool(doc["normalize_products"]),
        renormalize_subnormal_products=bool(doc["renormalize_subnormal_products"]),
    )


def save_profile(profile: PipelineProfile, path: str | os.PathLike, **extra) -> None:
    doc = profile_to_dict(profile)
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_profile(path: str | os.PathLike) -> PipelineProfile:
    return profile_from_dict(json.loads(Path(path).read_text()), extra=("evidence",))


# --------------------------------------------------------------------------
# scalar reference path
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RawProduct:
    """Exact, unnormalised product; value = ±significand * 2**(exponent_key - significand_scale)."""

    sign: int
    exponent_key: int
    significand: int
    significand_scale: int

    @property
    def is_zero(self) -> bool:
        return self.significand == 0


def multiply_raw(a: UnpackedValue, b: UnpackedValue) -> RawProduct:
    """Exact product keyed by the sum of the operands' stored exponents."""
    for v in (a, b):
        if not v.is_finite:
            raise UnsupportedInputError(f"{v.cls.value} operand to an MMA product")
    return RawProduct(
        sign=a.sign ^ b.sign,
        exponent_key=a.exponent + b.exponent,
        significand=a.significand * b.significand,
        significand_scale=a.significand_scale + b.significand_scale,
    )


Operand = Union[RawProduct, UnpackedValue]


def _alignment_exponent(op: Operand, profile: PipelineProfile) -> int:
    if isinstance(op, UnpackedValue):
        return op.exponent
    key = op.exponent_key
    if profile.normalize_products and op.significand >> (op.significand_scale + 1):
        key += 1
    if profile.renormalize_subnormal_products and op.significand < (1 << op.significand_scale):
        key = op.exponent_key - op.significand_scale + op.significand.bit_length() - 1
    return key


def _fp32(bits: int) -> UnpackedValue:
    return decode(bits, FP32)


def group_sum(operands: Sequence[Operand], profile: PipelineProfile) -> UnpackedValue:
    """Sum one group: align on the largest exponent, truncate to W bits, round toward zero.

    FP32 operands (accumulator or a previous group's result) may be infinite;
    infinities propagate and opposite infinities give NaN.
    """
    if len(operands) > 17:
        raise ValueError("a group holds at most 17 operands")
    live: list[Operand] = []
    infinities = set()
    for op in operands:
        if isinstance(op, UnpackedValue):
            if op.cls is ValueClass.NAN:
                return _fp32(0x7FC00000)
            if op.cls is ValueClass.INFINITY:
                infinities.add(op.sign)
                continue
            if op.is_zero:
                continue
        elif op.is_zero:
            continue
        live.append(op)
    if infinities:
        if len(infinities) == 2:
            return _fp32(0x7FC00000)
        return _fp32(0xFF800000 if infinities.pop() else 0x7F800000)
    if not live:
        return _fp32(0)

    e_max = max(_alignment_exponent(op, profile) for op in live)
    if profile.exponent_floor is not None:
        e_max = max(e_max, profile.exponent_floor)
    unit = e_max - profile.internal_width

    acc = 0
    for op in live:
        lsb = op.exponent - op.significand_scale if isinstance(op, UnpackedValue) \
            else op.exponent_key - op.significand_scale
        if lsb >= unit:
            mag = op.significand << (lsb - unit)
        else:
            mag = op.significand >> (unit - lsb)
        acc += -mag if op.sign else mag
    if acc == 0:
        return _fp32(0)
    bits = encode_exact(int(acc < 0), abs(acc), unit, FP32, profile.final_rounding, "infinity")
    return _fp32(bits)


def mma_element(c: UnpackedValue, a_row: Sequence[UnpackedValue], b_col: Sequence[UnpackedValue],
                profile: PipelineProfile) -> UnpackedValue:
    """One output cell: products, then the profile's groups in order."""
    if len(a_row) != 16 or len(b_col) != 16:
        raise ValueError("a_row and b_col must hold 16 values")
    if not c.is_finite:
        raise UnsupportedInputError("non-finite accumulator input")
    products = [multiply_raw(a, b) for a, b in zip(a_row, b_col)]
    prev = None
    for group in profile.grouping:
        ops: list[Operand] = []
        for slot in group:
            if slot == "ACC":
                ops.append(c)
            elif slot == "PREV":
                ops.append(prev)
            else:
                ops.append(products[int(slot[1:]) - 1])
        prev = group_sum(ops, profile)
    return prev


# --------------------------------------------------------------------------
# tiles and the kernel path
# --------------------------------------------------------------------------

@dataclass
class Tile:
    """16x16 grid of raw bit patterns in one format."""

    fmt: FloatFormat
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=self.fmt.dtype)
        if self.bits.shape != (16, 16):
            raise ValueError(f"tile must be 16x16, got {self.bits.shape}")

    @classmethod
    def zeros(cls, fmt: FloatFormat) -> "Tile":
        return cls(fmt, np.zeros((16, 16), dtype=fmt.dtype))

    def values(self) -> list[list[UnpackedValue]]:
        return [[decode(int(x), self.fmt) for x in row] for row in self.bits]


def _check_finite(bits: np.ndarray, fmt: FloatFormat, what: str) -> None:
    if fmt == FP32:
        special = ((bits.astype(np.uint32) >> 23) & 0xFF) == 0xFF
    else:
        special = decode_table(fmt)[3][bits]
    if special.any():
        idx = tuple(int(i) for i in np.argwhere(special)[0])
        raise UnsupportedInputError(f"{what} holds infinity/NaN at {idx}")


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n else 1
    step, extra = divmod(n, parts)
    out, start = [], 0
    for p in range(parts):
        stop = start + step + (p < extra)
        out.append((start, stop))
        start = stop
    return out


def fold_bits(a_bits: np.ndarray, b_bits: np.ndarray, c_bits: np.ndarray, profile: PipelineProfile,
              workers: int = 1, backend: str | None = None, check: bool = True) -> np.ndarray:
    """Batched fold: (T, M, K) x (T, K, N) + (T, M, N) -> (T, M, N) FP32 patterns.

    K must be a multiple of 16; each 16-wide K-step is one MMA folded, in
    ascending order, into the running accumulator.  Work is split across
    ``workers`` threads by tile (or by row when there is a single tile);
    every output cell is computed independently, so the result does not
    depend on the split.
    """
    fmt = profile.input_format
    a_bits = np.ascontiguousarray(a_bits, dtype=fmt.dtype)
    b_bits = np.asarray(b_bits, dtype=fmt.dtype)
    c_bits = np.ascontiguousarray(c_bits, dtype=np.uint32)
    T, M, K = a_bits.shape
    if b_bits.shape[:2] != (T, K) or c_bits.shape != (T, M, b_bits.shape[2]):
        raise ValueError(f"shape mismatch: A{a_bits.shape} B{b_bits.shape} C{c_bits.shape}")
    if K % 16:
        raise ValueError("K must be a multiple of 16")
    if check:
        _check_finite(a_bits, fmt, "A")
        _check_finite(b_bits, fmt, "B")
        _check_finite(c_bits, FP32, "C")
    bt_bits = np.ascontiguousarray(np.swapaxes(b_bits, 1, 2))
    out = np.zeros(c_bits.shape, dtype=np.uint32)
    neg, sig, exp, _ = decode_table(fmt)
    args = dict(tables=(neg, sig, exp), groups=profile.slot_groups,
                frac2=2 * fmt.mantissa_bits, width=profile.internal_width,
                floor=profile.exponent_floor, normalize=profile.normalize_products,
                renormalize=profile.renormalize_subnormal_products, backend=backend)
    if T > 1:
        jobs = [((t0, t1), (0, M)) for t0, t1 in _chunks(T, workers)]
    else:
        jobs = [((0, T), (r0, r1)) for r0, r1 in _chunks(M, workers)]
    if len(jobs) == 1:
        kernels.fold(a_bits, bt_bits, c_bits, out, *jobs[0], **args)
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            futures = [pool.submit(kernels.fold, a_bits, bt_bits, c_bits, out, tr, rr, **args)
                       for tr, rr in jobs]
            for f in futures:
                f.result()
    return out


def mma_batch(a_bits: np.ndarray, b_bits: np.ndarray, c_bits: np.ndarray, profile: PipelineProfile,
              backend: str | None = None) -> np.ndarray:
    """D = C + A.B for a stack of 16x16 tiles, shape (T, 16, 16)."""
    a_bits = np.asarray(a_bits)
    if a_bits.shape[1:] != (16, 16):
        raise ValueError("tiles must be 16x16")
    return fold_bits(a_bits, b_bits, c_bits, profile, backend=backend)


def tile_mma(a: Tile, b: Tile, c: Tile, profile: PipelineProfile,
             backend: str | None = None) -> Tile:
    if a.fmt != profile.input_format or b.fmt != profile.input_format:
        raise ValueError(f"A/B must be {profile.input_format.name} tiles")
    if c.fmt != FP32:
        raise ValueError("C must be an fp32 tile")
    d = mma_batch(a.bits[None], b.bits[None], c.bits[None], profile, backend=backend)
    return Tile(FP32, d[0])


def supported_formats() -> tuple[FloatFormat, ...]:
    return (FP16, BF16, FP8_E4M3)
