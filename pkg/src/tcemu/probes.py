"""Characterization probes: generate targeted tiles, run them on a device, infer a profile.

A *device* is any callable ``device(a, b, c) -> d`` over stacks of 16x16 tiles
(``a``/``b`` in the input format, ``c``/``d`` FP32 patterns, all shaped
(T, 16, 16)).  The simulator, the IEEE reference, and replayed hardware dumps
all fit that shape.

Every case only touches one output cell, so up to 16 cases are packed into a
tile along the diagonal (case ``s`` owns row ``s`` of A, column ``s`` of B and
``C[s, s]``).  A packed tile is a *probe*; responses are recorded per probe.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .formats import BF16, FP8_E4M3, FP16, FP32, FloatFormat, decode, from_exact
from .pipeline import SLOT_NAMES, PipelineProfile, Tile, mma_batch

__all__ = [
    "SUITE_VERSION",
    "SUITES",
    "WIDTH_CANDIDATES",
    "ProbeCase",
    "ProbeResponse",
    "ProbeSuite",
    "InferredProfile",
    "InferenceError",
    "ProbeConstructionError",
    "gen_neutrality_cases",
    "gen_width_cases",
    "gen_rounding_cases",
    "gen_normalization_cases",
    "gen_range_cases",
    "build_suite",
    "run_suite",
    "infer_profile",
    "infer_from_results",
    "simulator_device",
    "ieee_device",
    "floor_observable",
    "write_suite",
    "read_responses",
    "write_responses",
]

SUITE_VERSION = "1"
SUITES = ("neutrality", "width", "rounding", "normalization", "range")
WIDTH_CANDIDATES = tuple(range(16, 33))
MAX_WIDTH_SWEEP = 40
CASES_PER_TILE = 16
FULL_MASK = (1 << 17) - 1

Device = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class ProbeConstructionError(ValueError):
    """A probe constant is not exactly representable in the input format."""


class InferenceError(RuntimeError):
    """Responses contradict every supported pipeline structure."""

    def __init__(self, message: str, probe_ids: Sequence[str] = ()):
        self.probe_ids = list(probe_ids)
        shown = ", ".join(self.probe_ids[:8])
        more = f" (+{len(self.probe_ids) - 8} more)" if len(self.probe_ids) > 8 else ""
        super().__init__(f"{message}: {shown}{more}" if self.probe_ids else message)


@dataclass(frozen=True)
class _Scale:
    """Per-format probe magnitudes (as powers of two)."""

    v_large: int  # neutrality: big terms are ±2**v_large
    v_small: int
    pivot: int  # width/rounding/normalization cancel pair sits at 2**pivot
    dominant: int  # final-rounding dominant factor is 1.5 * 2**dominant


_SCALES = {
    FP16: _Scale(20, -20, 0, 12),
    BF16: _Scale(20, -20, 0, 12),
    # E4M3 tops out at 448 and bottoms out at 2**-9; the neutrality gap has
    # to exceed the internal width, so 2**±16 rather than 2**±6
    FP8_E4M3: _Scale(16, -16, 16, 8),
}


def _scale(fmt: FloatFormat) -> _Scale:
    try:
        return _SCALES[fmt]
    except KeyError:
        raise ValueError(f"no probe constants for {fmt.name}") from None


# --------------------------------------------------------------------------
# cases
# --------------------------------------------------------------------------

@dataclass
class ProbeCase:
    """One targeted dot product: row ``a_row`` of A against column ``b_col`` of B plus C."""

    id: str
    fmt: FloatFormat
    a_row: np.ndarray
    b_col: np.ndarray
    c: int = 0
    target_cell: tuple[int, int] = (0, 0)
    expected_semantics: str = ""
    constants: Mapping[str, object] = field(default_factory=dict)

    def _tile(self, which: str) -> Tile:
        i, j = self.target_cell
        if which == "c":
            t = Tile.zeros(FP32)
            t.bits[i, j] = self.c
            return t
        t = Tile.zeros(self.fmt)
        if which == "a":
            t.bits[i, :] = self.a_row
        else:
            t.bits[:, j] = self.b_col
        return t

    @property
    def a_tile(self) -> Tile:
        return self._tile("a")

    @property
    def b_tile(self) -> Tile:
        return self._tile("b")

    @property
    def c_tile(self) -> Tile:
        return self._tile("c")


@dataclass
class ProbeResponse:
    probe_id: str
    output: np.ndarray  # (16, 16) FP32 patterns

    def to_json(self) -> str:
        tile = np.asarray(self.output, dtype=np.uint32).reshape(256)
        return json.dumps({"probe_id": self.probe_id,
                           "output_tile_hex": "".join(f"{int(x):08x}" for x in tile)})

    @classmethod
    def from_json(cls, line: str) -> "ProbeResponse":
        rec = json.loads(line)
        text = rec["output_tile_hex"]
        if len(text) != 2048:
            raise ValueError(f"probe {rec.get('probe_id')}: expected 256 hex words")
        words = [int(text[i:i + 8], 16) for i in range(0, 2048, 8)]
        return cls(rec["probe_id"], np.array(words, dtype=np.uint32).reshape(16, 16))


def _exact(n: int, k: int, fmt: FloatFormat) -> int:
    """Bit pattern of n * 2**k, which must be exactly representable."""
    bits = from_exact(n, k, fmt)
    v = decode(bits, fmt)
    if not v.is_finite or Fraction(*_as_ratio(v.exact())) != Fraction(*_as_ratio((n, k))):
        raise ProbeConstructionError(f"{n}*2**{k} is not exact in {fmt.name}")
    return bits


def _as_ratio(nk: tuple[int, int]) -> tuple[int, int]:
    n, k = nk
    return (n << k, 1) if k >= 0 else (n, 1 << -k)


def _product(fmt: FloatFormat, x: int, mant: int = 1, neg: bool = False) -> tuple[int, int]:
    """(a, b) patterns with a * b = ±mant * 2**x; a = mant * 2**ceil(x/2), b = ±2**floor(x/2)."""
    hi = -(-x // 2)
    lo = x // 2
    return _exact(mant, hi, fmt), _exact(-1 if neg else 1, lo, fmt)


def _fp32(n: int, k: int) -> int:
    return _exact(n, k, FP32)


def _case(cid: str, fmt: FloatFormat, products: Mapping[int, tuple[int, int]], c: int = 0,
          semantics: str = "", **constants) -> ProbeCase:
    a = np.zeros(16, dtype=fmt.dtype)
    b = np.zeros(16, dtype=fmt.dtype)
    for slot, (x, y) in products.items():
        a[slot - 1] = x
        b[slot - 1] = y
    return ProbeCase(cid, fmt, a, b, c, (0, 0), semantics, constants)


def gen_neutrality_cases(fmt: FloatFormat) -> list[tuple[ProbeCase, ProbeCase]]:
    """Cancellation / zeroed-baseline pairs for every subset S of {ACC, P1..P16}, |S| >= 2.

    Members of S alternate +, -, +, ... in slot order (ACC first); when |S| is
    odd the last member is zeroed so the big terms cancel exactly.
    """
    sc = _scale(fmt)
    half_large = sc.v_large // 2
    half_small = sc.v_small // 2
    big = _exact(1, half_large, fmt)
    big_neg = _exact(-1, half_large, fmt)
    small = _exact(1, half_small, fmt)
    c_large = _fp32(1, sc.v_large)
    c_small = _fp32(1, sc.v_small)
    constants = {"V_large": f"2^{sc.v_large}", "V_small": f"2^{sc.v_small}"}

    masks = np.arange(1 << 17, dtype=np.int64)
    member = ((masks[:, None] >> np.arange(17)) & 1).astype(bool)
    size = member.sum(axis=1)
    keep = size >= 2
    masks, member, size = masks[keep], member[keep], size[keep]
    pos = np.cumsum(member, axis=1) - 1
    zeroed = member & (pos == (size - 1)[:, None]) & (size % 2 == 1)[:, None]
    negative = member & (pos % 2 == 1)
    live = member & ~zeroed

    prod_member = member[:, 1:]
    a_cancel = np.where(prod_member, np.where(live[:, 1:], big, 0), small).astype(fmt.dtype)
    b_cancel = np.where(prod_member,
                        np.where(live[:, 1:], np.where(negative[:, 1:], big_neg, big), 0),
                        small).astype(fmt.dtype)
    a_zero = np.where(prod_member, 0, small).astype(fmt.dtype)
    c_cancel = np.where(member[:, 0], c_large, c_small)
    c_zero = np.where(member[:, 0], 0, c_small)

    pairs = []
    for r, mask in enumerate(masks.tolist()):
        tag = f"neutrality/{mask:05x}"
        pairs.append((
            ProbeCase(f"{tag}/cancel", fmt, a_cancel[r], b_cancel[r], int(c_cancel[r]),
                      (0, 0), "engineered zero sum over S", constants),
            ProbeCase(f"{tag}/zero", fmt, a_zero[r], a_zero[r], int(c_zero[r]),
                      (0, 0), "S zeroed (baseline)", constants),
        ))
    return pairs


def _mask_members(mask: int) -> list[str]:
    return [SLOT_NAMES[i] for i in range(17) if mask >> i & 1]


def gen_width_cases(fmt: FloatFormat) -> list[ProbeCase]:
    """Cancel pair ±2**pivot plus a lone 2**(pivot-c) term, for c = 1, 2, ..."""
    sc = _scale(fmt)
    h = sc.pivot
    a1, b1 = _product(fmt, h)
    _, b2 = _product(fmt, h, neg=True)
    cases = []
    for c in range(1, MAX_WIDTH_SWEEP + 1):
        try:
            small = _product(fmt, h - c)
        except ProbeConstructionError:
            break
        cases.append(_case(f"width/c{c:02d}", fmt, {1: (a1, b1), 2: (a1, b2), 3: small},
                           semantics=f"2^{h - c} survives iff c <= W", c=c))
    return cases


def gen_rounding_cases(fmt: FloatFormat, widths: Iterable[int] = WIDTH_CANDIDATES) -> list[ProbeCase]:
    """Alignment-shift rounding (four cases per candidate W) and final-rounding cases."""
    sc = _scale(fmt)
    h = sc.pivot
    a1, b1 = _product(fmt, h)
    _, b2 = _product(fmt, h, neg=True)
    pair = {1: (a1, b1), 2: (a1, b2)}
    cases = []
    for w in widths:
        u = h - w  # one unit of the internal grid
        try:
            terms = [
                _product(fmt, u - 1),  # half a unit
                _product(fmt, u - 1, neg=True),  # minus half a unit
                _product(fmt, u - 1, mant=3),  # 1.5 units
                _product(fmt, u - 2, mant=3),  # 0.75 units
            ]
        except ProbeConstructionError:
            continue
        for n, term in enumerate(terms, 1):
            cases.append(_case(f"rounding/w{w:02d}/align{n}", fmt, {**pair, 3: term},
                               semantics="alignment shift rounding", W=w))
    d = sc.dominant
    s = 2 * d - 24  # grid of the corrections
    dom = (_exact(3, d - 1, fmt), _exact(3, d - 1, fmt))  # (1.5 * 2**d)**2
    dom_neg = (dom[0], _exact(-3, d - 1, fmt))
    plus3 = (_exact(3, s, fmt), _exact(1, 0, fmt))
    minus3 = (plus3[0], _exact(-1, 0, fmt))
    plus1 = (_exact(1, s, fmt), _exact(1, 0, fmt))
    minus1 = (plus1[0], _exact(-1, 0, fmt))
    finals = [("final1", dom, plus3), ("final2", dom, minus1),
              ("final1neg", dom_neg, minus3), ("final2neg", dom_neg, plus1)]
    for name, big, corr in finals:
        cases.append(_case(f"rounding/{name}", fmt, {1: big, 2: corr},
                           semantics="final conversion rounding", dominant=f"1.5*2^{d}"))
    return cases


def gen_normalization_cases(fmt: FloatFormat, widths: Iterable[int] = WIDTH_CANDIDATES) -> list[ProbeCase]:
    """Post-multiplication normalization (1.5 x 1.5 cancel pair) and the subnormal-product sweep."""
    sc = _scale(fmt)
    h = sc.pivot
    half = h // 2
    a15 = _exact(3, half - 1, fmt)
    pos15, neg15 = _exact(3, h - half - 1, fmt), _exact(-3, h - half - 1, fmt)
    sub_exp = fmt.min_exponent
    cases = []
    for w in widths:
        try:
            tiny = _product(fmt, h - w)
        except ProbeConstructionError:
            continue
        cases.append(_case(f"normalization/w{w:02d}/post", fmt,
                           {1: (a15, pos15), 2: (a15, neg15), 3: tiny},
                           semantics="2^(pivot-W) survives iff products stay unnormalized", W=w))
        for k in range(1, fmt.mantissa_bits + 1):
            sub = (_exact(1, sub_exp - k, fmt), _exact(1, -sub_exp, fmt))
            for tag, drop in (("edge", w), ("below", w + 1)):
                cases.append(_case(f"normalization/w{w:02d}/sub{k:02d}/{tag}", fmt, {1: sub},
                                   c=_fp32(-1, -drop),
                                   semantics="companion -2^-{} survives iff aligned to "
                                             "the product's {}".format(
                                                 drop, "stored exponent" if tag == "edge"
                                                 else "normalized exponent"),
                                   W=w, k=k))
    return cases


def gen_range_cases(fmt: FloatFormat, widths: Iterable[int] = WIDTH_CANDIDATES) -> list[ProbeCase]:
    """Out-of-range accumulation, minimal-contribution pair and the exponent-floor sweep."""
    cases = []
    if fmt == BF16:
        big = _exact(1, 127, fmt)
        two, mtwo, one = _exact(1, 1, fmt), _exact(-1, 1, fmt), _exact(1, 0, fmt)
        cases.append(_case("range/overflow1", fmt, {1: (big, two), 2: (big, mtwo), 3: (big, one)},
                           semantics="intermediate beyond FP32 max, final 2^127"))
        cases.append(_case("range/overflow2", fmt, {1: (big, two), 9: (big, _exact(-1, 127, fmt))},
                           semantics="final magnitude beyond FP32: infinity"))
        t74 = _exact(1, -74, fmt)
        cases.append(_case("range/subnormal156", fmt, {1: (t74, t74), 2: (t74, _exact(-1, -82, fmt))},
                           semantics="2^-156 contribution still visible"))
        cases.append(_case("range/subnormal157", fmt, {1: (t74, t74), 2: (t74, _exact(-1, -83, fmt))},
                           semantics="2^-157 contribution truncated"))
    for w in widths:
        # start above 1 so that narrow formats (E4M3) still reach 2**(e-W)
        for e in range(16, -149, -1):
            try:
                products = {1: _product(fmt, e), 2: _product(fmt, e - w, neg=True)}
            except ProbeConstructionError:
                continue
            cases.append(_case(f"range/w{w:02d}/e{e:+04d}", fmt, products,
                               semantics="-2^(e-W) survives iff e >= exponent floor", W=w, e=e))
    return cases


_GENERATORS = {
    "neutrality": lambda fmt: [c for pair in gen_neutrality_cases(fmt) for c in pair],
    "width": gen_width_cases,
    "rounding": gen_rounding_cases,
    "normalization": gen_normalization_cases,
    "range": gen_range_cases,
}


# --------------------------------------------------------------------------
# suites, packing, devices
# --------------------------------------------------------------------------

@dataclass
class ProbeSuite:
    """All cases of the selected sub-suites, packed 16 per probe tile in generation order."""

    fmt: FloatFormat
    suites: tuple[str, ...]
    ids: list[str]
    a_rows: np.ndarray
    b_cols: np.ndarray
    c: np.ndarray
    probe_ids: list[str]
    probe_suite: list[str]
    starts: list[int]
    counts: list[int]
    version: str = SUITE_VERSION

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_probes(self) -> int:
        return len(self.probe_ids)

    def __post_init__(self):
        self._index = {pid: n for n, pid in enumerate(self.probe_ids)}

    def probe_cases(self, p: int) -> range:
        return range(self.starts[p], self.starts[p] + self.counts[p])

    def tiles(self, start: int = 0, stop: int | None = None):
        """Packed (A, B, C) stacks for probes [start, stop)."""
        stop = self.n_probes if stop is None else stop
        T = stop - start
        a = np.zeros((T, 16, 16), dtype=self.fmt.dtype)
        b = np.zeros((T, 16, 16), dtype=self.fmt.dtype)
        c = np.zeros((T, 16, 16), dtype=np.uint32)
        for t in range(T):
            rows = self.probe_cases(start + t)
            n = len(rows)
            sl = slice(rows.start, rows.stop)
            a[t, :n, :] = self.a_rows[sl]
            b[t, :, :n] = self.b_cols[sl].T
            c[t, np.arange(n), np.arange(n)] = self.c[sl]
        return a, b, c

    def placements(self) -> list[tuple[str, int, tuple[int, int]]]:
        """(probe id, case index, target cell) for every case."""
        out = []
        for p, pid in enumerate(self.probe_ids):
            for s, i in enumerate(self.probe_cases(p)):
                out.append((pid, i, (s, s)))
        return out

    def unpack(self, responses: Iterable[ProbeResponse]) -> dict[str, int]:
        """Case id -> FP32 output pattern; every probe must be answered."""
        got = {}
        for r in responses:
            if r.probe_id not in self._index:
                raise InferenceError("response for unknown probe", [r.probe_id])
            got[r.probe_id] = np.asarray(r.output, dtype=np.uint32)
        missing = [pid for pid in self.probe_ids if pid not in got]
        if missing:
            raise InferenceError("responses do not cover the suite", missing)
        results = {}
        for p, pid in enumerate(self.probe_ids):
            tile = got[pid]
            for s, i in enumerate(self.probe_cases(p)):
                results[self.ids[i]] = int(tile[s, s])
        return results


def build_suite(fmt: FloatFormat, suites: Sequence[str] = SUITES) -> ProbeSuite:
    """Generate and pack the chosen sub-suites.  Deterministic for a given format and version."""
    if isinstance(suites, str):
        suites = SUITES if suites == "all" else (suites,)
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}")
    suites = tuple(s for s in SUITES if s in suites)
    ids, a_rows, b_cols, cs = [], [], [], []
    probe_ids, probe_suite, starts, counts = [], [], [], []
    for name in suites:
        cases = _GENERATORS[name](fmt)
        base = len(ids)
        for case in cases:
            ids.append(case.id)
            a_rows.append(case.a_row)
            b_cols.append(case.b_col)
            cs.append(case.c)
        for t in range(0, len(cases), CASES_PER_TILE):
            probe_ids.append(f"{name}/{t // CASES_PER_TILE:06d}")
            probe_suite.append(name)
            starts.append(base + t)
            counts.append(min(CASES_PER_TILE, len(cases) - t))
    suite = ProbeSuite(fmt, suites, ids,
                       np.array(a_rows, dtype=fmt.dtype).reshape(-1, 16),
                       np.array(b_cols, dtype=fmt.dtype).reshape(-1, 16),
                       np.array(cs, dtype=np.uint32), probe_ids, probe_suite, starts, counts)
    return suite


def run_suite(suite: ProbeSuite, device: Device, tiles_per_call: int = 16) -> list[ProbeResponse]:
    """Run every probe tile on ``device``, ``tiles_per_call`` tiles (256 cases) per invocation."""
    out = []
    for start in range(0, suite.n_probes, tiles_per_call):
        stop = min(start + tiles_per_call, suite.n_probes)
        a, b, c = suite.tiles(start, stop)
        d = np.asarray(device(a, b, c), dtype=np.uint32)
        if d.shape != a.shape:
            raise ValueError(f"device returned shape {d.shape}, expected {a.shape}")
        out.extend(ProbeResponse(suite.probe_ids[start + t], d[t]) for t in range(stop - start))
    return out


def simulator_device(profile: PipelineProfile, backend: str | None = None) -> Device:
    def device(a, b, c):
        return mma_batch(a, b, c, profile, backend=backend)

    return device


def ieee_device(fmt: FloatFormat) -> Device:
    """Sequential FP32 device: C, then + A[i,k]*B[k,j] for k = 0..15, rounding to nearest every step.

    Products of FP16/BF16/E4M3 inputs round once in FP32 exactly as an IEEE
    multiply does, so numpy float32 arithmetic is a faithful stand-in for
    :func:`tcemu.oracle.ieee_sequential_dot`.
    """
    from .formats import decode_table

    neg, sig, exp, _ = decode_table(fmt)
    values = np.ldexp(np.where(neg, -sig, sig).astype(np.float64), exp - fmt.mantissa_bits)

    def device(a, b, c):
        av = values[a].astype(np.float32)
        bv = values[b].astype(np.float32)
        acc = np.asarray(c, dtype=np.uint32).view(np.float32).copy()
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for k in range(16):
                acc = acc + av[:, :, k, None] * bv[:, None, k, :]
        return acc.view(np.uint32)

    return device


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

@dataclass
class InferredProfile:
    input_format: FloatFormat
    grouping: tuple[tuple[str, ...], ...]
    internal_width: int
    exponent_floor: int | None
    alignment_rounding: str
    final_rounding: str
    normalize_products: bool
    renormalize_subnormal_products: bool
    evidence: dict[str, list[str]]

    FIELDS = ("grouping", "internal_width", "exponent_floor", "alignment_rounding",
              "final_rounding", "normalize_products", "renormalize_subnormal_products")

    def to_profile(self, name: str = "inferred") -> PipelineProfile:
        return PipelineProfile(
            name=name,
            input_format=self.input_format,
            grouping=self.grouping,
            internal_width=self.internal_width,
            exponent_floor=self.exponent_floor,
            alignment_rounding=self.alignment_rounding,
            final_rounding=self.final_rounding,
            normalize_products=self.normalize_products,
            renormalize_subnormal_products=self.renormalize_subnormal_products,
        )

    def mismatches(self, profile: PipelineProfile) -> dict[str, tuple]:
        """Fields that differ from ``profile``.

        An unobserved exponent floor (``None``) matches any floor that the
        format's products cannot reach.
        """
        out = {}
        for name in self.FIELDS:
            mine, theirs = getattr(self, name), getattr(profile, name)
            if name == "exponent_floor" and mine is None and not floor_observable(self.input_format):
                continue
            if mine != theirs:
                out[name] = (mine, theirs)
        return out


def floor_observable(fmt: FloatFormat) -> bool:
    """Whether two products can both sit below FP32's normal range (BF16 only)."""
    return 2 * (fmt.min_exponent - fmt.mantissa_bits) < -160


def _value(bits: int) -> Fraction | None:
    v = decode(bits, FP32)
    if not v.is_finite:
        return None
    n, k = v.exact()
    return Fraction(n) * Fraction(2) ** k


def _pow2_bits(e: int) -> int:
    return _fp32(1, e)


def _infer_grouping(results, fmt, evidence):
    neutral = []
    for mask in range(1 << 17):
        if bin(mask).count("1") < 2:
            continue
        tag = f"neutrality/{mask:05x}"
        if results[f"{tag}/cancel"] == results[f"{tag}/zero"]:
            neutral.append(mask)
    if FULL_MASK not in neutral:
        raise InferenceError("the full operand set is not neutral",
                             [f"neutrality/{FULL_MASK:05x}/cancel"])
    chain = sorted(neutral, key=lambda m: bin(m).count("1"))
    for x, y in zip(chain, chain[1:]):
        if x & ~y:
            raise InferenceError("neutral subsets are not nested",
                                 [f"neutrality/{x:05x}/cancel", f"neutrality/{y:05x}/cancel"])
    groups, prev = [], 0
    for m in chain:
        members = _mask_members(m & ~prev)
        groups.append(tuple((["PREV"] if prev else []) + members))
        prev = m
    evidence["grouping"] = [f"neutrality/{m:05x}/cancel" for m in chain]
    return tuple(groups)


def _infer_width(results, fmt, evidence):
    h = _scale(fmt).pivot
    ids = sorted(k for k in results if k.startswith("width/"))
    survived = [results[i] == _pow2_bits(h - int(i[7:])) for i in ids]
    if not survived or not survived[0]:
        raise InferenceError("the first width probe already loses the small term", ids[:1])
    if all(survived):
        raise InferenceError("no width boundary found", ids[-1:])
    w = survived.index(False)
    late = [i for i, s in zip(ids[w:], survived[w:]) if s]
    if late:
        raise InferenceError("small terms survive past the width boundary", late)
    evidence["internal_width"] = [ids[w - 1], ids[w]]
    return w


_ALIGN_VERDICTS = {
    (0, 0, 1, 0): "toward_zero",
    (0, -1, 1, 0): "toward_negative",
    (1, 0, 2, 1): "toward_positive",
    (0, 0, 2, 1): "nearest_even",
    (1, -1, 2, 1): "nearest_away",
}
_FINAL_VERDICTS = {
    (0, -4, 0, 4): "toward_zero",
    (0, -4, -4, 0): "toward_negative",
    (4, 0, 0, 4): "toward_positive",
    (4, 0, -4, 0): "nearest_even",
}


def _infer_rounding(results, fmt, w, evidence):
    h = _scale(fmt).pivot
    unit = Fraction(2) ** (h - w)
    ids = [f"rounding/w{w:02d}/align{n}" for n in range(1, 5)]
    vals = [_value(results[i]) for i in ids]
    obs = tuple(v / unit if v is not None else None for v in vals)
    align = _ALIGN_VERDICTS.get(obs)
    if align is None:
        raise InferenceError(f"alignment responses {obs} match no rounding mode", ids)
    d = _scale(fmt).dominant
    s = Fraction(2) ** (2 * d - 24)
    x = Fraction(9, 4) * Fraction(2) ** (2 * d) / s
    fids = ["rounding/final1", "rounding/final2", "rounding/final1neg", "rounding/final2neg"]
    vals = [_value(results[i]) for i in fids]
    if any(v is None for v in vals):
        raise InferenceError("non-finite final-rounding response", fids)
    v = [val / s for val in vals]
    offsets = (v[0] - x, v[1] - x, v[2] + x, v[3] + x)
    final = _FINAL_VERDICTS.get(offsets)
    if final is None:
        raise InferenceError(f"final-rounding offsets {offsets} match no rounding mode", fids)
    evidence["alignment_rounding"] = ids
    evidence["final_rounding"] = fids
    return align, final


def _infer_normalization(results, fmt, w, evidence):
    h = _scale(fmt).pivot
    pid = f"normalization/w{w:02d}/post"
    out = results[pid]
    if out == _pow2_bits(h - w):
        normalize = False
    elif _value(out) == 0:
        normalize = True
    else:
        raise InferenceError("post-multiplication probe neither kept nor dropped the term", [pid])
    evidence["normalize_products"] = [pid]

    verdicts, sub_ids = set(), []
    for k in range(1, fmt.mantissa_bits + 1):
        plain = _pow2_bits(-k)
        edge = f"normalization/w{w:02d}/sub{k:02d}/edge"
        below = f"normalization/w{w:02d}/sub{k:02d}/below"
        if results[edge] == plain:
            raise InferenceError("companion at the width edge was lost", [edge])
        verdicts.add(results[below] != plain)
        sub_ids += [edge, below]
    if len(verdicts) != 1:
        raise InferenceError("subnormal products renormalize only sometimes", sub_ids)
    evidence["renormalize_subnormal_products"] = sub_ids
    return normalize, verdicts.pop()


def _infer_floor(results, fmt, w, evidence):
    prefix = f"range/w{w:02d}/e"
    ids = sorted((k for k in results if k.startswith(prefix)), key=lambda k: -int(k[len(prefix):]))
    if not ids:
        raise InferenceError(f"no exponent-floor probes were generated for W={w}")
    for pid in ids:
        e = int(pid[len(prefix):])
        if results[pid] == _pow2_bits(e):
            evidence["exponent_floor"] = [pid]
            return e + 1
    evidence["exponent_floor"] = ids[-1:]
    return None


def infer_from_results(results: Mapping[str, int], fmt: FloatFormat) -> InferredProfile:
    """Recover a profile from case id -> FP32 pattern.  Any contradiction is fatal."""
    evidence: dict[str, list[str]] = {}
    grouping = _infer_grouping(results, fmt, evidence)
    w = _infer_width(results, fmt, evidence)
    if not any(k.startswith(f"rounding/w{w:02d}/") for k in results):
        raise InferenceError(f"no W-dependent probes were generated for W={w}",
                             evidence["internal_width"])
    align, final = _infer_rounding(results, fmt, w, evidence)
    normalize, renormalize = _infer_normalization(results, fmt, w, evidence)
    floor = _infer_floor(results, fmt, w, evidence)
    return InferredProfile(fmt, grouping, w, floor, align, final, normalize, renormalize, evidence)


def infer_profile(responses: Iterable[ProbeResponse], fmt: FloatFormat) -> InferredProfile:
    """Infer from per-probe responses to the complete suite for ``fmt``."""
    suite = build_suite(fmt, SUITES)
    return infer_from_results(suite.unpack(responses), fmt)


# --------------------------------------------------------------------------
# on-disk layout
# --------------------------------------------------------------------------

def write_suite(suite: ProbeSuite, out_dir: str | os.PathLike) -> None:
    """One directory per sub-suite holding stacked A/B/C tile files, plus manifest.json."""
    from .engine import Matrix, write_matrix

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probes = []
    for name in suite.suites:
        idx = [p for p, s in enumerate(suite.probe_suite) if s == name]
        if not idx:
            continue
        a, b, c = suite.tiles(idx[0], idx[-1] + 1)
        sub = out / name
        sub.mkdir(exist_ok=True)
        for tag, arr, fmt in (("a", a, suite.fmt), ("b", b, suite.fmt), ("c", c, FP32)):
            write_matrix(Matrix(fmt, arr.reshape(-1, 16)), sub / f"{tag}.hwkt")
        for t, p in enumerate(idx):
            probes.append({
                "probe_id": suite.probe_ids[p],
                "file": name,
                "tile": t,
                "cases": [{"case_id": suite.ids[i], "target_cell": [s, s]}
                          for s, i in enumerate(suite.probe_cases(p))],
            })
    manifest = {"suite_version": suite.version, "format": suite.fmt.name,
                "suites": list(suite.suites), "probes": probes}
    (out / "manifest.json").write_text(json.dumps(manifest) + "\n")


def read_responses(path: str | os.PathLike) -> list[ProbeResponse]:
    with open(path) as fh:
        return [ProbeResponse.from_json(line) for line in fh if line.strip()]


def write_responses(responses: Iterable[ProbeResponse], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for r in responses:
            fh.write(r.to_json() + "\n")
