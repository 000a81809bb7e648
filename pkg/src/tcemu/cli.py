"""Command-line front end.

Exit status: 0 success / match, 1 mismatch or inference failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .engine import (
    FormatMismatchError,
    Matrix,
    ShapeError,
    TileFileError,
    compare,
    matmul,
    read_matrix,
    write_matrix,
)
from .formats import FP32, format_by_name
from .oracle import STRATA, exact_tile_mma, random_accumulators, random_inputs, random_tiles
from .pipeline import (
    ARCHITECTURES,
    SHIPPED_PAIRS,
    PipelineProfile,
    UnsupportedInputError,
    load_profile,
    mma_batch,
    save_profile,
    shipped_profile,
)
from .probes import (
    SUITES,
    InferenceError,
    build_suite,
    infer_profile,
    read_responses,
    run_suite,
    simulator_device,
    write_responses,
    write_suite,
)

DTYPES = ("fp16", "bf16", "fp8")


class UsageError(Exception):
    """Bad arguments or inputs; exit status 2."""


def _profile(args) -> PipelineProfile:
    if getattr(args, "profile", None):
        prof = load_profile(args.profile)
        if args.dtype and prof.input_format != format_by_name(args.dtype):
            raise UsageError(f"profile is for {prof.input_format.name}, not {args.dtype}")
        return prof
    if not args.arch:
        raise UsageError("either --arch or --profile is required")
    try:
        return shipped_profile(args.arch, args.dtype)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read(path: str, fmt, what: str) -> Matrix:
    m = read_matrix(path)
    if m.fmt != fmt:
        raise UsageError(f"{what} file {path} holds {m.fmt.name}, expected {fmt.name}")
    return m


def _tiles(m: Matrix, what: str) -> np.ndarray:
    if m.cols != 16 or m.rows % 16:
        raise UsageError(f"{what} must be a stack of 16x16 tiles, got {m.rows}x{m.cols}")
    return m.data.reshape(-1, 16, 16)


def cmd_simulate(args) -> int:
    prof = _profile(args)
    fmt = prof.input_format
    a = _tiles(_read(args.a, fmt, "A"), "A")
    b = _tiles(_read(args.b, fmt, "B"), "B")
    c = _tiles(_read(args.c, FP32, "C"), "C")
    if not (a.shape == b.shape == c.shape):
        raise UsageError("A, B and C must hold the same number of tiles")
    d = mma_batch(a, b, c, prof)
    write_matrix(Matrix(FP32, d.reshape(-1, 16)), args.out)
    print(f"{prof.name} {fmt.name}: {len(d)} tile(s) -> {args.out}")
    return 0


def cmd_matmul(args) -> int:
    prof = _profile(args)
    fmt = prof.input_format
    a = _read(args.a, fmt, "A")
    b = _read(args.b, fmt, "B")
    c = _read(args.c, FP32, "C") if args.c else Matrix.zeros(FP32, a.rows, b.cols)
    workers = args.workers or os.cpu_count() or 1
    t0 = time.perf_counter()
    d = matmul(a, b, c, prof, workers=workers)
    write_matrix(d, args.out)
    print(f"{prof.name} {fmt.name}: {a.rows}x{a.cols} @ {b.rows}x{b.cols} "
          f"in {time.perf_counter() - t0:.2f}s -> {args.out}")
    return 0


def cmd_random(args) -> int:
    fmt = format_by_name(args.dtype)
    rng = np.random.default_rng(args.seed)
    shape = (args.rows, args.cols)
    if fmt == FP32:
        scale = format_by_name(args.scale_for)
        data = random_accumulators(rng, shape, scale, args.stratum)
    else:
        data = random_inputs(rng, shape, fmt, args.stratum)
    write_matrix(Matrix(fmt, data), args.out)
    return 0


def cmd_compare(args) -> int:
    lhs, rhs = read_matrix(args.lhs), read_matrix(args.rhs)
    try:
        report = compare(lhs, rhs)
    except (FormatMismatchError, ShapeError) as exc:
        raise UsageError(str(exc)) from None
    if args.report:
        report.write(args.report)
    print(f"{report.mismatches} of {report.total} cells differ"
          + (f" (max ulp {report.max_ulp})" if report.max_ulp is not None else ""))
    for r, c, lh, rh in report.samples[:5]:
        print(f"  [{r},{c}] {lh} != {rh}")
    return 0 if report.identical else 1


def cmd_probe_gen(args) -> int:
    fmt = format_by_name(args.dtype)
    suites = SUITES if args.suite == "all" else (args.suite,)
    suite = build_suite(fmt, suites)
    write_suite(suite, args.out)
    print(f"{len(suite)} cases in {suite.n_probes} probe tiles -> {args.out}")
    return 0


def cmd_probe_run(args) -> int:
    prof = _profile(args)
    suite = build_suite(prof.input_format)
    responses = run_suite(suite, simulator_device(prof))
    write_responses(responses, args.out)
    print(f"{len(responses)} responses from {prof.name} {prof.input_format.name} -> {args.out}")
    return 0


def _matching_arch(inferred, fmt) -> list[str]:
    return [arch for arch, f in SHIPPED_PAIRS
            if f == fmt and not inferred.mismatches(shipped_profile(arch, fmt))]


def cmd_probe_infer(args) -> int:
    fmt = format_by_name(args.dtype)
    responses = read_responses(args.responses)
    try:
        inferred = infer_profile(responses, fmt)
    except InferenceError as exc:
        print(f"inference failed: {exc}", file=sys.stderr)
        return 1
    matches = _matching_arch(inferred, fmt)
    prof = inferred.to_profile(matches[0] if matches else "inferred")
    if args.out:
        save_profile(prof, args.out, evidence=inferred.evidence)
    print(f"grouping: {' | '.join(','.join(g) for g in prof.grouping)}")
    print(f"internal width: {prof.internal_width}")
    print(f"exponent floor: {prof.exponent_floor if prof.exponent_floor is not None else 'not observable'}")
    print(f"rounding: alignment {prof.alignment_rounding}, final {prof.final_rounding}")
    print(f"normalize products: {prof.normalize_products}, "
          f"renormalize subnormal products: {prof.renormalize_subnormal_products}")
    print(f"matches shipped profile: {', '.join(matches) if matches else 'none'}")
    if args.expect_arch and args.expect_arch not in matches:
        print(f"expected {args.expect_arch}", file=sys.stderr)
        return 1
    return 0


def cmd_selftest(args) -> int:
    failed = False
    pairs = [(arch, fmt) for arch, fmt in SHIPPED_PAIRS if arch != "lovelace"]
    for n, (arch, fmt) in enumerate(pairs):
        prof = shipped_profile(arch, fmt)
        t0 = time.perf_counter()
        try:
            inferred = infer_profile(run_suite(build_suite(fmt), simulator_device(prof)), fmt)
            drift = inferred.mismatches(prof)
        except InferenceError as exc:
            drift = {"inference": str(exc)}
        rng = np.random.default_rng([args.seed, n])
        bad = 0
        per = -(-args.trials // len(STRATA))
        for stratum in STRATA:
            a, b, c = random_tiles(fmt, per, rng, stratum)
            d = mma_batch(a, b, c, prof)
            for t in range(per):
                bad += int((exact_tile_mma(a[t], b[t], c[t], prof) != d[t]).any())
        ok = not drift and bad == 0
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {arch:8s} {fmt.name:5s} probe round-trip "
              f"{'ok' if not drift else drift}; oracle {per * len(STRATA)} tiles, "
              f"{bad} mismatching; {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcemu", description="Bit-exact Tensor Core MMA simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def profile_flags(p):
        p.add_argument("--arch", choices=sorted(ARCHITECTURES))
        p.add_argument("--dtype", choices=DTYPES, required=True)
        p.add_argument("--profile", help="profile JSON overriding --arch")

    p = sub.add_parser("simulate", help="D = C + A.B over stacks of 16x16 tiles")
    profile_flags(p)
    for flag in ("--a", "--b", "--c", "--out"):
        p.add_argument(flag, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("matmul", help="D = C + A.B for arbitrary shapes")
    profile_flags(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--c", help="FP32 accumulator (default zeros)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="threads (default: all cores)")
    p.set_defaults(func=cmd_matmul)

    p = sub.add_parser("random", help="write a random matrix")
    p.add_argument("--dtype", choices=DTYPES + ("fp32",), required=True)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratum", choices=STRATA, default="uniform")
    p.add_argument("--scale-for", choices=DTYPES, default="fp16",
                   help="for fp32: match magnitudes of products in this format")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_random)

    p = sub.add_parser("compare", help="bitwise comparison of two matrices")
    p.add_argument("--lhs", required=True)
    p.add_argument("--rhs", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare)

    probe = sub.add_parser("probe", help="characterization probe suite")
    psub = probe.add_subparsers(dest="probe_command", required=True)
    p = psub.add_parser("gen", help="write probe tiles and manifest")
    p.add_argument("--dtype", choices=DTYPES, required=True)
    p.add_argument("--suite", choices=("all",) + SUITES, default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_gen)
    p = psub.add_parser("run", help="answer the full suite with the simulator")
    profile_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_run)
    p = psub.add_parser("infer", help="recover a profile from probe responses")
    p.add_argument("--responses", required=True)
    p.add_argument("--dtype", choices=DTYPES, required=True)
    p.add_argument("--out")
    p.add_argument("--expect-arch", choices=sorted(ARCHITECTURES))
    p.set_defaults(func=cmd_probe_infer)

    p = sub.add_parser("selftest", help="probe round-trip and oracle equivalence for shipped profiles")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, OSError, TileFileError, UnsupportedInputError, ShapeError,
            FormatMismatchError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"tcemu: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
