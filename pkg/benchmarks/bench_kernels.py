"""Compare the numba and pure-numpy fold kernels on the same inputs.

    python3 benchmarks/bench_kernels.py --tiles 2000 --size 256

Both backends must produce identical bits; the script checks that before
reporting timings.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tcemu import kernels
from tcemu.engine import Matrix, matmul
from tcemu.formats import FP16, FP32
from tcemu.oracle import random_accumulators, random_inputs, random_tiles
from tcemu.pipeline import mma_batch, shipped_profile


def _best(fn, repeat: int) -> tuple[float, np.ndarray]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tiles", type=int, default=2000, help="independent 16x16 MMAs")
    ap.add_argument("--size", type=int, default=256, help="square matmul size")
    ap.add_argument("--arch", default="ampere")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    prof = shipped_profile(args.arch, FP16)
    rng = np.random.default_rng(0)
    a, b, c = random_tiles(FP16, args.tiles, rng, "narrow")
    n = args.size
    ma = Matrix(FP16, random_inputs(rng, (n, n), FP16, "narrow"))
    mb = Matrix(FP16, random_inputs(rng, (n, n), FP16, "narrow"))
    mc = Matrix(FP32, random_accumulators(rng, (n, n), FP16, "narrow"))

    # compile outside the timed region
    mma_batch(a[:1], b[:1], c[:1], prof, backend="numba")

    rows = []
    results = {}
    for backend in ("numba", "numpy"):
        t_tiles, d = _best(lambda: mma_batch(a, b, c, prof, backend=backend), args.repeat)
        t_mm, m = _best(lambda: matmul(ma, mb, mc, prof, backend=backend).data, args.repeat)
        results[backend] = (d, m)
        rows.append((backend, t_tiles, t_mm))

    same = all(np.array_equal(x, y) for x, y in zip(results["numba"], results["numpy"]))
    print(f"profile {prof.name} fp16, {args.tiles} tiles, {n}^3 matmul, best of {args.repeat}")
    print(f"{'backend':8s} {'tiles/s':>12s} {'matmul s':>10s}")
    for backend, t_tiles, t_mm in rows:
        print(f"{backend:8s} {args.tiles / t_tiles:12.0f} {t_mm:10.3f}")
    print(f"speedup (tiles): {rows[1][1] / rows[0][1]:.1f}x; outputs identical: {same}")
    print(f"default backend here: {kernels.get_backend()}")
    if not same:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
