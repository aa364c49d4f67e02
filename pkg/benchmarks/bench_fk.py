"""Compare the numba and numpy forward-kinematics backends.

Usage: python benchmarks/bench_fk.py [n_frames] [repeats]
"""

import sys
import time

import numpy as np

from gaitcal import kernels
from gaitcal.kinematics import fk_batch
from gaitcal.synth import build_biped


def bench(backend: str, q: np.ndarray, chain, repeats: int) -> float:
    got = kernels.set_backend(backend)
    if got != backend:
        return float("nan")
    delta = np.zeros((chain.n_sites, 3))
    fk_batch(chain, q[:4], delta)  # warm up (jit compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fk_batch(chain, q, delta)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
    repeats = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    chain = build_biped()
    rng = np.random.default_rng(0)
    q = 0.3 * rng.standard_normal((n, chain.dof))

    results = {}
    for backend in ("numpy", "numba"):
        dt = bench(backend, q, chain, repeats)
        results[backend] = dt
        rate = n / dt if dt == dt and dt > 0 else float("nan")
        print(f"{backend:6s} {dt * 1e3:9.2f} ms for {n} frames  ({rate:,.0f} fps)")
    if results["numba"] == results["numba"]:  # not NaN, so numba is available
        print(f"speedup {results['numpy'] / results['numba']:.1f}x")


if __name__ == "__main__":
    main()
