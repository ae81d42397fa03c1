"""Throughput comparison of the numba kernels against the numpy fallback.

Run directly::

    python benchmarks/bench_kernels.py

The active path is controlled by ``HYPERCAL_DISABLE_NUMBA``; this script
re-executes itself once per path and prints a side-by-side table.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, *args, repeats=5):
    fn(*args)  # warm-up (numba compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmarks():
    from hypercal import kernels

    rng = np.random.default_rng(0)
    results = {"numba": kernels.USING_NUMBA}

    image = rng.normal(100.0, 10.0, (2048, 2048))
    coords = np.tile(np.arange(2048.0), (2048, 1)) \
        + rng.uniform(-2.0, 2.0, (2048, 2048))
    results["resample_rows_2048sq_s"] = _time(
        kernels.resample_rows, image, coords)

    yy = rng.uniform(0, 2047, (1024, 1024))
    xx = rng.uniform(0, 2047, (1024, 1024))
    results["bicubic_1024sq_s"] = _time(kernels.bicubic_sample, image, yy, xx)

    spectra = rng.uniform(10.0, 100.0, (4, 2251))
    centers = np.tile(np.linspace(450.0, 2450.0, 256)[:, None], (1, 256))
    sigmas = np.full(256, 4.0)
    results["band_integrals_256x256_s"] = _time(
        kernels.band_integrals, spectra, 350.0, 1.0, centers, sigmas)

    return results


def main():
    if os.environ.get("HYPERCAL_BENCH_CHILD"):
        print(json.dumps(run_benchmarks()))
        return

    rows = {}
    for flag in ("0", "1"):
        env = dict(os.environ, HYPERCAL_DISABLE_NUMBA=flag,
                   HYPERCAL_BENCH_CHILD="1")
        proc = subprocess.run([sys.executable, __file__], env=env,
                              capture_output=True, text=True, check=True)
        data = json.loads(proc.stdout.strip().splitlines()[-1])
        rows["numba" if data.pop("numba") else "numpy"] = data

    names = sorted(rows["numba"])
    width = max(len(n) for n in names)
    print(f"{'kernel':<{width}}  {'numba (s)':>12}  {'numpy (s)':>12}  "
          f"{'speedup':>8}")
    for name in names:
        nb = rows["numba"][name]
        npv = rows["numpy"][name]
        print(f"{name:<{width}}  {nb:>12.4f}  {npv:>12.4f}  "
              f"{npv / nb:>7.1f}x")


if __name__ == "__main__":
    main()
