"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_filterbank.py [--seconds 10] [--filters 64] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from seldkit import _fallback
from seldkit import filterbank as fb

try:
    from seldkit import _core
except ImportError:
    _core = None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=10.0, help="waveform length at 24 kHz")
    ap.add_argument("--filters", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, int(args.seconds * 24_000)))
    lows = rng.uniform(0.0, 0.45, args.filters)
    bank = fb.FilterBank([fb.MaxCorrFilter.from_band(a, a + 0.05) for a in lows], 251, 75)
    kernels = bank.kernels()
    num_frames = 600
    steps = rng.random(num_frames - 1)

    impls = {"python": _fallback}
    if _core is not None:
        impls["cython"] = _core
    cases = {
        "correlate_bank": lambda m: m.correlate_bank(x, kernels, 75),
        "interval_max": lambda m: m.interval_max(steps, 60, 60, 10, num_frames),
    }
    print(f"{'kernel':<16}{'backend':<10}{'best [s]':>12}")
    for name, call in cases.items():
        results = {}
        for label, mod in impls.items():
            best = min(timeit.repeat(lambda: call(mod), number=1, repeat=args.repeat))
            results[label] = call(mod)
            print(f"{name:<16}{label:<10}{best:>12.4f}")
        if len(results) == 2:
            diff = np.max(np.abs(results["cython"] - results["python"]))
            print(f"{'':<16}{'max |diff|':<10}{diff:>12.2e}")
    if _core is None:
        print("compiled core not built; only the fallback was timed")


if __name__ == "__main__":
    main()
