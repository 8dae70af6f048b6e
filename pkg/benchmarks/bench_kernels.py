"""Compare the compiled and numpy kernel backends on the preprocessing hot path.

    python benchmarks/bench_kernels.py [--repeat 5] [--side 448]

Prints median wall time per call for each backend and checks that both
produce bit-identical output.
"""

from __future__ import annotations

import argparse
import math
import statistics
import time

import numpy as np

from chunkpd import _pykernels

try:
    from chunkpd import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _time(fn, repeat: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--side", type=int, default=448, help="output side of the resize / rotation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    src = rng.random((1000, 750, 3), dtype=np.float32)
    canvas = rng.random((args.side, args.side, 3), dtype=np.float32)
    theta = math.radians(37.0)
    cases = {
        "resize 1000x750 -> side": lambda k: k.bilinear_resize(src, args.side, args.side),
        "rotate 37 deg, side": lambda k: k.rotate_bilinear(canvas, math.cos(theta), math.sin(theta), 1.0),
    }
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled backend not built; timing the numpy fallback only")

    print(f"{'case':<26}" + "".join(f"{b:>12}" for b in backends) + ("     speedup  identical" if len(backends) == 2 else ""))
    for name, case in cases.items():
        times = {b: _time(lambda k=k: case(k), args.repeat) for b, k in backends.items()}
        row = f"{name:<26}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values())
        if len(backends) == 2:
            same = np.array_equal(case(_pykernels), case(_ckernels))
            row += f"{times['python'] / times['cython']:>11.2f}x  {same}"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
