"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import json
import timeit

import numpy as np

from aerotrack import kernels
from aerotrack.detect import RotatedBox


def cases(rng, size):
    frame = rng.uniform(0, 255, size=(size, size * 4 // 3))
    template = rng.uniform(0, 255, size=(12, 20))
    resp = rng.uniform(-1, 1, size=frame.shape)
    a = RotatedBox(0, 0, 20, 12, 0.3).corners
    b = RotatedBox(3, 2, 18, 10, -0.4).corners
    return {
        "ncc_response": lambda k: k.ncc_response(frame, template),
        "local_peaks": lambda k: k.local_peaks(resp, 0.7),
        "convex_intersection_area": lambda k: k.convex_intersection_area(a, b),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=240, help="frame height in pixels")
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--json", action="store_true", help="print one JSON object instead of a table")
    args = p.parse_args(argv)

    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        pass
    rng = np.random.default_rng(0)
    results = {}
    for name, fn in cases(rng, args.size).items():
        row = {}
        for bname, mod in backends.items():
            number = 1 if name == "ncc_response" else 200
            t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            row[bname] = t
        results[name] = row
    if args.json:
        print(json.dumps(results, indent=1))
        return
    print(f"{'kernel':28s} {'python':>12s} {'cython':>12s} {'speedup':>8s}")
    for name, row in results.items():
        py, cy = row["python"], row.get("cython")
        cys = f"{cy * 1e3:10.3f}ms" if cy else f"{'n/a':>12s}"
        sp = f"{py / cy:7.1f}x" if cy else ""
        print(f"{name:28s} {py * 1e3:10.3f}ms {cys} {sp}")


if __name__ == "__main__":
    main()
