"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/compare_backends.py [--size 128] [--repeats 5] [--json out.json]

Each kernel runs on identical inputs under both backends; the table reports
the median CPU time and the speed-up of the compiled core.
"""
import argparse
import json
import statistics
import time

import numpy as np

from sonoct import _backend
from sonoct.denoisers.bm3d import reference_positions


def cases(size: int, rng: np.random.Generator):
    img = rng.normal(size=(size, size))
    pr, sr = 3, 10
    padded = np.ascontiguousarray(np.pad(img, pr, mode="reflect"))
    refs = reference_positions(size, size, 8, 3)
    x = rng.normal(size=(16, size, size)).astype(np.float32)
    w = rng.normal(size=(16, 16, 3, 3)).astype(np.float32)
    b = rng.normal(size=16).astype(np.float32)
    k = rng.normal(size=(21, 1))
    col_pad = np.ascontiguousarray(np.pad(img, ((10, 10), (0, 0))))
    return {
        "correlate_valid (21 taps)": lambda m: m.correlate_valid(col_pad, k),
        "tv_chambolle (100 iters)": lambda m: m.tv_chambolle(img, 0.3, 0.25, 100),
        "nlm (7x7 patch, 21x21 window)": lambda m: m.nlm(padded, size, size, pr, sr, 0.8),
        "block_match (8x8, 16 matches)": lambda m: m.block_match(img, refs, 8, 19, 16, 2500.0),
        "conv3x3 (16->16 channels)": lambda m: m.conv3x3(x, w, b, 1),
    }


def median_time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.process_time()
        fn()
        times.append(time.process_time() - t0)
    return statistics.median(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="image side in pixels (default 128)")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the results as JSON")
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels are not built; only the python backend is available")
    rows = []
    for name, fn in cases(args.size, np.random.default_rng(0)).items():
        t = {b: median_time(lambda: fn(_backend.get(b)), args.repeats) for b in backends}
        rows.append({"kernel": name, **{f"{b}_s": v for b, v in t.items()}})
    head = f"{'kernel':<32}" + "".join(f"{b + ' [s]':>14}" for b in backends) + f"{'speed-up':>10}"
    print(f"{args.size}x{args.size} image, median of {args.repeats}")
    print(head)
    for r in rows:
        line = f"{r['kernel']:<32}" + "".join(f"{r[b + '_s']:>14.4f}" for b in backends)
        if "cython_s" in r:
            line += f"{r['python_s'] / r['cython_s']:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"size": args.size, "repeats": args.repeats, "rows": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
