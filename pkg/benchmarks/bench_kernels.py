"""Compare the compiled and the numpy convolution kernels.

Times ``im2col`` and ``col2im`` from both backends on U-net sized inputs and
checks that they agree, then times one training step (loss + gradients) of
the desk-scale network with each backend selected through
``SYNTHNETT_PURE_PYTHON`` in a fresh interpreter.

    python benchmarks/bench_kernels.py [--repeat 20] [--json FILE]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from synthnett import _kernels_py

try:
    from synthnett import _kernels as _kernels_cy
except ImportError:  # extension not built
    _kernels_cy = None

# (batch, channels, padded height, padded width, kernel, stride)
CASES = [
    (8, 1, 66, 66, 3, 1),
    (8, 8, 66, 66, 3, 1),
    (8, 16, 34, 34, 3, 1),
    (8, 32, 18, 18, 3, 1),
    (8, 8, 64, 64, 2, 2),
]

STEP_SNIPPET = """
import time, numpy as np
from synthnett import kernels, phantoms, tfunet, training
x = np.stack(phantoms.generate_dataset(8, 64, 0))
p = tfunet.init_params(tfunet.ArchConfig(), 0)
w = training.default_level_weights(3)
training.loss(p.copy(), x, 1e-7, w)
t = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    training.loss(p.copy(), x, 1e-7, w)
    t.append(time.perf_counter() - t0)
print(kernels.BACKEND, min(t))
"""


def best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> list[dict]:
    rows = []
    rng = np.random.default_rng(0)
    for B, C, H, W, k, s in CASES:
        xp = rng.standard_normal((B, C, H, W))
        cols = _kernels_py.im2col(xp, k, s)
        row = {"case": f"B{B} C{C} {H}x{W} k{k} s{s}", "im2col_python": best(lambda: _kernels_py.im2col(xp, k, s), repeat)}
        row["col2im_python"] = best(lambda: _kernels_py.col2im(cols, B, C, H, W, k, s), repeat)
        if _kernels_cy is not None:
            assert np.array_equal(np.asarray(_kernels_cy.im2col(xp, k, s)), cols)
            back = np.asarray(_kernels_cy.col2im(cols, B, C, H, W, k, s))
            assert np.allclose(back, _kernels_py.col2im(cols, B, C, H, W, k, s), rtol=1e-13, atol=1e-13)
            row["im2col_cython"] = best(lambda: _kernels_cy.im2col(xp, k, s), repeat)
            row["col2im_cython"] = best(lambda: _kernels_cy.col2im(cols, B, C, H, W, k, s), repeat)
        rows.append(row)
    return rows


def bench_step(repeat: int) -> dict[str, float]:
    out = {}
    for force in ("1", "0"):
        env = dict(os.environ, SYNTHNETT_PURE_PYTHON=force)
        r = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env, capture_output=True, text=True, check=True
        )
        backend, seconds = r.stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20, help="timing repetitions (best is reported)")
    ap.add_argument("--step-repeat", type=int, default=3, help="repetitions of the training step")
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)

    rows = bench_kernels(args.repeat)
    print(f"{'case':<24}{'op':<8}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for row in rows:
        for op in ("im2col", "col2im"):
            py = row[f"{op}_python"] * 1e3
            cy = row.get(f"{op}_cython")
            if cy is None:
                print(f"{row['case']:<24}{op:<8}{py:>11.3f}{'n/a':>11}{'':>9}")
            else:
                print(f"{row['case']:<24}{op:<8}{py:>11.3f}{cy * 1e3:>11.3f}{py / (cy * 1e3):>8.2f}x")
    step = bench_step(args.step_repeat)
    print()
    for backend, seconds in sorted(step.items()):
        print(f"training step (batch 8, 64x64, desk net) with {backend} kernels: {seconds * 1e3:.1f} ms")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"kernels": rows, "step": step}, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
