"""Time the numba kernels against their pure-numpy counterparts.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel is run on shapes typical of the tiny and full network profiles.
Outputs of the two backends are compared before timing, and the table shows
the best-of-``repeat`` wall time per call plus the numpy / numba ratio.  The
first numba call (JIT compilation or cache load) is excluded.
"""

from __future__ import annotations

import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from dva import kernels as K  # noqa: E402


def cases(quick: bool):
    rng = np.random.default_rng(0)
    shapes = [(1, 64, 64, 64), (1, 16, 128, 128)] if quick else [(1, 64, 64, 64), (1, 16, 128, 128), (1, 64, 256, 192)]
    for shape in shapes:
        x = rng.standard_normal(shape)
        cols = K.im2col_numpy(x, 3, 3, 1, 1)
        label = "x".join(map(str, shape))
        yield f"im2col 3x3 p1  {label}", (lambda f, x=x: f(x, 3, 3, 1, 1)), "im2col"
        yield f"col2im 3x3 p1  {label}", (lambda f, c=cols, s=shape: f(c, s, 3, 3, 1, 1)), "col2im"
        small = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))
        scols = K.im2col_numpy(small, 4, 4, 1, 2)
        big = (shape[0], shape[1], shape[2] + 2, shape[3] + 2)
        yield f"col2im 4x4 s2  {label}", (lambda f, c=scols, s=big: f(c, s, 4, 4, 2, 1)), "col2im"
        yield f"maxpool2 fwd   {label}", (lambda f, x=x: f(x)), "maxpool2_forward"
        out, idx = K.maxpool2_forward_numpy(x)
        yield f"maxpool2 bwd   {label}", (lambda f, o=out, i=idx, s=shape: f(o, i, s)), "maxpool2_backward"
    blob = rng.bytes(1 << 20 if quick else 1 << 22)
    yield f"fnv1a64 {len(blob) >> 10} KiB", (lambda f, b=blob: f(b)), "fnv1a64"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller shapes, fewer repeats")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    repeat = 2 if args.quick else args.repeat
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for label, call, name in cases(args.quick):
        f_np = getattr(K, f"{name}_numpy")
        f_nb = getattr(K, f"{name}_numba")
        a, b = call(f_nb), call(f_np)  # warm-up / JIT, and agreement check
        if isinstance(a, tuple):
            assert all(np.array_equal(u, v) for u, v in zip(a, b)), label
        elif isinstance(a, int):
            assert a == b, label
        else:
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12), label
        number = 1 if name == "fnv1a64" else 3
        t_np = min(timeit.repeat(lambda: call(f_np), number=number, repeat=repeat)) / number
        t_nb = min(timeit.repeat(lambda: call(f_nb), number=number, repeat=repeat)) / number
        print(f"{label:34s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
