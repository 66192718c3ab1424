"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times the hot kernels (strided 3D convolution forward/backward and the two
resampling gathers) at the shapes the default desk-scale configuration
actually runs, and prints one aligned table.  Usage::

    python benchmarks/bench_kernels.py [--repeats N]

The compiled column is omitted when the extension is unavailable
(e.g. under ``TASKVOL_BACKEND=python``).
"""

import argparse
import time

import numpy as np

from taskvol import kernels
from taskvol.kernels import reference


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _conv_cases(rng):
    """Encoder stage shapes for the default configuration: three stride-2
    halvings of a (64, 40, 32) input with widening channels."""
    cases = []
    shape = (64, 40, 32)
    channels = [1, 16, 32, 64]
    for stage in range(3):
        c_in, c_out = channels[stage], channels[stage + 1]
        x = rng.normal(0.0, 1.0, (c_in, *shape)).astype(np.float32)
        w = rng.normal(0.0, 0.1, (c_out, c_in, 3, 3, 3)).astype(np.float32)
        b = np.zeros(c_out, dtype=np.float32)
        out_shape = tuple((n + 2 - 3) // 2 + 1 for n in shape)
        dy = rng.normal(0.0, 1.0, (c_out, *out_shape)).astype(np.float32)
        cases.append((f"conv fwd s{stage} {c_in}->{c_out}",
                      lambda impl, x=x, w=w, b=b: kernels.conv3d_forward(
                          x, w, b, stride=2, pad=1, impl=impl)))
        cases.append((f"conv bwd-in s{stage}",
                      lambda impl, dy=dy, w=w, xs=x.shape:
                      kernels.conv3d_backward_input(dy, w, 2, 1, xs,
                                                    impl=impl)))
        cases.append((f"conv bwd-w s{stage}",
                      lambda impl, x=x, dy=dy:
                      kernels.conv3d_backward_weights(x, dy, 2, 1, 3,
                                                      impl=impl)))
        shape = out_shape
    return cases


def _gather_cases(rng):
    src = rng.normal(0.0, 200.0, (96, 96, 64)).astype(np.float32)
    grid = np.meshgrid(np.linspace(-2, 95, 104), np.linspace(3, 92, 84),
                       np.linspace(-1, 64, 64), indexing="ij")
    xs, ys, zs = (g.astype(np.float64) for g in grid)
    return [
        ("trilinear gather 104x84x64",
         lambda impl: kernels.trilinear_gather(src, xs, ys, zs, -1000.0,
                                               impl=impl)),
        ("nearest gather 104x84x64",
         lambda impl: kernels.nearest_gather(src, xs, ys, zs, 0.0,
                                             impl=impl)),
    ]


def main():
    parser = argparse.ArgumentParser(
        description="compare compiled and numpy kernel backends")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case (median is reported)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = _conv_cases(rng) + _gather_cases(rng)
    compiled = kernels.compiled_module()

    rows = []
    for name, fn in cases:
        fn(reference)  # warm up caches before timing either backend
        py_ms = _median_time(lambda: fn(reference), args.repeats) * 1e3
        if compiled is not None:
            fn(compiled)
            cy_ms = _median_time(lambda: fn(compiled), args.repeats) * 1e3
            rows.append((name, f"{py_ms:9.2f}", f"{cy_ms:9.2f}",
                         f"{py_ms / cy_ms:6.2f}x"))
        else:
            rows.append((name, f"{py_ms:9.2f}", "-", "-"))

    header = ("kernel", "numpy ms", "compiled ms", "speedup")
    widths = [max(len(header[i]), *(len(r[i]) for r in rows))
              for i in range(4)]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    print(line)
    print("  ".join("-" * w for w in widths))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    if compiled is None:
        print("\ncompiled extension unavailable; numpy fallback only "
              "(set TASKVOL_BACKEND=cython to require it)")


if __name__ == "__main__":
    main()
