"""Time the numba-jitted kernels against their vectorized numpy fallbacks.

Run as ``python3 benchmarks/bench_kernels.py``.  With ``EPIDEPTH_NO_NUMBA=1``
(or without numba installed) the "numba" column degrades to the plain Python
loop bodies, which is labelled accordingly.
"""

import argparse
import time

import numpy as np

from epidepth import kernels
from epidepth.backend import NUMBA_AVAILABLE


def _best_of(func, args, repeats):
    func(*args)  # warmup; also pays the JIT compile cost up front
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        func(*args)
        best = min(best, time.perf_counter() - start)
    return best


def _cases(rng):
    batch, cin, cout, height, width, k = 1, 32, 32, 48, 64, 3
    xpad = rng.standard_normal((batch, cin, height + 2, width + 2))
    weight = rng.standard_normal((cout, cin, k, k))
    bias = rng.standard_normal(cout)
    grad1 = rng.standard_normal((batch, cout, height, width))
    grad2 = rng.standard_normal((batch, cout, height // 2, width // 2))
    feat = rng.standard_normal((cin, height, width))
    coords = np.stack([rng.uniform(0, width - 1, 4096),
                       rng.uniform(0, height - 1, 4096)], axis=1)
    grad_b = rng.standard_normal((4096, cin))
    return [
        ("conv2d fwd s1", kernels.conv2d_forward_numba,
         kernels.conv2d_forward_numpy, (xpad, weight, bias, 1)),
        ("conv2d fwd s2", kernels.conv2d_forward_numba,
         kernels.conv2d_forward_numpy, (xpad, weight, bias, 2)),
        ("conv2d bwd input", kernels.conv2d_backward_input_numba,
         kernels.conv2d_backward_input_numpy,
         (grad1, weight, 1, height + 2, width + 2)),
        ("conv2d bwd kernel", kernels.conv2d_backward_kernel_numba,
         kernels.conv2d_backward_kernel_numpy, (grad2, xpad, k, k, 2)),
        ("bilinear fwd", kernels.bilinear_forward_numba,
         kernels.bilinear_forward_numpy, (feat, coords)),
        ("bilinear bwd", kernels.bilinear_backward_numba,
         kernels.bilinear_backward_numpy, (grad_b, coords, cin, height, width)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    loop_label = "numba" if NUMBA_AVAILABLE else "python loops"
    print(f"loop backend: {loop_label}; best of {args.repeats} runs\n")
    print(f"{'kernel':<20}{loop_label + ' [ms]':>16}{'numpy [ms]':>14}"
          f"{'numpy/' + loop_label:>16}")
    for name, loop_fn, numpy_fn, call_args in _cases(rng):
        mismatch = not np.allclose(loop_fn(*call_args), numpy_fn(*call_args),
                                   rtol=1e-12, atol=1e-12)
        t_loop = _best_of(loop_fn, call_args, args.repeats)
        t_numpy = _best_of(numpy_fn, call_args, args.repeats)
        note = "  MISMATCH" if mismatch else ""
        print(f"{name:<20}{t_loop * 1e3:>16.3f}{t_numpy * 1e3:>14.3f}"
              f"{t_numpy / t_loop:>16.2f}{note}")


if __name__ == "__main__":
    main()
