"""Compare the compiled kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time per call for each kernel and backend, plus the
speedup of the compiled core.
"""
import argparse
import statistics
import time

import numpy as np

from vgn import _fallback
from vgn.graph import LUT_A, LUT_B, LUT_CLEAN
from vgn.synth import SynthConfig, synth_generate

try:
    from vgn import _kernels
except ImportError:
    _kernels = None


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 64, 32))
    w = rng.standard_normal((3, 3, 32, 32)) * 0.1
    b = np.zeros(32)
    dout = rng.standard_normal((64, 64, 32))
    gt = synth_generate(SynthConfig(extent=128, n_samples=1, widths=(3, 5), seed=1))[0].gt
    mask = np.ascontiguousarray(gt.astype(np.uint8))
    prob = np.clip(gt + 0.1 * rng.random(gt.shape), 0, 1)
    r, c = map(int, np.argwhere(gt)[0])
    return {
        "conv2d_forward 64x64x32->32": lambda k: k.conv2d_forward(x, w, b, 1, 1),
        "conv2d_backward 64x64x32->32": lambda k: k.conv2d_backward(dout, x, w, 1, 1),
        "thin 128x128": lambda k: k.thin(mask, LUT_A, LUT_B, LUT_CLEAN),
        "geodesic r=40 128x128": lambda k: k.geodesic_distance(prob, r, c, 40.0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args()
    backends = {"python": _fallback}
    if _kernels is not None:
        backends["compiled"] = _kernels
    else:
        print("compiled core not built; timing the fallback only")
    print(f"{'kernel':32s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases().items():
        t = {b: timeit(lambda k=k: fn(k), args.repeat) for b, k in backends.items()}
        speed = f"{t['python'] / t['compiled']:8.1f}x" if "compiled" in t else ""
        print(f"{name:32s} " + " ".join(f"{v * 1e3:10.2f}ms" for v in t.values()) + "  " + speed)


if __name__ == "__main__":
    main()
