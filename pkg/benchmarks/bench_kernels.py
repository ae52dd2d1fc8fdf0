"""Time the numba kernels against their numpy twins, plus one training step.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Each kernel is called once per backend before timing so JIT compilation is
excluded. Outputs of the two backends are checked for agreement.
"""
import argparse
import statistics
import time

import numpy as np

from msme import _kernels as K
from msme.attention import MarkerAvailability
from msme.models import ModelConfig, build_model
from msme.tensor import Tape, backprop
from msme.training import weighted_ce


def _time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(rng):
    x = rng.standard_normal((16, 92, 92)).astype(np.float32)
    w = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    g = rng.standard_normal((16, 90, 90)).astype(np.float32)
    p = rng.standard_normal((16, 44, 44)).astype(np.float32)
    wu = rng.standard_normal((16, 8, 2, 2)).astype(np.float32)
    gu = rng.standard_normal((8, 88, 88)).astype(np.float32)
    logits = rng.standard_normal((2, 52, 52)).astype(np.float32)
    t = (rng.random((52, 52)) < 0.1).astype(np.float32)
    labels = np.stack([1 - t, t])
    W = np.array([0.05, 1.5], dtype=np.float32)
    _, idx = K.maxpool2_forward(x)
    gp = rng.standard_normal((16, 46, 46)).astype(np.float32)
    return {
        "conv2d_forward": lambda: K.conv2d_forward(x, w, b),
        "conv2d_backward": lambda: K.conv2d_backward(x, w, g),
        "maxpool2_forward": lambda: K.maxpool2_forward(x),
        "maxpool2_backward": lambda: K.maxpool2_backward(gp, idx),
        "upconv2_forward": lambda: K.upconv2_forward(p, wu, b[:8]),
        "upconv2_backward": lambda: K.upconv2_backward(p, wu, gu),
        "weighted_ce": lambda: K.weighted_ce(logits, labels, W),
    }


def _train_step():
    model = build_model(ModelConfig.preset("MS-ME", K=3, depth=2, seed=0))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 92, 92)).astype(np.float32)
    t = (rng.random((52, 52)) < 0.1).astype(np.float32)
    y = np.stack([1 - t, t])
    W = np.array([0.05, 1.5], dtype=np.float32)
    v = MarkerAvailability.full(3)

    def step():
        with Tape() as tape:
            loss = weighted_ce(model.forward(x, v), y, W)
        backprop(tape, loss)
    return step


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64).ravel() for o in out]
    return [np.asarray(out, dtype=np.float64).ravel()]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if K.HAS_NUMBA else [])
    results = {}
    outputs = {}
    for be in backends:
        K.set_backend(be)
        cases = _cases(np.random.default_rng(0))
        for name, fn in cases.items():
            results[(be, name)] = _time(fn, args.repeats)
            outputs[(be, name)] = _flat(fn())
        results[(be, "train_step (MS-ME, 92->52)")] = _time(_train_step(), max(3, args.repeats // 4))
    names = list(dict.fromkeys(n for _, n in results))
    print(f"{'kernel':30s} " + " ".join(f"{be + ' ms':>12s}" for be in backends)
          + ("   speedup   max|diff|" if len(backends) == 2 else ""))
    for n in names:
        row = f"{n:30s} " + " ".join(f"{results[(be, n)] * 1e3:12.3f}" for be in backends)
        if len(backends) == 2:
            row += f"   {results[('numpy', n)] / results[('numba', n)]:7.2f}x"
            if ("numpy", n) in outputs:
                diff = max(float(np.max(np.abs(a - b))) if a.size else 0.0
                           for a, b in zip(outputs[("numpy", n)], outputs[("numba", n)]))
                row += f"   {diff:.2e}"
        print(row)


if __name__ == "__main__":
    main()
