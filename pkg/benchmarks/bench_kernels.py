"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 7]

Times each kernel on shapes typical of desk-scale training, then one full
training step (forward + backward + Adam) under each backend.
"""

import argparse
import timeit

import numpy as np

from talkmotion import kernels
from talkmotion.dataset import SyntheticSpec, generate_synthetic_clips
from talkmotion.trainer import TrainConfig, train_model


def kernel_cases(rng):
    x = rng.normal(size=(8 * 32 * 4, 32))
    g, b = rng.normal(size=32), rng.normal(size=32)
    _, xhat, rstd = kernels.layer_norm_forward(x, g, b, 1e-5)
    src, dst = rng.normal(size=(96, 68, 2)), rng.normal(size=(96, 68, 2))
    wide = rng.normal(size=(8 * 32, 128))
    return {
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, g, b, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(x, xhat, rstd, g),
        "softmax_rows": lambda: kernels.softmax_rows(x),
        "softmax_rows_backward": lambda: kernels.softmax_rows_backward(x, x),
        "gelu_forward": lambda: kernels.gelu_forward(wide),
        "gelu_backward": lambda: kernels.gelu_backward(wide, wide),
        "umeyama2d_batch (96 frames)": lambda: kernels.umeyama2d_batch(src, dst),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--train-steps", type=int, default=20)
    args = ap.parse_args()
    if not kernels.cython_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    results = {}
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        for name, fn in kernel_cases(rng).items():
            results.setdefault(name, {})[backend] = best_of(fn, args.repeat, 50)

    clips = generate_synthetic_clips(SyntheticSpec(clips=16))
    cfg = TrainConfig(kind="lips", steps=args.train_steps)
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        _, report = train_model(clips, cfg)
        results.setdefault("train step (B=8, N=32, H=32)", {})[backend] = report.wall_time / args.train_steps

    print(f"{'kernel':32s} {'python':>11s} {'cython':>11s} {'speedup':>8s}")
    for name, r in results.items():
        print(f"{name:32s} {r['python'] * 1e6:9.1f}us {r['cython'] * 1e6:9.1f}us {r['python'] / r['cython']:7.2f}x")


if __name__ == "__main__":
    main()
