"""Time the numba and numpy kernel backends on reference-sized activations.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 25]

Each primitive is timed on the shapes the default network sees for a batch
of 30-channel, 384-sample inputs, followed by one full forward/backward
pass.  Reported numbers are the best of ``--repeat`` runs.
"""

import argparse
import timeit

import numpy as np

from eegics import _kernels
from eegics.model import build_teacher
from eegics.nn import Network


def kernel_cases(rows, rng):
    x1 = rng.standard_normal((rows, 384, 1)).astype(np.float32)
    x2 = rng.standard_normal((rows, 192, 16)).astype(np.float32)
    x3 = rng.standard_normal((rows, 96, 32)).astype(np.float32)
    wd = rng.standard_normal((32, 4)).astype(np.float32)
    bd = np.zeros(32, np.float32)
    col2 = rng.standard_normal((rows * 192, 8 * 16)).astype(np.float32)
    return {
        "im2col k=16 (conv1)": lambda k: k.im2col(x1, 16),
        "im2col k=8 (conv2)": lambda k: k.im2col(x2, 8),
        "col2im k=8 (conv2)": lambda k: k.col2im(col2, 8, x2.shape),
        "depthwise forward": lambda k: k.depthwise_forward(x3, wd, bd),
        "depthwise backward": lambda k: k.depthwise_backward(x3, wd, x3),
        "relu grad": lambda k: k.relu_grad(x2.copy(), x2),
        "avg pool forward": lambda k: k.pool_forward(x2, 2),
        "avg pool backward": lambda k: k.pool_backward(x3, 2),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=25)
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if _kernels.numba_available() else [])
    if len(backends) == 1:
        print("numba not importable; timing the numpy backend only")
    rng = np.random.default_rng(0)
    rows = args.batch * 30
    cases = kernel_cases(rows, rng)

    print(f"{'primitive':28s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, case in cases.items():
        t = [best_of(lambda: case(_kernels.get_kernels(b)), args.repeat) for b in backends]
        ratio = f"{t[0] / t[1]:10.2f}x" if len(t) == 2 else ""
        print(f"{name:28s}" + "".join(f"{v * 1e3:10.2f}ms" for v in t) + ratio)

    spec = build_teacher(30, 384)
    x = rng.standard_normal((args.batch, 30, 384)).astype(np.float32)
    y = np.arange(args.batch) % 2
    t = []
    for b in backends:
        net = Network.init(spec, 0, backend=b)
        t.append(best_of(lambda: net.loss_and_grads(x, y), args.repeat))
    ratio = f"{t[0] / t[1]:10.2f}x" if len(t) == 2 else ""
    print(f"{'train step (fwd+bwd)':28s}" + "".join(f"{v * 1e3:10.2f}ms" for v in t) + ratio)


if __name__ == "__main__":
    main()
