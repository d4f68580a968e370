"""Compare the numba and numpy kernel backends.

Times each hot kernel on shapes taken from the desk-scale network and a
full forward/backward step, for both backends, and checks that the two
agree.  Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import time

import numpy as np

from sgcn import _kernels as K
from sgcn import tensor as T
from sgcn.graph import tree_topology
from sgcn.network import Mode, Network
from sgcn.tensor import Tape


def best_of(fn, repeat):
    fn()  # warm up (and compile under numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    B, C, O, Tn, V, k = 16, 16, 16, 64, 8, 9
    xp = rng.normal(size=(B, C, Tn + k - 1, V))
    w = rng.normal(size=(O, C, k))
    g = rng.normal(size=(B, O, Tn, V))
    g2 = rng.normal(size=(B, O, Tn // 2, V))
    x = rng.normal(size=(B, C, Tn, V))
    mean, var = K.channel_moments(x)
    inv = 1 / np.sqrt(var + 1e-5)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return {
        "tconv forward": lambda: K.tconv_forward(xp, w, 1, Tn),
        "tconv forward stride 2": lambda: K.tconv_forward(xp, w, 2, Tn // 2),
        "tconv grad input": lambda: K.tconv_backward_input(g, w, 1, Tn + k - 1),
        "tconv grad input stride 2": lambda: K.tconv_backward_input(g2, w, 2, Tn + k - 1),
        "tconv grad weight": lambda: K.tconv_backward_weight(g, xp, 1, k),
        "bn moments": lambda: K.channel_moments(x),
        "bn backward": lambda: K.bn_backward(g, xhat, inv),
    }


def network_step(width, frames):
    net = Network(tree_topology(8), 3, Mode.MixedSum, seed=0, width=width)
    x = np.random.default_rng(1).normal(size=(16, 3, frames, 8, 2))
    alpha = np.zeros((10, 8))

    def step():
        with Tape() as tape:
            loss = T.cross_entropy(net(x, alpha=alpha, training=True), np.arange(16) % 3)
        tape.backward(loss)
        return loss.item()

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--width", type=float, default=0.125)
    ap.add_argument("--frames", type=int, default=64)
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    results, outputs = {}, {}
    for name in backends:
        prev = K.set_backend(name)
        try:
            cases = kernel_cases(np.random.default_rng(0))
            cases[f"network step (width {args.width}, T={args.frames})"] = network_step(args.width, args.frames)
            for label, fn in cases.items():
                results[(label, name)] = best_of(fn, args.repeat)
                outputs[(label, name)] = fn()
        finally:
            K.set_backend(prev)

    labels = list(dict.fromkeys(label for label, _ in results))
    print(f"{'kernel':42s}" + "".join(f"{b:>12s}" for b in backends) + ("    speedup" if len(backends) == 2 else ""))
    for label in labels:
        row = f"{label:42s}" + "".join(f"{results[(label, b)] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{results[(label, 'numpy')] / results[(label, 'numba')]:10.2f}x"
            a, b = outputs[(label, "numpy")], outputs[(label, "numba")]
            a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
            dev = max(float(np.max(np.abs(np.asarray(p) - np.asarray(q)))) for p, q in zip(a, b))
            row += f"   max |diff| {dev:.1e}"
        print(row)


if __name__ == "__main__":
    main()
