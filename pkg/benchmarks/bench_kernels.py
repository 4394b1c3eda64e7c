"""Compare the compiled and the pure-numpy convolution kernels.

Shapes follow the attack branch for an 88 x 256 first-layer update: the
three conv stages see (88, 256, 1), (44, 128, 16) and (22, 64, 32) inputs.
Each row reports the best of ``--repeat`` timings and checks that both
backends return the same bits.

    python3 benchmarks/bench_kernels.py [--batch 4] [--repeat 5]
"""

import argparse
import time

import numpy as np

from fedleak.nn import _kernels_py, conv, kernels
from fedleak.nn.conv import conv_stack_backward_batch, conv_stack_forward_batch, init_conv_stack
from fedleak.nn.mlp import dropout_mask
from fedleak.rng import derive

STAGES = [((88, 256, 1), 16), ((44, 128, 16), 32), ((22, 64, 32), 64)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def same_bits(a, b):
    if isinstance(a, tuple):
        return all(same_bits(x, y) for x, y in zip(a, b))
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


def kernel_cases(batch, g):
    for (h, w, c), c_out in STAGES:
        x = g.normal(size=(batch, h, w, c))
        z = g.normal(size=(batch, h, w, c_out))
        drop = dropout_mask(g, z.shape, 0.2)
        ph, pw = conv.pool_factors(h, w)
        dcols = g.normal(size=(batch * h * w, 25 * c))
        dout = g.normal(size=(batch, h // ph, w // pw, c_out))
        _, idx = _kernels_py.relu_drop_pool_forward(z, drop, ph, pw)
        tag = f"{h}x{w}x{c}"
        yield f"im2col {tag}", lambda m, x=x: m.im2col(x, 5)
        yield f"col2im {tag}", lambda m, d=dcols, s=x.shape: m.col2im(d, s, 5)
        yield f"relu_drop_pool fwd {tag}", lambda m, z=z, d=drop, p=(ph, pw): m.relu_drop_pool_forward(z, d, *p)
        yield f"relu_drop_pool bwd {tag}", \
            lambda m, o=dout, i=idx, z=z, d=drop, p=(ph, pw): m.relu_drop_pool_backward(o, i, z, d, *p)


def stack_pass(batch, g):
    layers = init_conv_stack(g)
    x = g.normal(size=(batch, 88, 256, 1))

    def run():
        feats, cache = conv_stack_forward_batch(x, layers, 0.2, "train", derive(0, "bench"))
        grads, _ = conv_stack_backward_batch(cache, np.ones_like(feats))
        return tuple([feats] + [a for G in grads for a in (G.W, G.b)])

    return run


def with_backend(module, fn):
    names = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "relu_drop_pool_forward",
             "relu_drop_pool_backward")
    saved = {n: getattr(kernels, n) for n in names}
    try:
        for n in names:
            setattr(kernels, n, getattr(module, n))
        return fn()
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run pip install --no-build-isolation -e .")
    py = _kernels_py
    g = derive(0, "bench-data")
    print(f"{'kernel':<34} {'python ms':>10} {'cython ms':>10} {'speedup':>8}  bits")
    rows = list(kernel_cases(args.batch, g))
    stack = stack_pass(args.batch, g)
    rows.append(("conv stack fwd+bwd 88x256", None))
    for name, fn in rows:
        if fn is None:
            tp, a = best_of(lambda: with_backend(py, stack), args.repeat)
            tc, b = best_of(lambda: with_backend(cy, stack), args.repeat)
        else:
            tp, a = best_of(lambda: fn(py), args.repeat)
            tc, b = best_of(lambda: fn(cy), args.repeat)
        print(f"{name:<34} {tp * 1e3:>10.2f} {tc * 1e3:>10.2f} {tp / tc:>7.2f}x  "
              f"{'same' if same_bits(a, b) else 'DIFFER'}")


if __name__ == "__main__":
    main()
