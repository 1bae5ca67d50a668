"""Compare the compiled kernels with the numpy fallback.

Times each hot kernel on LeNet5-sized tensors, then one full training step
(forward, backward and interval propagation) with each backend swapped in.

    python benchmarks/bench_kernels.py [--batch 64] [--repeat 20]
"""

import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from ctt import _backend, _pykernels
from ctt.core import compute_reg_losses, generate_key
from ctt.interval import bounds_backward, input_box, propagate_bounds
from ctt.model import Model, backward, forward_with_cache, preset
from ctt.tensor import softmax_cross_entropy

try:
    from ctt import _ckernels
except ImportError:
    _ckernels = None

NAMES = ("im2col", "col2im", "maxpool2x2_forward", "maxpool2x2_backward")


@contextmanager
def use(kernels):
    saved = {n: getattr(_backend, n) for n in NAMES}
    for n in NAMES:
        setattr(_backend, n, getattr(kernels, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(_backend, n, f)


def kernel_cases(batch, rng):
    x1 = rng.random((batch, 1, 28, 28), dtype=np.float32)
    x2 = rng.random((batch, 6, 14, 14), dtype=np.float32)
    c1 = _pykernels.im2col(x1, 5, 1, 2)
    c2 = _pykernels.im2col(x2, 5, 1, 0)
    p = rng.random((batch, 6, 28, 28), dtype=np.float32)
    _, idx = _pykernels.maxpool2x2_forward(p)
    g = rng.random((batch, 6, 14, 14), dtype=np.float32)
    return {
        "im2col conv1": lambda k: k.im2col(x1, 5, 1, 2),
        "im2col conv2": lambda k: k.im2col(x2, 5, 1, 0),
        "col2im conv1": lambda k: k.col2im(c1, batch, 1, 28, 28, 5, 1, 2),
        "col2im conv2": lambda k: k.col2im(c2, batch, 6, 14, 14, 5, 1, 0),
        "maxpool fwd": lambda k: k.maxpool2x2_forward(p),
        "maxpool bwd": lambda k: k.maxpool2x2_backward(g, idx),
    }


def train_step(model, key, x, y, eps=3e-3):
    fwd = forward_with_cache(model, x)
    _, g = softmax_cross_entropy(fwd.logits, y)
    backward(model, fwd, g)
    bounds = propagate_bounds(model, input_box(x, eps), keep_cache=True)
    losses = compute_reg_losses(fwd.activations, bounds, key)
    bounds_backward(model, bounds, losses.bound_grads)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("numpy", _pykernels)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"{'kernel':22s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn in kernel_cases(args.batch, rng).items():
        times = [best_of(lambda: fn(k), args.repeat) for _, k in backends]
        speed = f"{times[0] / times[-1]:10.2f}x" if len(times) > 1 else ""
        print(f"{label:22s}" + "".join(f"{t:10.3f}ms" for t in times) + speed)

    spec = preset("lenet5")
    model = Model(spec, seed=0)
    key = generate_key(spec, 0.01, seed=0)
    x = rng.random((args.batch, 1, 28, 28), dtype=np.float32)
    y = rng.integers(0, 10, args.batch)
    times = []
    for _, k in backends:
        with use(k):
            times.append(best_of(lambda: train_step(model, key, x, y), max(3, args.repeat // 4)))
    speed = f"{times[0] / times[-1]:10.2f}x" if len(times) > 1 else ""
    print(f"{'ctt train step':22s}" + "".join(f"{t:10.3f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
