"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Reports per-kernel wall time for both backends plus one full counter
forward/backward step, and checks that both backends agree bit for bit.
"""

import argparse
import timeit

import numpy as np

from cacc import _backend, _kernels_py
from cacc.adapt import CounterNet
from cacc.tensor import Tensor


def kernel_cases(rng):
    x = rng.standard_normal((1, 16, 64, 64)).astype(np.float32)
    cols = _kernels_py.im2col(x, 3, 1, 1)
    pooled, arg = _kernels_py.maxpool2_forward(x)
    return {
        "im2col 16x64x64 k3": lambda k: k.im2col(x, 3, 1, 1),
        "col2im 16x64x64 k3": lambda k: k.col2im(cols, x.shape, 3, 1, 1),
        "maxpool2 forward": lambda k: k.maxpool2_forward(x),
        "maxpool2 backward": lambda k: k.maxpool2_backward(pooled, arg),
        "upsample2 forward": lambda k: k.upsample2_forward(x),
        "upsample2 backward": lambda k: k.upsample2_backward(x),
    }


def counter_step(x):
    net = CounterNet(seed=0)

    def step():
        net.zero_grad()
        den, _ = net(Tensor(x))
        den.sum().backward()
        return [p.grad for p in net.parameters()]

    return step


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if "compiled" not in _backend.available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    from cacc import _kernels

    rng = np.random.default_rng(0)
    print(f"{'case':<26}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}  identical")
    for name, fn in kernel_cases(rng).items():
        a, b = fn(_kernels_py), fn(_kernels)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        tc = best_of(lambda: fn(_kernels), args.repeat)
        print(f"{name:<26}{tp * 1e3:>12.3f}{tc * 1e3:>14.3f}{tp / tc:>9.1f}x  {same}")

    x = rng.random((1, 1, 64, 64)).astype(np.float32)
    before = _backend.active()
    times, grads = {}, {}
    try:
        for backend in ("python", "compiled"):
            _backend.use(backend)
            step = counter_step(x)
            grads[backend] = step()
            times[backend] = best_of(step, args.repeat)
    finally:
        _backend.use(before)
    same = all(np.array_equal(u, v) for u, v in zip(grads["python"], grads["compiled"]))
    print(f"{'counter fwd+bwd 64x64':<26}{times['python'] * 1e3:>12.3f}{times['compiled'] * 1e3:>14.3f}"
          f"{times['python'] / times['compiled']:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
