"""Compare the compiled and numpy convolution kernels.

Run ``python benchmarks/bench_kernels.py``. Times im2col/col2im on the layer
shapes the models use, then one embedder training step with each backend.
"""

import argparse
import timeit

import numpy as np

from rfidlab import _kernels
from rfidlab import autodiff as ad
from rfidlab._kernels import _pykernels
from rfidlab.autodiff import Tensor
from rfidlab.models import MiniEmbedder

# (N, C, H, W, k, stride, pad) for the embedder and generator layers
SHAPES = [
    (64, 3, 32, 32, 3, 1, 1),
    (64, 8, 16, 16, 3, 1, 1),
    (64, 16, 8, 8, 3, 1, 1),
    (64, 8, 32, 32, 4, 2, 1),
]


def backends():
    out = {"python": (_pykernels.im2col, _pykernels.col2im)}
    try:
        from rfidlab._kernels import _ckernels
    except ImportError:
        print("compiled core not built; only the numpy fallback is timed")
    else:
        out["cython"] = (_ckernels.im2col, _ckernels.col2im)
    return out


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    impls = backends()
    print(f"{'shape':<28}{'op':<8}" + "".join(f"{b:>12}" for b in impls) + "   speedup")
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.random((n, c, h, w)).astype(np.float32)
        cols = _pykernels.im2col(x, k, k, s, p)
        row = {}
        for name, (i2c, c2i) in impls.items():
            row.setdefault("im2col", {})[name] = best_of(lambda: i2c(x, k, k, s, p), repeat)
            row.setdefault("col2im", {})[name] = best_of(
                lambda: c2i(cols, x.shape, k, k, s, p), repeat)
        for op, t in row.items():
            speed = f"{t['python'] / t['cython']:8.2f}x" if "cython" in t else ""
            print(f"{str((n, c, h, w, k, s)):<28}{op:<8}"
                  + "".join(f"{t[b]:10.2f}ms" for b in impls) + "  " + speed)


def bench_train_step(repeat):
    rng = np.random.default_rng(0)
    x = rng.random((64, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 64)
    model = MiniEmbedder(seed=0)

    def step():
        model.zero_grad()
        ad.backward(ad.cross_entropy(model.forward(Tensor(x))[1], y))

    for name, (i2c, c2i) in backends().items():
        ad.im2col, ad.col2im = i2c, c2i
        print(f"embedder train step, batch 64, {name:<7}: {best_of(step, repeat):8.2f} ms")
    ad.im2col, ad.col2im = _kernels.im2col, _kernels.col2im


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    print(f"default backend: {_kernels.BACKEND}")
    bench_kernels(args.repeat)
    bench_train_step(max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
