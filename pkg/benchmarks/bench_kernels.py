"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times each kernel on shapes typical of the 16x16 parser, then one full
conv2d forward+backward and one FEN fingerprint-loss step per backend.
"""
import argparse
import json
import timeit

import numpy as np

from gmparse import kernels
from gmparse import tensor as T
from gmparse.fingerprint import FenConfig, FingerprintNet, fingerprint_loss


def cases(rng):
    x = rng.standard_normal((32, 16, 16, 16)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 1)
    pooled, idx = kernels.maxpool2d(x, 2)
    g = rng.standard_normal(pooled.shape).astype(np.float32)
    sig = (rng.standard_normal((32, 16, 16)) + 1j * rng.standard_normal((32, 16, 16))).astype(np.complex128)
    w = T.Tensor(rng.standard_normal((16, 16, 3, 3)).astype(np.float32), requires_grad=True)
    xt = T.Tensor(x, requires_grad=True)
    fen = FingerprintNet(FenConfig(blocks=2, features=16), seed=0)
    img = rng.standard_normal((32, 1, 16, 16)).astype(np.float32)

    def conv_step():
        T.backward(T.tsum(T.conv2d(xt, w, None, 1, 1)), [xt, w])

    def fen_step():
        T.backward(fingerprint_loss(fen(T.Tensor(img))), fen.parameters())

    return {
        "im2col": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool2d": lambda: kernels.maxpool2d(x, 2),
        "maxpool2d_backward": lambda: kernels.maxpool2d_backward(g, idx, x.shape, 2),
        "fft_last": lambda: kernels.fft_last(sig, inverse=False),
        "conv2d fwd+bwd": conv_step,
        "FEN J_f step": fen_step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        for case, fn in cases(np.random.default_rng(0)).items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(case, {})[name] = best
    print(f"{'kernel':22s}" + "".join(f"{b:>14s}" for b in backends) + ("       speedup" if len(backends) > 1 else ""))
    for case, row in results.items():
        line = f"{case:22s}" + "".join(f"{row[b] * 1e3:12.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:13.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
