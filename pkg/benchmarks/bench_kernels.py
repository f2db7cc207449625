"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the desk encoder: a batch of 16 images around 64x192 pixels,
so the stem sees 1 channel and the first dense block 32-80 channels at
half resolution.  Outputs of both backends are compared before timing.
"""
import argparse
import timeit

import numpy as np

from abm import _kernels_py as python_backend

try:
    from abm import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

CONV_CASES = [
    # name, (B, C, H, W), k, stride, pad
    ("stem 3x3", (16, 1, 64, 192), 3, 1, 1),
    ("block 3x3", (16, 32, 32, 96), 3, 1, 1),
    ("block 3x3 wide", (16, 80, 32, 96), 3, 1, 1),
    ("coverage 11x11", (16, 1, 8, 24), 11, 1, 5),
]


def _out_hw(h, w, k, s, p):
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled extension not built; only the fallback is available")
    backends = [("python", python_backend)] + ([("cython", compiled_backend)] if compiled_backend else [])

    rng = np.random.default_rng(0)
    rows = []
    for name, shape, k, s, p in CONV_CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        ho, wo = _out_hw(shape[2], shape[3], k, s, p)
        cols = rng.standard_normal((shape[1] * k * k, shape[0] * ho * wo)).astype(np.float32)
        ref_cols = python_backend.im2col(x, k, k, s, p)
        ref_img = python_backend.col2im(cols, shape, k, k, s, p)
        for label, be in backends:
            assert np.allclose(be.im2col(x, k, k, s, p), ref_cols)
            assert np.allclose(be.col2im(cols, shape, k, k, s, p), ref_img, atol=1e-4)
        times = {label: (_time(lambda be=be: be.im2col(x, k, k, s, p), args.repeat),
                         _time(lambda be=be: be.col2im(cols, shape, k, k, s, p), args.repeat))
                 for label, be in backends}
        rows.append((f"im2col {name}", {b: t[0] for b, t in times.items()}))
        rows.append((f"col2im {name}", {b: t[1] for b, t in times.items()}))

    pairs = [(rng.integers(0, 30, rng.integers(5, 40)).tolist(), rng.integers(0, 30, rng.integers(5, 40)).tolist())
             for _ in range(2000)]
    for label, be in backends:
        assert [be.levenshtein(a, b) for a, b in pairs[:50]] == [python_backend.levenshtein(a, b)
                                                                 for a, b in pairs[:50]]
    rows.append(("levenshtein x2000", {label: _time(lambda be=be: [be.levenshtein(a, b) for a, b in pairs],
                                                    args.repeat) for label, be in backends}))

    names = [b for b, _ in backends]
    print(f"{'kernel':<28}" + "".join(f"{n + ' ms':>12}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for label, t in rows:
        line = f"{label:<28}" + "".join(f"{t[n]:>12.2f}" for n in names)
        if len(names) == 2:
            line += f"{t['python'] / t['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
