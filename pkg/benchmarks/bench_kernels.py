"""Compiled vs numpy kernels: fused Adam replay, half conversion, threshold compaction.

    python3 benchmarks/bench_kernels.py [--n 1048576] [--steps 10] [--repeat 5]

Each row reports the best of ``--repeat`` runs and whether both backends
produced identical bytes.
"""
import argparse
import timeit

import numpy as np

from tierckpt import kernels
from tierckpt.state import AdamHyper, step_coefficients


def adam_case(impl, n, steps):
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((steps, n)).astype(np.float32)
    coef = np.stack([step_coefficients(AdamHyper(), s) for s in range(steps)])
    init = rng.standard_normal(n).astype(np.float32)

    def go():
        w, m, v = init.copy(), np.zeros(n, np.float32), np.zeros(n, np.float32)
        impl.fused_adam(w, m, v, grads, coef)
        return w.tobytes() + m.tobytes() + v.tobytes()
    return go


def half_case(impl, n):
    x = np.random.default_rng(1).standard_normal(n).astype(np.float32)
    out = np.empty(n, np.uint16)

    def go():
        impl.float_to_half_bits(x, out)
        return out.tobytes()
    return go


def compact_case(impl, n):
    x = np.random.default_rng(2).standard_normal(n).astype(np.float32)
    vals = np.empty(n, np.uint16)
    idx = np.empty(n, np.int32)

    def go():
        c = impl.threshold_compact(x, 2.576, vals, idx)  # about 1% kept
        return vals[:c].tobytes() + idx[:c].tobytes()
    return go


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1 << 20)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    cases = {
        f"fused_adam x{args.steps}": lambda impl: adam_case(impl, args.n, args.steps),
        "float_to_half_bits": lambda impl: half_case(impl, args.n),
        "threshold_compact": lambda impl: compact_case(impl, args.n),
    }
    print(f"n = {args.n}, default backend = {kernels.BACKEND_NAME}")
    print(f"{'kernel':<22}" + "".join(f"{b + ' ms':>14}" for b in names) + f"{'speedup':>10}{'same':>7}")
    for label, make in cases.items():
        times, outs = {}, {}
        for b in names:
            fn = make(kernels.BACKENDS[b])
            outs[b] = fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        same = len(set(outs.values())) == 1
        print(f"{label:<22}" + "".join(f"{times[b]:>14.2f}" for b in names) + f"{speed:>9.1f}x{str(same):>7}")


if __name__ == "__main__":
    main()
