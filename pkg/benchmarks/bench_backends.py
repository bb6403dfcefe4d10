"""Time the jitted kernels against the pure-numpy fallback.

Both backends stay importable in one process (the env flag LATDEF_KERNELS
only picks the default), so this script times them side by side on the same
window and field and prints the speedup per kernel.

    python3 benchmarks/bench_backends.py --rwin 48 --repeats 7
"""
import argparse
import time

import numpy as np

from latdef._kernels import HAVE_NUMBA, IMPLS, backend_name
from latdef.crystals import load_crystal
from latdef.energy import _stencil_args
from latdef.lattice import LatticeWindow


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--crystal", default="hex2d")
    ap.add_argument("--rwin", type=float, default=48.0)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    cr = load_crystal(args.crystal)
    window = LatticeWindow.build(cr.spec, cr.rng, args.rwin)
    rng = cr.pot.rng
    kind, p1, p2, p3, rref, rnorm, g0 = _stencil_args(cr.pot)
    nprng = np.random.default_rng(0)
    vals = 0.01 * nprng.standard_normal((window.count, cr.spec.S, cr.spec.n))
    vals[window.n_interior:] = 0.0
    direction = 0.01 * nprng.standard_normal(vals.shape)
    direction[window.n_interior:] = 0.0

    calls = {
        "energy": lambda impl: impl["energy"](
            vals, window.nbr, rng.alpha, rng.beta,
            kind, p1, p2, p3, rref, rnorm, g0),
        "grad": lambda impl: impl["grad"](
            vals, window.nbr, rng.alpha, rng.beta,
            kind, p1, p2, p3, rref, rnorm, g0),
        "hess_apply": lambda impl: impl["hess_apply"](
            vals, direction, window.nbr, rng.alpha, rng.beta,
            kind, p1, p2, p3, rref, rnorm),
        "du_field": lambda impl: impl["du_field"](
            vals, window.nbr, rng.alpha, rng.beta),
    }

    print(f"crystal={cr.name} R_win={args.rwin} sites={window.count} "
          f"triplets={rng.T} default backend={backend_name()}")
    if not HAVE_NUMBA:
        print("numba not importable; timing the numpy backend only")
    names = [n for n in ("numba", "numpy") if n in IMPLS]

    # warm the jit caches (and catch result disagreement while at it)
    for kernel, call in calls.items():
        outs = [np.asarray(call(IMPLS[n])) for n in names]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], rtol=1e-12, atol=1e-14)

    header = f"{'kernel':<12}" + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for kernel, call in calls.items():
        ts = [median_time(lambda n=n: call(IMPLS[n]), args.repeats)
              for n in names]
        row = f"{kernel:<12}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts)
        if len(ts) == 2:
            row += f"{ts[1] / ts[0]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
