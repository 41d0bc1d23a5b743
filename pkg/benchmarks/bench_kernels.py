"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Runs the element-integration and scatter kernels on batches shaped like the
bimorph V2 assembly, then a full assembly with each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tdnns_piezo import _kernels_py, kernels

try:
    from tdnns_piezo import _kernels as compiled
except ImportError:
    compiled = None

ASSEMBLY = """
import time
from tdnns_piezo import mesh as msh, material as mat, forms as fm, kernels
m = msh.structured_beam_mesh(0.1, [5e-4, 5e-4], {nx}, 1)
pz = mat.reduce_to_plane(mat.pzt5())
loads = fm.LoadSpec(phi0={{2: 75.0, 3: 75.0, 4: 0.0}})
sp = fm.make_spaces(m, "v2", 2)
fm.assemble(m, sp, pz, loads)
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    fm.assemble(m, sp, pz, loads)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, sp.n_dofs, best)
"""


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    # (label, nT, nq, ni, nj, ci, cj): stress-stress and stress-displacement blocks at k=1, 2
    for label, nT, nq, ni, nj, ci, cj in [
        ("sigma-sigma k=1", 4096, 12, 9, 9, 3, 3),
        ("sigma-sigma k=2", 4096, 19, 18, 18, 3, 3),
        ("D-D k=2", 4096, 19, 12, 12, 2, 2),
        ("sigma-u k=2", 4096, 19, 18, 8, 3, 3),
    ]:
        yield (label, rng.standard_normal((nT, nq, ni, ci)), rng.uniform(0, 1, (nT, nq)),
               rng.standard_normal((nT, ci, cj)), rng.standard_normal((nT, nq, nj, cj)))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--nx", type=int, default=512, help="beam elements along x for the assembly run")
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    impls = [("python", _kernels_py)] + ([("cython", compiled)] if compiled is not None else [])
    if compiled is None:
        print("compiled kernels are not built; timing the fallback only")

    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n, _ in impls) + "     speedup")
    for label, Bi, w, M, Bj in kernel_cases(rng):
        times = [bench(lambda i=impl: kernels.element_bilinear(Bi, w, M, Bj, impl=i), args.repeat)
                 for _, impl in impls]
        sp = f"{times[0] / times[-1]:10.1f}x" if len(times) > 1 else ""
        print(f"{label:<22}" + "".join(f"{t * 1e3:10.1f}ms" for t in times) + sp)

    nT, nloc, n = 20000, 40, 150000
    rows = rng.integers(0, n, (nT, nloc))
    local = rng.standard_normal((nT, nloc, nloc))
    times = [bench(lambda i=impl: kernels.scatter(rows, rows, local, (n, n), impl=i), args.repeat)
             for _, impl in impls]
    sp = f"{times[0] / times[-1]:10.1f}x" if len(times) > 1 else ""
    print(f"{'scatter 20k x 40^2':<22}" + "".join(f"{t * 1e3:10.1f}ms" for t in times) + sp)

    print(f"\nfull V2 k=2 assembly, nx={args.nx}")
    for pure in ("1", "0") if compiled is not None else ("1",):
        env = dict(os.environ, TDNNS_PIEZO_PURE=pure)
        out = subprocess.run([sys.executable, "-c", ASSEMBLY.format(nx=args.nx, repeat=args.repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {int(out[1]):>8} dofs  {float(out[2]) * 1e3:8.1f}ms")


if __name__ == "__main__":
    main()
