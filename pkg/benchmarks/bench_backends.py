"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on the same synthetic lattice problem through both
backends and reports wall times. The numpy path is what you get with
RWSEG_BACKEND=numpy; this script imports both backend modules directly so
one run covers both.

    python benchmarks/bench_backends.py --dims 96,96,48 --labels 2
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rwseg import _kernels_numpy
from rwseg.lattice import GridStructure, _grid_edges, gaussian_weight
from rwseg.volume import Volume, normalize_intensities

try:
    from rwseg import _kernels_numba
except ImportError:
    _kernels_numba = None


def _timeit(fn, repeat=5):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def build_problem(dims, num_labels, seed=0):
    rng = np.random.default_rng(seed)
    n = dims[0] * dims[1] * dims[2]
    vol = normalize_intensities(
        Volume(dims, (1, 1, 1), rng.normal(0.0, 0.05, size=n) + (rng.random(n) > 0.5))
    )
    structure = GridStructure(dims)
    edges = _grid_edges(dims)
    w = gaussian_weight(vol.data[edges.i], vol.data[edges.j], 50.0) + 0.05
    data = structure.fill(w)
    data[structure.diag_pos] += 0.01  # prior-like diagonal keeps the system PD
    b = rng.random((n, num_labels))
    inv_diag = 1.0 / data[structure.diag_pos]
    return structure, data, b, inv_diag


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dims", default="96,96,48")
    parser.add_argument("--labels", type=int, default=2)
    parser.add_argument("--cg-iters", type=int, default=60)
    args = parser.parse_args()
    dims = tuple(int(t) for t in args.dims.split(","))

    structure, data, b, inv_diag = build_problem(dims, args.labels)
    n = structure.n
    print(f"lattice {dims} -> {n} voxels, {structure.nnz} nonzeros, S={args.labels}")

    backends = [("numpy", _kernels_numpy)]
    if _kernels_numba is not None:
        _kernels_numba.warmup()
        backends.append(("numba", _kernels_numba))
    else:
        print("numba not importable; benchmarking numpy only")

    x = np.random.default_rng(1).random(n)
    rows = np.random.default_rng(2).random((n, max(args.labels, 2)))
    results = {}
    for name, mod in backends:
        t_mv, _ = _timeit(lambda: mod.csr_matvec(structure.indptr, structure.indices, data, x))
        t_blk, _ = _timeit(lambda: mod.csr_matvec_block(structure.indptr, structure.indices, data, b))
        t_proj, _ = _timeit(lambda: mod.project_rows(rows))
        t_cg, (sol, iters, relres, status) = _timeit(
            lambda: mod.pcg_block(
                structure.indptr, structure.indices, data, b,
                np.zeros_like(b), inv_diag, 1e-10, args.cg_iters,
            ),
            repeat=2,
        )
        results[name] = (t_mv, t_blk, t_proj, t_cg)
        print(
            f"{name:6s} matvec {t_mv*1e3:8.2f} ms | block matvec {t_blk*1e3:8.2f} ms | "
            f"project_rows {t_proj*1e3:8.2f} ms | pcg({args.cg_iters} it) {t_cg:6.3f} s"
        )

    if len(results) == 2:
        a, bnch = results["numpy"], results["numba"]
        names = ("matvec", "block matvec", "project_rows", f"pcg({args.cg_iters})")
        speedups = ", ".join(f"{nm} {x/y:.2f}x" for nm, x, y in zip(names, a, bnch))
        print(f"numba speedup over numpy: {speedups}")


if __name__ == "__main__":
    main()
