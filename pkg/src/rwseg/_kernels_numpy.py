"""Pure numpy/scipy implementations of the hot kernels.

Selected via RWSEG_BACKEND=numpy (or automatically when numba is not
installed). Semantics match _kernels_numba up to floating-point
reduction order.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

PCG_CONVERGED = 0
PCG_MAX_ITER = 1
PCG_BREAKDOWN = 2


def _as_csr(indptr, indices, data):
    n = indptr.shape[0] - 1
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def csr_matvec(indptr, indices, data, x):
    return _as_csr(indptr, indices, data) @ x


def csr_matvec_block(indptr, indices, data, x):
    return _as_csr(indptr, indices, data) @ x


def _col_dots(a, b):
    return np.einsum("ij,ij->j", a, b)


def pcg_block(indptr, indices, data, b, x0, inv_diag, tol, max_iter):
    """Jacobi-preconditioned CG on S right-hand sides sharing one CSR matrix.

    Each column of ``b`` is solved independently but in lockstep so the
    matrix traversal is shared. Stops a column once its relative residual
    ||r||/||b|| drops to ``tol``.

    Returns (x, iters, relres, status) with one entry per column; status
    is PCG_CONVERGED, PCG_MAX_ITER or PCG_BREAKDOWN (non-positive
    curvature: the matrix is not positive definite on that column).
    """
    A = _as_csr(indptr, indices, data)
    b = np.ascontiguousarray(b, dtype=np.float64)
    x = np.array(x0, dtype=np.float64, copy=True)
    ncols = b.shape[1]

    bnorm = np.sqrt(_col_dots(b, b))
    zero_rhs = bnorm == 0.0
    x[:, zero_rhs] = 0.0
    scale = np.where(zero_rhs, 1.0, bnorm)

    r = b - A @ x
    z = inv_diag[:, None] * r
    p = z.copy()
    rz = _col_dots(r, z)
    relres = np.sqrt(_col_dots(r, r)) / scale

    status = np.full(ncols, PCG_MAX_ITER, dtype=np.int64)
    iters = np.full(ncols, max_iter, dtype=np.int64)
    active = relres > tol
    status[~active] = PCG_CONVERGED
    iters[~active] = 0

    for t in range(max_iter):
        if not active.any():
            break
        q = A @ p
        pq = _col_dots(p, q)

        broken = active & (pq <= 0.0)
        if broken.any():
            status[broken] = PCG_BREAKDOWN
            iters[broken] = t
            active = active & ~broken
            if not active.any():
                break

        alpha = np.where(active, rz / np.where(pq == 0.0, 1.0, pq), 0.0)
        x += alpha * p
        r -= alpha * q
        z = inv_diag[:, None] * r
        rz_new = _col_dots(r, z)
        relres = np.where(active, np.sqrt(_col_dots(r, r)) / scale, relres)

        done = active & (relres <= tol)
        status[done] = PCG_CONVERGED
        iters[done] = t + 1
        active = active & ~done

        beta = np.where(active, rz_new / np.where(rz == 0.0, 1.0, rz), 0.0)
        p = z + beta * p
        rz = rz_new

    return x, iters, relres, status


def project_rows(v):
    """Euclidean projection of every row of ``v`` onto the probability simplex."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    m, n = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    thresholds = css / np.arange(1, n + 1)
    # condition u_k > (cumsum_k - 1)/k holds exactly for k <= rho
    cond = u > thresholds
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = thresholds[np.arange(m), rho]
    return np.maximum(v - tau[:, None], 0.0)


def pg_simplex_blocks(quadratic, linear, x0, step, tol, max_iter, block):
    """Projected gradient for min 0.5 x^T Q x + q^T x over contiguous
    equal-size simplex blocks. Returns (x, iterations, converged)."""
    n = linear.size
    m = n // block
    x = x0.copy()
    for it in range(max_iter):
        g = quadratic @ x + linear
        xn = project_rows((x - step * g).reshape(m, block)).ravel()
        delta = float(np.abs(xn - x).max()) if n else 0.0
        x = xn
        if delta <= tol:
            return x, it + 1, True
    return x, max_iter, False
