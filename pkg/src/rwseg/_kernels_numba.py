"""Numba-jitted hot kernels: parallel CSR matvec, blocked Jacobi-PCG and
row-wise simplex projection.

Kernels compile on first call and are cached on disk, so the first run
of a fresh checkout pays a one-time compilation cost.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

PCG_CONVERGED = 0
PCG_MAX_ITER = 1
PCG_BREAKDOWN = 2


@njit(parallel=True, cache=True)
def csr_matvec(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    out = np.empty(n, np.float64)
    for i in prange(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc
    return out


@njit(parallel=True, cache=True)
def _matvec_block_into(indptr, indices, data, x, out):
    n = indptr.shape[0] - 1
    ncols = x.shape[1]
    if ncols == 2:
        # dominant case (two labels); explicit accumulators read the
        # index array once per row
        for i in prange(n):
            a0 = 0.0
            a1 = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                d = data[k]
                j = indices[k]
                a0 += d * x[j, 0]
                a1 += d * x[j, 1]
            out[i, 0] = a0
            out[i, 1] = a1
    else:
        for i in prange(n):
            for s in range(ncols):
                acc = 0.0
                for k in range(indptr[i], indptr[i + 1]):
                    acc += data[k] * x[indices[k], s]
                out[i, s] = acc


def csr_matvec_block(indptr, indices, data, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    _matvec_block_into(indptr, indices, data, x, out)
    return out


@njit(parallel=True, cache=True)
def _col_dot(a, b, s):
    acc = 0.0
    for i in prange(a.shape[0]):
        acc += a[i, s] * b[i, s]
    return acc


@njit(parallel=True, cache=True)
def _update_x_r_z(x, r, z, p, q, inv_diag, alpha, active):
    n = x.shape[0]
    ncols = x.shape[1]
    for i in prange(n):
        for s in range(ncols):
            if active[s]:
                x[i, s] += alpha[s] * p[i, s]
                r[i, s] -= alpha[s] * q[i, s]
                z[i, s] = inv_diag[i] * r[i, s]


@njit(parallel=True, cache=True)
def _update_p(p, z, beta, active):
    n = p.shape[0]
    ncols = p.shape[1]
    for i in prange(n):
        for s in range(ncols):
            if active[s]:
                p[i, s] = z[i, s] + beta[s] * p[i, s]


def pcg_block(indptr, indices, data, b, x0, inv_diag, tol, max_iter):
    """Jacobi-preconditioned CG on S right-hand sides sharing one CSR matrix.

    Same contract as the numpy backend: returns (x, iters, relres, status)
    per column with status in {PCG_CONVERGED, PCG_MAX_ITER, PCG_BREAKDOWN}.
    """
    b = np.ascontiguousarray(b, dtype=np.float64)
    x = np.array(x0, dtype=np.float64, copy=True)
    inv_diag = np.ascontiguousarray(inv_diag, dtype=np.float64)
    ncols = b.shape[1]

    bnorm = np.empty(ncols)
    for s in range(ncols):
        bnorm[s] = np.sqrt(_col_dot(b, b, s))
    zero_rhs = bnorm == 0.0
    x[:, zero_rhs] = 0.0
    scale = np.where(zero_rhs, 1.0, bnorm)

    r = b - csr_matvec_block(indptr, indices, data, x)
    z = inv_diag[:, None] * r
    p = z.copy()
    q = np.empty_like(p)

    rz = np.empty(ncols)
    relres = np.empty(ncols)
    for s in range(ncols):
        rz[s] = _col_dot(r, z, s)
        relres[s] = np.sqrt(_col_dot(r, r, s)) / scale[s]

    status = np.full(ncols, PCG_MAX_ITER, dtype=np.int64)
    iters = np.full(ncols, max_iter, dtype=np.int64)
    active = relres > tol
    status[~active] = PCG_CONVERGED
    iters[~active] = 0

    alpha = np.zeros(ncols)
    beta = np.zeros(ncols)
    for t in range(max_iter):
        if not active.any():
            break
        _matvec_block_into(indptr, indices, data, p, q)
        for s in range(ncols):
            if not active[s]:
                alpha[s] = 0.0
                continue
            pq = _col_dot(p, q, s)
            if pq <= 0.0:
                status[s] = PCG_BREAKDOWN
                iters[s] = t
                active[s] = False
                alpha[s] = 0.0
            else:
                alpha[s] = rz[s] / pq
        if not active.any():
            break

        _update_x_r_z(x, r, z, p, q, inv_diag, alpha, active)

        for s in range(ncols):
            if not active[s]:
                beta[s] = 0.0
                continue
            rz_new = _col_dot(r, z, s)
            relres[s] = np.sqrt(_col_dot(r, r, s)) / scale[s]
            if relres[s] <= tol:
                status[s] = PCG_CONVERGED
                iters[s] = t + 1
                active[s] = False
                beta[s] = 0.0
            else:
                beta[s] = rz_new / rz[s] if rz[s] != 0.0 else 0.0
            rz[s] = rz_new

        _update_p(p, z, beta, active)

    return x, iters, relres, status


@njit(parallel=True, cache=True)
def _stencil_matvec(cd, cxp, cyp, czp, p, q, pad, nx, nxny, n):
    """q = A p for the grid Laplacian in symmetric stencil form.

    Arrays are padded by ``pad`` entries on both ends (zeros), so neighbor
    reads never branch; invalid couplings carry zero coefficients.
    """
    ncols = p.shape[1]
    if ncols == 2:
        for i in prange(n):
            k = pad + i
            a0 = cd[k] * p[k, 0]
            a1 = cd[k] * p[k, 1]
            w = cxp[k]
            a0 += w * p[k + 1, 0]
            a1 += w * p[k + 1, 1]
            w = cxp[k - 1]
            a0 += w * p[k - 1, 0]
            a1 += w * p[k - 1, 1]
            w = cyp[k]
            a0 += w * p[k + nx, 0]
            a1 += w * p[k + nx, 1]
            w = cyp[k - nx]
            a0 += w * p[k - nx, 0]
            a1 += w * p[k - nx, 1]
            w = czp[k]
            a0 += w * p[k + nxny, 0]
            a1 += w * p[k + nxny, 1]
            w = czp[k - nxny]
            a0 += w * p[k - nxny, 0]
            a1 += w * p[k - nxny, 1]
            q[k, 0] = a0
            q[k, 1] = a1
    else:
        for i in prange(n):
            k = pad + i
            for s in range(ncols):
                acc = cd[k] * p[k, s]
                acc += cxp[k] * p[k + 1, s]
                acc += cxp[k - 1] * p[k - 1, s]
                acc += cyp[k] * p[k + nx, s]
                acc += cyp[k - nx] * p[k - nx, s]
                acc += czp[k] * p[k + nxny, s]
                acc += czp[k - nxny] * p[k - nxny, s]
                q[k, s] = acc


@njit(parallel=True, cache=True)
def _stencil_matvec_pq2(cd, cxp, cyp, czp, p, q, pad, nx, nxny, n):
    """S=2 matvec fused with the p.q dots (one pass over the arrays)."""
    pq0 = 0.0
    pq1 = 0.0
    for i in prange(n):
        k = pad + i
        a0 = cd[k] * p[k, 0]
        a1 = cd[k] * p[k, 1]
        w = cxp[k]
        a0 += w * p[k + 1, 0]
        a1 += w * p[k + 1, 1]
        w = cxp[k - 1]
        a0 += w * p[k - 1, 0]
        a1 += w * p[k - 1, 1]
        w = cyp[k]
        a0 += w * p[k + nx, 0]
        a1 += w * p[k + nx, 1]
        w = cyp[k - nx]
        a0 += w * p[k - nx, 0]
        a1 += w * p[k - nx, 1]
        w = czp[k]
        a0 += w * p[k + nxny, 0]
        a1 += w * p[k + nxny, 1]
        w = czp[k - nxny]
        a0 += w * p[k - nxny, 0]
        a1 += w * p[k - nxny, 1]
        q[k, 0] = a0
        q[k, 1] = a1
        pq0 += p[k, 0] * a0
        pq1 += p[k, 1] * a1
    return pq0, pq1


@njit(parallel=True, cache=True)
def _dot_col(a, b, s, pad, n):
    acc = 0.0
    for i in prange(n):
        k = pad + i
        acc += a[k, s] * b[k, s]
    return acc


@njit(parallel=True, cache=True)
def _update_dots2(x, r, p, q, inv_diag, a0, a1, pad, n):
    """x += a p; r -= a q; returns (rz0, rz1, rr0, rr1) with z = M^-1 r
    folded into the reductions instead of being stored."""
    rz0 = 0.0
    rz1 = 0.0
    rr0 = 0.0
    rr1 = 0.0
    for i in prange(n):
        k = pad + i
        m = inv_diag[k]
        x[k, 0] += a0 * p[k, 0]
        rv = r[k, 0] - a0 * q[k, 0]
        r[k, 0] = rv
        rz0 += rv * rv * m
        rr0 += rv * rv
        x[k, 1] += a1 * p[k, 1]
        rv = r[k, 1] - a1 * q[k, 1]
        r[k, 1] = rv
        rz1 += rv * rv * m
        rr1 += rv * rv
    return rz0, rz1, rr0, rr1


@njit(parallel=True, cache=True)
def _update_col(x, r, p, q, inv_diag, alpha, s, pad, n):
    rz = 0.0
    rr = 0.0
    for i in prange(n):
        k = pad + i
        x[k, s] += alpha * p[k, s]
        rv = r[k, s] - alpha * q[k, s]
        r[k, s] = rv
        rz += rv * rv * inv_diag[k]
        rr += rv * rv
    return rz, rr


@njit(parallel=True, cache=True)
def _p_update2(p, r, inv_diag, b0, b1, active0, active1, pad, n):
    """p = M^-1 r + beta p (the preconditioned residual is never stored)."""
    for i in prange(n):
        k = pad + i
        m = inv_diag[k]
        if active0:
            p[k, 0] = m * r[k, 0] + b0 * p[k, 0]
        if active1:
            p[k, 1] = m * r[k, 1] + b1 * p[k, 1]


@njit(parallel=True, cache=True)
def _p_update_col(p, r, inv_diag, beta, s, pad, n):
    for i in prange(n):
        k = pad + i
        p[k, s] = inv_diag[k] * r[k, s] + beta * p[k, s]


def pcg_stencil(coeffs, b, x0, inv_diag, tol, max_iter, pad, nx, nxny):
    """Jacobi-PCG with the grid operator in symmetric stencil form.

    ``coeffs`` is (cd, cxp, cyp, czp), each padded by ``pad`` zeros on both
    ends; ``b``, ``x0`` and ``inv_diag`` are padded the same way. Returns
    (x, iters, relres, status) like pcg_block, with x still padded.
    """
    cd, cxp, cyp, czp = coeffs
    n = cd.size - 2 * pad
    ncols = b.shape[1]
    fast2 = ncols == 2

    x = x0.copy()
    r = np.zeros_like(b)
    q = np.zeros_like(b)

    def col_dot(a, c, s):
        return _dot_col(a, c, s, pad, n)

    bnorm = np.empty(ncols)
    for s in range(ncols):
        bnorm[s] = np.sqrt(col_dot(b, b, s))
    zero_rhs = bnorm == 0.0
    x[:, zero_rhs] = 0.0
    scale = np.where(zero_rhs, 1.0, bnorm)

    _stencil_matvec(cd, cxp, cyp, czp, x, q, pad, nx, nxny, n)
    np.subtract(b, q, out=r)
    p = inv_diag[:, None] * r

    rz = np.empty(ncols)
    relres = np.empty(ncols)
    for s in range(ncols):
        rz[s] = col_dot(r, p, s)
        relres[s] = np.sqrt(col_dot(r, r, s)) / scale[s]

    status = np.full(ncols, PCG_MAX_ITER, dtype=np.int64)
    iters = np.full(ncols, max_iter, dtype=np.int64)
    active = relres > tol
    status[~active] = PCG_CONVERGED
    iters[~active] = 0

    alpha = np.zeros(ncols)
    beta = np.zeros(ncols)
    for t in range(max_iter):
        if not active.any():
            break
        if fast2:
            pq_all = _stencil_matvec_pq2(cd, cxp, cyp, czp, p, q, pad, nx, nxny, n)
        else:
            _stencil_matvec(cd, cxp, cyp, czp, p, q, pad, nx, nxny, n)
            pq_all = tuple(col_dot(p, q, s) if active[s] else 0.0 for s in range(ncols))
        for s in range(ncols):
            if not active[s]:
                alpha[s] = 0.0
                continue
            pq = pq_all[s]
            if pq <= 0.0:
                status[s] = PCG_BREAKDOWN
                iters[s] = t
                active[s] = False
                alpha[s] = 0.0
            else:
                alpha[s] = rz[s] / pq
        if not active.any():
            break

        if fast2:
            rz0, rz1, rr0, rr1 = _update_dots2(
                x, r, p, q, inv_diag, alpha[0], alpha[1], pad, n
            )
            rz_new_all = (rz0, rz1)
            rr_all = (rr0, rr1)
        else:
            rz_new_all = []
            rr_all = []
            for s in range(ncols):
                if active[s]:
                    a, c = _update_col(x, r, p, q, inv_diag, alpha[s], s, pad, n)
                else:
                    a, c = rz[s], 0.0
                rz_new_all.append(a)
                rr_all.append(c)

        for s in range(ncols):
            if not active[s]:
                beta[s] = 0.0
                continue
            relres[s] = np.sqrt(rr_all[s]) / scale[s]
            if relres[s] <= tol:
                status[s] = PCG_CONVERGED
                iters[s] = t + 1
                active[s] = False
                beta[s] = 0.0
            else:
                beta[s] = rz_new_all[s] / rz[s] if rz[s] != 0.0 else 0.0
            rz[s] = rz_new_all[s]

        if fast2:
            _p_update2(p, r, inv_diag, beta[0], beta[1], active[0], active[1], pad, n)
        else:
            for s in range(ncols):
                if active[s]:
                    _p_update_col(p, r, inv_diag, beta[s], s, pad, n)

    return x, iters, relres, status


@njit(cache=True)
def pg_simplex_blocks(quadratic, linear, x0, step, tol, max_iter, block):
    """Projected gradient for min 0.5 x^T Q x + q^T x with x partitioned
    into contiguous simplex blocks of equal size ``block``.

    Returns (x, iterations, converged). Small dense problems only; the
    loop is sequential on purpose (parallel overhead dominates at this
    size).
    """
    n = linear.size
    m = n // block
    x = x0.copy()
    g = np.empty(n)
    xn = np.empty(n)
    u = np.empty(block)
    usort = np.empty(block)
    for it in range(max_iter):
        for i in range(n):
            acc = linear[i]
            for j in range(n):
                acc += quadratic[i, j] * x[j]
            g[i] = acc
        delta = 0.0
        for r in range(m):
            base = r * block
            for c in range(block):
                u[c] = x[base + c] - step * g[base + c]
            # insertion-sort a descending copy (block sizes are tiny)
            for c in range(block):
                usort[c] = u[c]
            for c in range(1, block):
                key = usort[c]
                k = c - 1
                while k >= 0 and usort[k] < key:
                    usort[k + 1] = usort[k]
                    k -= 1
                usort[k + 1] = key
            csum = 0.0
            tau = 0.0
            for k in range(block):
                csum += usort[k]
                t = (csum - 1.0) / (k + 1)
                if usort[k] > t:
                    tau = t
            for c in range(block):
                d = u[c] - tau
                val = d if d > 0.0 else 0.0
                ad = abs(val - x[base + c])
                if ad > delta:
                    delta = ad
                xn[base + c] = val
        for i in range(n):
            x[i] = xn[i]
        if delta <= tol:
            return x, it + 1, True
    return x, max_iter, False


@njit(parallel=True, cache=True)
def project_rows(v):
    """Euclidean projection of every row of ``v`` onto the probability simplex.

    Rows are label distributions (a handful of entries), so each row is
    insertion-sorted in its output slot instead of paying a per-row
    np.sort allocation.
    """
    m, n = v.shape
    out = np.empty((m, n), np.float64)
    for row in prange(m):
        for j in range(n):
            out[row, j] = v[row, j]
        for c in range(1, n):
            key = out[row, c]
            k = c - 1
            while k >= 0 and out[row, k] < key:
                out[row, k + 1] = out[row, k]
                k -= 1
            out[row, k + 1] = key
        csum = 0.0
        tau = 0.0
        for k in range(n):
            csum += out[row, k]
            t = (csum - 1.0) / (k + 1)
            if out[row, k] > t:
                tau = t
        for j in range(n):
            d = v[row, j] - tau
            out[row, j] = d if d > 0.0 else 0.0
    return out


def warmup():
    """Trigger compilation of all kernels on tiny inputs."""
    indptr = np.array([0, 2, 4], dtype=np.int64)
    indices = np.array([0, 1, 0, 1], dtype=np.int32)
    data = np.array([2.0, -1.0, -1.0, 2.0])
    csr_matvec(indptr, indices, data, np.ones(2))
    b = np.ones((2, 2))
    pcg_block(indptr, indices, data, b, np.zeros((2, 2)), np.full(2, 0.5), 1e-12, 50)
    b3 = np.ones((2, 3))
    pcg_block(indptr, indices, data, b3, np.zeros((2, 3)), np.full(2, 0.5), 1e-12, 50)
    project_rows(np.array([[0.2, 0.9], [1.5, -0.3]]))
    pg_simplex_blocks(
        np.eye(2), np.zeros(2), np.full(2, 0.5), 0.5, 1e-10, 100, 2
    )
    pad = 1
    cd = np.array([1.0, 2.0, 2.0, 1.0])  # padded 2-voxel chain
    cx = np.array([0.0, -1.0, 0.0, 0.0])
    zero = np.zeros(4)
    for cols in (2, 3):
        bs = np.zeros((4, cols))
        bs[1:3] = 1.0
        pcg_stencil(
            (cd, cx, zero, zero), bs, np.zeros_like(bs),
            np.concatenate([[1.0], 1.0 / cd[1:3], [1.0]]),
            1e-12, 50, pad, 1, 1,
        )
