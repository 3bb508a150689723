"""Exact simplex projection and a projected-gradient QP solver.

Solves  min 0.5 x^T Q x + q^T x  subject to each variable group lying on
the probability simplex (nonnegative, summing to one). This is the slave
solver for the dual-decomposition machinery; problems are small by
construction, so a constant-step projected gradient with a power-iteration
Lipschitz estimate is enough. :func:`solve_qp_oracle` enumerates active
sets for an exact reference on tiny instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import SolverError, ValidationError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector onto {p >= 0, sum(p) = 1}.

    Sort-based thresholding: find tau with sum(max(v - tau, 0)) = 1.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size < 1:
        raise ValidationError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot project non-finite values")
    return kernels.project_rows(v[None, :])[0]


@dataclass(frozen=True)
class SmallQP:
    """min 0.5 x^T Q x + q^T x over per-group probability simplexes.

    ``groups`` partitions the n variables; each group's variables are
    constrained to be nonnegative and sum to one.
    """

    quadratic: np.ndarray
    linear: np.ndarray
    groups: tuple[np.ndarray, ...]

    def __post_init__(self):
        q = np.ascontiguousarray(self.quadratic, dtype=np.float64)
        lin = np.ascontiguousarray(self.linear, dtype=np.float64).ravel()
        n = lin.size
        if q.shape != (n, n):
            raise ValidationError(f"quadratic shape {q.shape} does not match n={n}")
        if n and np.abs(q - q.T).max() > 1e-12:
            raise ValidationError("quadratic matrix is not symmetric")
        if 0 < n <= 64:
            lam_min = float(np.linalg.eigvalsh(q).min())
            if lam_min < -1e-9:
                raise ValidationError(
                    f"quadratic matrix is not PSD (lambda_min={lam_min:.3e})"
                )
        groups = tuple(
            np.ascontiguousarray(g, dtype=np.int64).ravel() for g in self.groups
        )
        seen = np.concatenate(groups) if groups else np.empty(0, np.int64)
        if seen.size != n or np.unique(seen).size != n or (
            seen.size and (seen.min() < 0 or seen.max() >= n)
        ):
            raise ValidationError("groups must partition the variable indices")
        object.__setattr__(self, "quadratic", q)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "_block_shape", _uniform_blocks(groups))

    @property
    def n(self) -> int:
        return self.linear.size

    @property
    def block_shape(self) -> tuple[int, int] | None:
        """(num_groups, group_size) when groups are equal contiguous blocks."""
        return self._block_shape

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * x @ (self.quadratic @ x) + self.linear @ x)

    def uniform_start(self) -> np.ndarray:
        x = np.empty(self.n)
        for g in self.groups:
            x[g] = 1.0 / g.size
        return x

    def project(self, x) -> np.ndarray:
        if self._block_shape is not None:
            return kernels.project_rows(x.reshape(self._block_shape)).ravel()
        out = np.empty_like(x)
        for g in self.groups:
            out[g] = project_simplex(x[g])
        return out


def _uniform_blocks(groups) -> tuple[int, int] | None:
    if not groups:
        return None
    size = groups[0].size
    for k, g in enumerate(groups):
        if g.size != size or not np.array_equal(g, np.arange(k * size, (k + 1) * size)):
            return None
    return len(groups), size


def _lipschitz_estimate(q: np.ndarray, iters: int = 20) -> float:
    n = q.shape[0]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0
    v /= norm
    lam = 0.0
    for _ in range(iters):
        w = q @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def step_size(quadratic: np.ndarray) -> float:
    """Constant PG step 1/lambda_max(Q) from a 20-step power iteration."""
    lam = _lipschitz_estimate(quadratic)
    return 1.0 / lam if lam > 0.0 else 1e12


def pg_minimize(
    quadratic, linear, groups, x0, step, tol, max_iter, block_shape=None
):
    """Shared projected-gradient core; returns (x, iterations, converged).

    Uses the blocked kernel when groups are uniform contiguous blocks,
    the generic per-group projection loop otherwise.
    """
    if block_shape is None:
        block_shape = _uniform_blocks(groups)
    if block_shape is not None:
        return kernels.pg_simplex_blocks(
            quadratic, linear, x0, step, tol, max_iter, block_shape[1]
        )
    x = x0.copy()
    for it in range(max_iter):
        g = quadratic @ x + linear
        xg = x - step * g
        x_new = np.empty_like(x)
        for grp in groups:
            x_new[grp] = project_simplex(xg[grp])
        delta = float(np.abs(x_new - x).max())
        x = x_new
        if delta <= tol:
            return x, it + 1, True
    return x, max_iter, False


def solve_qp(
    qp: SmallQP,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    x0=None,
    step: float | None = None,
) -> np.ndarray:
    """Projected gradient with constant step 1/lambda_max(Q).

    Deterministic from the uniform start (ties between optima are broken
    by the trajectory); an explicit ``x0`` warm start is accepted. Raises
    SolverError when the fixed-point residual has not dropped to ``tol``
    within ``max_iter`` steps.
    """
    if qp.n > 4096:
        raise ValidationError("solve_qp is meant for small slave problems (n <= 4096)")
    if qp.n == 0:
        return np.zeros(0)
    x = qp.uniform_start() if x0 is None else qp.project(np.asarray(x0, float).copy())
    if step is None:
        step = step_size(qp.quadratic)
    x, _, converged = pg_minimize(
        qp.quadratic, qp.linear, qp.groups, x, step, tol, max_iter, qp.block_shape
    )
    if not converged:
        raise SolverError(
            f"projected gradient did not converge within {max_iter} iterations"
        )
    return x


def solve_qp_oracle(qp: SmallQP) -> np.ndarray:
    """Exact optimum by enumerating active sets (n <= 12).

    For every choice of zeroed variables (each group keeping at least one
    free variable) the equality-constrained KKT system is solved; the best
    feasible candidate is the global optimum of the convex QP.
    """
    n = qp.n
    if n > 12:
        raise ValidationError("active-set oracle limited to n <= 12")
    best_x = None
    best_val = np.inf
    group_choices = []
    for g in qp.groups:
        choices = []
        for mask in itertools.product((False, True), repeat=g.size):
            free = [int(v) for v, keep in zip(g, mask) if keep]
            if free:
                choices.append(free)
        group_choices.append(choices)

    for combo in itertools.product(*group_choices):
        free = np.array(sorted(idx for part in combo for idx in part), dtype=np.int64)
        nf = free.size
        qff = qp.quadratic[np.ix_(free, free)]
        qf = qp.linear[free]
        a = np.zeros((len(qp.groups), nf))
        for gi, g in enumerate(qp.groups):
            a[gi, np.isin(free, g)] = 1.0
        kkt = np.zeros((nf + len(qp.groups), nf + len(qp.groups)))
        kkt[:nf, :nf] = qff
        kkt[:nf, nf:] = a.T
        kkt[nf:, :nf] = a
        rhs = np.concatenate([-qf, np.ones(len(qp.groups))])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        xf = sol[:nf]
        if (xf < -1e-10).any():
            continue
        x = np.zeros(n)
        x[free] = np.clip(xf, 0.0, None)
        val = qp.objective(x)
        if val < best_val:
            best_val = val
            best_x = x
    if best_x is None:
        raise SolverError("active-set enumeration found no feasible candidate")
    return best_x
