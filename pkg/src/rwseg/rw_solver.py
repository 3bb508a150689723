"""Minimization of the prior-augmented random-walks energy.

The energy is  y^T (sum_a w_a L_a) y + sum_b w_b ||y - y_b||^2_{Omega_b}
with y fixed to one-hot rows at seeded voxels. Each label column is an
independent SPD linear system; they are solved in lockstep by a blocked
Jacobi-preconditioned conjugate gradient. Seeds are enforced by clamping
their rows/columns (block-identity form of the usual seeded reduction),
which keeps one CSR matrix for all labels. A dense factorization oracle
(:func:`solve_dense_oracle`) provides an independent reference on small
instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import SolverError, ValidationError
from .lattice import EdgeList, LaplacianBank
from .volume import PriorWeighting, SeedMap, SoftSegmentation, make_soft

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative coefficients for the Laplacian terms and prior terms."""

    laplacian_weights: np.ndarray
    prior_weights: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        lw = np.atleast_1d(np.asarray(self.laplacian_weights, dtype=np.float64))
        pw = np.atleast_1d(np.asarray(self.prior_weights, dtype=np.float64)) \
            if np.size(self.prior_weights) else np.empty(0)
        allw = np.concatenate([lw, pw])
        if not np.all(np.isfinite(allw)):
            raise ValidationError("weights must be finite")
        if allw.size and allw.min() < 0.0:
            raise ValidationError("weights must be nonnegative")
        if not allw.size or allw.max() <= 0.0:
            raise ValidationError("at least one weight must be positive")
        object.__setattr__(self, "laplacian_weights", lw)
        object.__setattr__(self, "prior_weights", pw)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.laplacian_weights, self.prior_weights])


@dataclass(frozen=True)
class PriorTerm:
    """A soft target segmentation with its per-voxel diagonal weighting."""

    target: SoftSegmentation
    weighting: PriorWeighting

    def __post_init__(self):
        if self.weighting.diagonal.size != self.target.num_voxels:
            raise ValidationError("prior weighting size does not match target")

    @classmethod
    def uniform(cls, target: SoftSegmentation) -> "PriorTerm":
        return cls(target, PriorWeighting.uniform(target.num_voxels))


@dataclass(frozen=True)
class RWProblem:
    bank: LaplacianBank
    weights: WeightVector
    priors: tuple[PriorTerm, ...] = ()
    seeds: SeedMap | None = None
    num_labels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(self.priors))
        if self.weights.laplacian_weights.size != len(self.bank):
            raise ValidationError(
                f"{len(self.bank)} bank terms but "
                f"{self.weights.laplacian_weights.size} laplacian weights"
            )
        if self.weights.prior_weights.size != len(self.priors):
            raise ValidationError(
                f"{len(self.priors)} prior terms but "
                f"{self.weights.prior_weights.size} prior weights"
            )
        n = self.bank.num_voxels
        for p in self.priors:
            if p.target.num_voxels != n or p.target.num_labels != self.num_labels:
                raise ValidationError("prior target does not match the problem size")
        if self.seeds is not None:
            self.seeds.validate_for(n)
            if self.seeds.num_labels != self.num_labels:
                raise ValidationError("seed map label count does not match problem")

    @property
    def dims(self):
        return self.bank.dims

    @property
    def num_voxels(self) -> int:
        return self.bank.num_voxels

    def has_seeds(self) -> bool:
        return self.seeds is not None and len(self.seeds) > 0

    def active_priors(self):
        """(weight, prior) pairs with strictly positive weight."""
        return [
            (float(w), p)
            for w, p in zip(self.weights.prior_weights, self.priors)
            if w > 0.0
        ]

    def prior_diagonal(self) -> np.ndarray:
        """sum_b w_b Omega_b as one per-voxel vector."""
        d = np.zeros(self.num_voxels)
        for w, p in self.active_priors():
            d += w * p.weighting.diagonal
        return d

    def prior_rhs(self) -> np.ndarray:
        """sum_b w_b Omega_b y_b, shape (N, S)."""
        b = np.zeros((self.num_voxels, self.num_labels))
        for w, p in self.active_priors():
            b += (w * p.weighting.diagonal)[:, None] * p.target.probs
        return b

    def seed_onehot(self) -> np.ndarray:
        rows = np.zeros((len(self.seeds), self.num_labels))
        rows[np.arange(len(self.seeds)), self.seeds.labels] = 1.0
        return rows


@dataclass
class SolveInfo:
    iterations: np.ndarray
    relres: np.ndarray
    raw: np.ndarray  # pre-renormalization columns
    backend: str


def _diag_positions(csr):
    n = csr.shape[0]
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(csr.indptr))
    pos = np.flatnonzero(csr.indices == rows)
    if pos.size != n:
        raise SolverError("laplacian is missing explicit diagonal entries")
    return pos


def _clamped_system(problem: RWProblem):
    """Assemble A (rows/cols of seeded voxels replaced by identity), the
    matching right-hand side block, and the Jacobi inverse diagonal."""
    n = problem.num_voxels
    s = problem.num_labels
    if not problem.has_seeds() and not problem.active_priors():
        raise SolverError(
            "unsolvable problem: needs seeds or a positive prior term"
        )

    lap = problem.bank.combined(problem.weights.laplacian_weights)
    A = lap.matrix.copy()
    if problem.bank.structure is not None:
        diag_pos = problem.bank.structure.diag_pos
    else:
        diag_pos = _diag_positions(A)

    d = problem.prior_diagonal()
    b = problem.prior_rhs()
    A.data[diag_pos] += d

    if problem.has_seeds():
        seeded = np.zeros(n, dtype=bool)
        seeded[problem.seeds.indices] = True
        onehot = problem.seed_onehot()
        full_onehot = np.zeros((n, s))
        full_onehot[problem.seeds.indices] = onehot

        entry_rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(A.indptr))
        cols = A.indices
        # boundary flux: edges from unseeded rows into seeded columns move
        # to the right-hand side (off-diagonal entries are -w)
        flux = (~seeded[entry_rows]) & seeded[cols]
        if flux.any():
            np.add.at(
                b,
                entry_rows[flux],
                (-A.data[flux])[:, None] * full_onehot[cols[flux]],
            )
        A.data[seeded[entry_rows]] = 0.0
        A.data[seeded[cols]] = 0.0
        A.data[diag_pos[seeded]] = 1.0
        b[seeded] = full_onehot[seeded]
    else:
        seeded = np.zeros(n, dtype=bool)

    diag = A.data[diag_pos]
    if (diag <= 0.0).any():
        raise SolverError(
            "singular reduced system: a voxel has neither incident weight, "
            "seed, nor prior support"
        )
    return A, b, 1.0 / diag, seeded


def _stencil_system(problem: RWProblem):
    """Grid operator in symmetric stencil form, padded for branch-free
    neighbor reads: coefficient arrays (diag, +x, +y, +z), right-hand side,
    Jacobi inverse diagonal, and the seeded mask. Seeds are clamped by
    zeroing their couplings and pinning their diagonal to one."""
    nx, ny, nz = problem.dims
    n = problem.num_voxels
    s = problem.num_labels
    if not problem.has_seeds() and not problem.active_priors():
        raise SolverError("unsolvable problem: needs seeds or a positive prior term")
    structure = problem.bank.structure
    pad = nx * ny

    total_w = None
    for wt, term in zip(problem.weights.laplacian_weights, problem.bank.terms):
        if wt != 0.0:
            part = wt * term.edges.w
            total_w = part if total_w is None else total_w + part
    if total_w is None:
        total_w = np.zeros(len(problem.bank.terms[0].edges))
    wx, wy, wz = structure.split_edge_weights(total_w)
    wx3 = wx.reshape(nz, ny, max(nx - 1, 0))
    wy3 = wy.reshape(nz, max(ny - 1, 0), nx)
    wz3 = wz.reshape(max(nz - 1, 0), ny, nx)

    deg3 = np.zeros((nz, ny, nx))
    if nx > 1:
        deg3[:, :, :-1] += wx3
        deg3[:, :, 1:] += wx3
    if ny > 1:
        deg3[:, :-1, :] += wy3
        deg3[:, 1:, :] += wy3
    if nz > 1:
        deg3[:-1, :, :] += wz3
        deg3[1:, :, :] += wz3

    d = problem.prior_diagonal()
    b_core = problem.prior_rhs()

    seeded = np.zeros(n, dtype=bool)
    onehot = np.zeros((n, s))
    if problem.has_seeds():
        seeded[problem.seeds.indices] = True
        onehot[problem.seeds.indices, problem.seeds.labels] = 1.0
    seeded3 = seeded.reshape(nz, ny, nx)
    onehot4 = onehot.reshape(nz, ny, nx, s)
    b4 = b_core.reshape(nz, ny, nx, s)

    def couple(w3, lo, hi):
        """Kill couplings at seeded endpoints; move seed flux to the rhs."""
        s_lo = seeded3[lo]
        s_hi = seeded3[hi]
        flux_lo = (~s_lo) & s_hi
        if flux_lo.any():
            b4[lo][flux_lo] += w3[flux_lo, None] * onehot4[hi][flux_lo]
        flux_hi = s_lo & (~s_hi)
        if flux_hi.any():
            b4[hi][flux_hi] += w3[flux_hi, None] * onehot4[lo][flux_hi]
        out = np.zeros(seeded3.shape)
        out[lo] = np.where(s_lo | s_hi, 0.0, w3)
        return out

    cxp3 = np.zeros((nz, ny, nx))
    cyp3 = np.zeros((nz, ny, nx))
    czp3 = np.zeros((nz, ny, nx))
    if nx > 1:
        cxp3 = couple(wx3, np.s_[:, :, :-1], np.s_[:, :, 1:])
    if ny > 1:
        cyp3 = couple(wy3, np.s_[:, :-1, :], np.s_[:, 1:, :])
    if nz > 1:
        czp3 = couple(wz3, np.s_[:-1, :, :], np.s_[1:, :, :])

    diag = deg3.ravel() + d
    diag[seeded] = 1.0
    b_core[seeded] = onehot[seeded]
    if (diag <= 0.0).any():
        raise SolverError(
            "singular reduced system: a voxel has neither incident weight, "
            "seed, nor prior support"
        )

    def padded(core, fill=0.0):
        out = np.full(2 * pad + core.shape[0], fill)
        out[pad : pad + core.shape[0]] = core
        return out

    cd = padded(diag)
    cxp = padded(-cxp3.ravel())
    cyp = padded(-cyp3.ravel())
    czp = padded(-czp3.ravel())
    inv_diag = padded(1.0 / diag, fill=1.0)
    b = np.zeros((2 * pad + n, s))
    b[pad : pad + n] = b_core
    x0 = np.zeros_like(b)
    x0[pad : pad + n][seeded] = onehot[seeded]
    return (cd, cxp, cyp, czp), b, x0, inv_diag, seeded, pad


def _finalize(problem, raw, seeded) -> SoftSegmentation:
    seg = make_soft(problem.dims, raw, problem.num_labels)
    probs = seg.probs
    if seeded.any():
        probs = probs.copy()
        probs[seeded] = 0.0
        probs[problem.seeds.indices, problem.seeds.labels] = 1.0
        seg = SoftSegmentation(problem.dims, problem.num_labels, probs)
    return seg


def solve_with_info(
    problem: RWProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
) -> tuple[SoftSegmentation, SolveInfo]:
    """Blocked Jacobi-PCG solve; see :func:`solve` for the contract."""
    if not (1e-12 <= tol <= 1e-2):
        raise ValidationError("tol must lie in [1e-12, 1e-2]")
    n = problem.num_voxels
    if max_iter is None:
        max_iter = 10 * n

    if kernels.pcg_stencil is not None and problem.bank.structure is not None:
        nx, ny, _ = problem.dims
        coeffs, b, x0, inv_diag, seeded, pad = _stencil_system(problem)
        xp, iters, relres, status = kernels.pcg_stencil(
            coeffs, b, x0, inv_diag, tol, max_iter, pad, nx, nx * ny
        )
        x = xp[pad : pad + n]
    else:
        A, b, inv_diag, seeded = _clamped_system(problem)
        x0 = np.zeros_like(b)
        if seeded.any():
            # exact one-hot start keeps seeded rows exact in every iteration
            x0[seeded] = b[seeded]
        x, iters, relres, status = kernels.pcg_block(
            A.indptr, A.indices, A.data, b, x0, inv_diag, tol, max_iter
        )
    if (status == kernels.PCG_BREAKDOWN).any():
        raise SolverError("singular reduced system: CG hit non-positive curvature")
    if (status == kernels.PCG_MAX_ITER).any():
        worst = float(relres.max())
        raise SolverError(
            f"CG did not converge within {max_iter} iterations "
            f"(residual {worst:.3e} > tol {tol:.1e})"
        )
    seg = _finalize(problem, x, seeded)
    return seg, SolveInfo(iters, relres, x, kernels.BACKEND)


def solve(
    problem: RWProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
) -> SoftSegmentation:
    """Minimize the energy with seeds held one-hot.

    Each label column solves independently on the clamped system; rows are
    renormalized afterwards to absorb solver drift, and seeded rows are
    exactly one-hot in the output.
    """
    seg, _ = solve_with_info(problem, tol=tol, max_iter=max_iter)
    return seg


def solve_dense_oracle(problem: RWProblem) -> SoftSegmentation:
    """Exact reference solve by dense factorization of the reduced system.

    Independent of the sparse path: the dense matrix is accumulated
    straight from the edge lists and solved with LAPACK. Limited to 1000
    voxels.
    """
    n = problem.num_voxels
    if n > 1000:
        raise ValidationError("dense oracle limited to 1000 voxels")
    s = problem.num_labels
    if not problem.has_seeds() and not problem.active_priors():
        raise SolverError("unsolvable problem: needs seeds or a positive prior term")

    A = np.zeros((n, n))
    for wt, term in zip(problem.weights.laplacian_weights, problem.bank.terms):
        if wt == 0.0:
            continue
        e = term.edges
        for i, j, w in zip(e.i, e.j, e.w):
            ww = wt * w
            A[i, i] += ww
            A[j, j] += ww
            A[i, j] -= ww
            A[j, i] -= ww
    A[np.diag_indices(n)] += problem.prior_diagonal()
    b = problem.prior_rhs()

    if problem.has_seeds():
        seeded = np.zeros(n, dtype=bool)
        seeded[problem.seeds.indices] = True
        full_onehot = np.zeros((n, s))
        full_onehot[problem.seeds.indices, problem.seeds.labels] = 1.0
        free = ~seeded
        rhs = b[free] - A[np.ix_(free, seeded)] @ full_onehot[seeded]
        try:
            xf = np.linalg.solve(A[np.ix_(free, free)], rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular reduced system: {exc}") from exc
        raw = full_onehot
        raw[free] = xf
    else:
        seeded = np.zeros(n, dtype=bool)
        try:
            raw = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular system: {exc}") from exc
    return _finalize(problem, raw, seeded)


def energy(problem: RWProblem, seg) -> float:
    """Value of the full energy at a segmentation (array or SoftSegmentation)."""
    y = seg.probs if isinstance(seg, SoftSegmentation) else np.asarray(seg, float)
    if y.shape != (problem.num_voxels, problem.num_labels):
        raise ValidationError(
            f"segmentation shape {y.shape} does not match problem "
            f"({problem.num_voxels}, {problem.num_labels})"
        )
    total = 0.0
    for wt, term in zip(problem.weights.laplacian_weights, problem.bank.terms):
        if wt != 0.0:
            total += wt * term.laplacian.quad_form(y)
    for w, p in problem.active_priors():
        diff = y - p.target.probs
        total += w * float(np.sum(p.weighting.diagonal[:, None] * diff * diff))
    return total
