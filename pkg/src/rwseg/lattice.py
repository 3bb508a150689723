"""6-neighborhood lattice graphs, edge weights and sparse combinatorial Laplacians.

Two assembly routes exist on purpose: :func:`assemble_laplacian` builds a
Laplacian from any explicit edge list through scipy's COO machinery, while
:class:`GridStructure` precomputes the CSR sparsity pattern of a full grid
once so each weighting of the same lattice only fills a data array. Both
produce identical matrices (tested), the second is what makes multi-term
banks cheap on multi-million-voxel volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .volume import Volume

GAUSSIAN_BETAS = (50.0, 100.0, 150.0)
RECIPROCAL_BETA = 100.0
RECIPROCAL_EPSILON = 1.0


@dataclass(frozen=True)
class EdgeWeightConfig:
    """Weight formula selector: gaussian exp(-beta*d^2) or reciprocal 1/(beta*|d|+eps)."""

    kind: str
    beta: float
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "reciprocal"):
            raise ValidationError(f"unknown weight kind {self.kind!r}")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if self.kind == "reciprocal" and not (self.epsilon or 0) > 0:
            raise ValidationError("reciprocal weights need a positive epsilon")

    def label(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian(beta={self.beta:g})"
        return f"reciprocal(beta={self.beta:g}, eps={self.epsilon:g})"


def gaussian_weight(ii, jj, beta):
    """exp(-beta * (ii - jj)^2); accepts scalars or arrays."""
    d = np.subtract(ii, jj)
    return np.exp(-beta * d * d)


def reciprocal_weight(ii, jj, beta, epsilon):
    """1 / (beta * |ii - jj| + epsilon); accepts scalars or arrays."""
    return 1.0 / (beta * np.abs(np.subtract(ii, jj)) + epsilon)


def edge_weights(config: EdgeWeightConfig, vi, vj):
    if config.kind == "gaussian":
        return gaussian_weight(vi, vj, config.beta)
    return reciprocal_weight(vi, vj, config.beta, config.epsilon)


@dataclass(frozen=True)
class EdgeList:
    """6-neighborhood edges (i < j) over a grid, with one weight per edge.

    Edges are ordered by axis (x block, then y, then z), each block in
    ascending i. A gaussian weight may underflow to exact zero on extreme
    contrasts; such edges are kept so the graph structure does not depend
    on the data.
    """

    dims: tuple[int, int, int]
    i: np.ndarray
    j: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        i = np.ascontiguousarray(self.i, dtype=np.int32)
        j = np.ascontiguousarray(self.j, dtype=np.int32)
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        if not (i.shape == j.shape == w.shape):
            raise ValidationError("edge arrays must have equal length")
        if w.size and (not np.all(np.isfinite(w)) or w.min() < 0.0):
            raise ValidationError("edge weights must be finite and nonnegative")
        if i.size and not np.all(i < j):
            raise ValidationError("edges must satisfy i < j")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "w", w)

    def __len__(self) -> int:
        return int(self.i.size)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_weights(self, w) -> "EdgeList":
        return EdgeList(self.dims, self.i, self.j, w)

    def reweighted(self, data: np.ndarray, config: EdgeWeightConfig) -> "EdgeList":
        return self.with_weights(edge_weights(config, data[self.i], data[self.j]))


def expected_edge_count(dims) -> int:
    nx, ny, nz = dims
    return 3 * nx * ny * nz - (ny * nz + nx * nz + nx * ny)


def build_edges(v: Volume) -> EdgeList:
    """Unit-weight 6-neighborhood edges of the volume's grid."""
    return _grid_edges(v.dims)


def _grid_edges(dims) -> EdgeList:
    nx, ny, nz = dims
    n = nx * ny * nz
    ix = np.arange(n, dtype=np.int64)
    x = ix % nx
    y = (ix // nx) % ny
    z = ix // (nx * ny)
    blocks_i = []
    blocks_j = []
    for step, mask in (
        (1, x < nx - 1),
        (nx, y < ny - 1),
        (nx * ny, z < nz - 1),
    ):
        src = ix[mask]
        blocks_i.append(src)
        blocks_j.append(src + step)
    i = np.concatenate(blocks_i)
    j = np.concatenate(blocks_j)
    return EdgeList((nx, ny, nz), i, j, np.ones(i.size))


@dataclass(frozen=True)
class SparseLaplacian:
    """Symmetric combinatorial Laplacian in CSR form (explicit diagonal)."""

    n: int
    matrix: sp.csr_matrix

    @property
    def indptr(self):
        return self.matrix.indptr

    @property
    def indices(self):
        return self.matrix.indices

    @property
    def data(self):
        return self.matrix.data

    def matvec(self, x):
        return self.matrix @ x

    def quad_form(self, y) -> float:
        """y^T L y, summed over columns when y is (n, S)."""
        return float(np.sum(y * (self.matrix @ y)))

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def check_structure(self, tol=1e-10) -> None:
        """Assert symmetry, zero row sums and sign pattern (test helper)."""
        m = self.matrix
        asym = abs(m - m.T)
        if asym.nnz and asym.max() > tol:
            raise ValidationError("laplacian is not symmetric")
        row_sums = np.asarray(m.sum(axis=1)).ravel()
        if row_sums.size and np.abs(row_sums).max() > tol:
            raise ValidationError("laplacian row sums are not zero")
        dense_ok = m.diagonal() >= -tol
        if not dense_ok.all():
            raise ValidationError("negative diagonal entry")
        coo = m.tocoo()
        off = coo.row != coo.col
        if off.any() and coo.data[off].max() > tol:
            raise ValidationError("positive off-diagonal entry")


def assemble_laplacian(edges: EdgeList) -> SparseLaplacian:
    """L[i][i] = sum of incident weights, L[i][j] = -w_ij, explicit zero diag."""
    n = edges.num_voxels
    diag = np.arange(n, dtype=np.int64)
    rows = np.concatenate([edges.i, edges.j, edges.i, edges.j, diag])
    cols = np.concatenate([edges.j, edges.i, edges.i, edges.j, diag])
    vals = np.concatenate([-edges.w, -edges.w, edges.w, edges.w, np.zeros(n)])
    coo = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    csr = coo.tocsr()
    csr.sum_duplicates()
    csr.sort_indices()
    return SparseLaplacian(n, csr)


# CSR column slots of a grid row, in ascending column order. Invalid slots
# (boundary voxels) drop out without disturbing the order.
_SLOTS = ("z-", "y-", "x-", "diag", "x+", "y+", "z+")


class GridStructure:
    """Shared CSR pattern of the grid Laplacian plus scatter positions.

    ``fill(w)`` turns per-axis edge weight blocks into a CSR data array in
    O(nnz) without touching scipy's COO path. The pattern arrays are built
    lazily: the stencil solve path only needs the axis split, so a
    segment-only run never pays for them.
    """

    def __init__(self, dims):
        nx, ny, nz = dims
        self.dims = tuple(int(d) for d in dims)
        self.n = nx * ny * nz
        self._axis_sizes = (
            (nx - 1) * ny * nz if nx > 1 else 0,
            nx * (ny - 1) * nz if ny > 1 else 0,
            nx * ny * (nz - 1) if nz > 1 else 0,
        )
        self._pattern = None

    def _build_pattern(self):
        if self._pattern is not None:
            return self._pattern
        nx, ny, nz = self.dims
        n = self.n
        ix = np.arange(n, dtype=np.int64)
        x = ix % nx
        y = (ix // nx) % ny
        z = ix // (nx * ny)
        step_x, step_y, step_z = 1, nx, nx * ny
        valid = np.stack(
            [
                z > 0,
                y > 0,
                x > 0,
                np.ones(n, dtype=bool),
                x < nx - 1,
                y < ny - 1,
                z < nz - 1,
            ],
            axis=1,
        )
        cols = np.stack(
            [
                ix - step_z,
                ix - step_y,
                ix - step_x,
                ix,
                ix + step_x,
                ix + step_y,
                ix + step_z,
            ],
            axis=1,
        )
        counts = valid.sum(axis=1)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = cols[valid].astype(np.int32)
        before = np.cumsum(valid, axis=1).astype(np.int64) - valid
        slot_pos = {}
        for s, name in enumerate(_SLOTS):
            mask = valid[:, s]
            slot_pos[name] = (indptr[:-1] + before[:, s])[mask]
        diag_pos = indptr[:-1] + before[:, 3]
        self._pattern = (indptr, indices, slot_pos, diag_pos)
        return self._pattern

    @property
    def indptr(self):
        return self._build_pattern()[0]

    @property
    def indices(self):
        return self._build_pattern()[1]

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def _slot_pos(self):
        return self._build_pattern()[2]

    @property
    def diag_pos(self):
        return self._build_pattern()[3]

    def split_edge_weights(self, w):
        """Edge weights in the x, y, z axis blocks of the canonical order."""
        ex, ey, ez = self._axis_sizes
        if w.size != ex + ey + ez:
            raise ValidationError("edge weight array does not match the grid")
        return w[:ex], w[ex : ex + ey], w[ex + ey :]

    def fill(self, w) -> np.ndarray:
        """CSR data for the Laplacian with the given edge weights."""
        nx, ny, nz = self.dims
        wx, wy, wz = self.split_edge_weights(np.asarray(w, dtype=np.float64))
        data = np.zeros(self.nnz)
        deg3 = np.zeros((nz, ny, nx))
        if nx > 1:
            w3 = wx.reshape(nz, ny, nx - 1)
            deg3[:, :, :-1] += w3
            deg3[:, :, 1:] += w3
            data[self._slot_pos["x+"]] = -wx
            data[self._slot_pos["x-"]] = -wx
        if ny > 1:
            w3 = wy.reshape(nz, ny - 1, nx)
            deg3[:, :-1, :] += w3
            deg3[:, 1:, :] += w3
            data[self._slot_pos["y+"]] = -wy
            data[self._slot_pos["y-"]] = -wy
        if nz > 1:
            w3 = wz.reshape(nz - 1, ny, nx)
            deg3[:-1, :, :] += w3
            deg3[1:, :, :] += w3
            data[self._slot_pos["z+"]] = -wz
            data[self._slot_pos["z-"]] = -wz
        data[self.diag_pos] = deg3.ravel()
        return data

    def laplacian(self, w) -> SparseLaplacian:
        csr = sp.csr_matrix(
            (self.fill(w), self.indices, self.indptr), shape=(self.n, self.n)
        )
        return SparseLaplacian(self.n, csr)


class BankTerm:
    """One weighted Laplacian term; the CSR matrix materializes on first use.

    The stencil solve path works straight from the edge weights, so a
    plain segmentation run never assembles these matrices.
    """

    def __init__(self, config: EdgeWeightConfig, edges: EdgeList,
                 structure: GridStructure | None = None):
        self.config = config
        self.edges = edges
        self._structure = structure
        self._laplacian: SparseLaplacian | None = None

    @property
    def laplacian(self) -> SparseLaplacian:
        if self._laplacian is None:
            if self._structure is not None:
                self._laplacian = self._structure.laplacian(self.edges.w)
            else:
                self._laplacian = assemble_laplacian(self.edges)
        return self._laplacian


@dataclass(frozen=True)
class LaplacianBank:
    """Ordered Laplacian terms over one shared lattice."""

    dims: tuple[int, int, int]
    terms: tuple[BankTerm, ...]
    structure: GridStructure | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        orders = {t.edges.num_voxels for t in self.terms}
        if len(orders) > 1:
            raise ValidationError("bank terms have mismatched order")

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def combined(self, lap_weights) -> SparseLaplacian:
        """Sum of w_a * L_a; zero-weight terms are skipped."""
        lap_weights = np.asarray(lap_weights, dtype=np.float64)
        if lap_weights.shape != (len(self.terms),):
            raise ValidationError(
                f"expected {len(self.terms)} laplacian weights, got {lap_weights.shape}"
            )
        if self.structure is not None:
            data = np.zeros(self.structure.nnz)
            for wt, term in zip(lap_weights, self.terms):
                if wt != 0.0:
                    data += wt * term.laplacian.data
            csr = sp.csr_matrix(
                (data, self.structure.indices, self.structure.indptr),
                shape=(self.num_voxels, self.num_voxels),
            )
            return SparseLaplacian(self.num_voxels, csr)
        acc = None
        for wt, term in zip(lap_weights, self.terms):
            if wt != 0.0:
                part = term.laplacian.matrix * wt
                acc = part if acc is None else acc + part
        if acc is None:
            n = self.num_voxels
            acc = assemble_laplacian(
                _grid_edges(self.dims).with_weights(
                    np.zeros(expected_edge_count(self.dims))
                )
            ).matrix
        return SparseLaplacian(self.num_voxels, acc.tocsr())


def bank_from_edge_lists(dims, weighted: list[tuple[EdgeWeightConfig, EdgeList]]) -> LaplacianBank:
    """Build a bank from explicit weighted edge lists (generic scipy route)."""
    terms = tuple(BankTerm(cfg, e) for cfg, e in weighted)
    return LaplacianBank(tuple(dims), terms)


def default_configs(
    betas=GAUSSIAN_BETAS,
    recip_beta=RECIPROCAL_BETA,
    recip_epsilon=RECIPROCAL_EPSILON,
) -> list[EdgeWeightConfig]:
    configs = [EdgeWeightConfig("gaussian", float(b)) for b in betas]
    if recip_beta is not None:
        configs.append(
            EdgeWeightConfig("reciprocal", float(recip_beta), float(recip_epsilon))
        )
    return configs


def build_bank(v: Volume, configs) -> LaplacianBank:
    """Bank of Laplacians over the volume's lattice, one per weight config.

    Expects already-normalized intensities; uses the shared grid structure
    so only one sparsity pattern is built for all terms.
    """
    structure = GridStructure(v.dims)
    base = _grid_edges(v.dims)
    vi = v.data[base.i]
    vj = v.data[base.j]
    terms = []
    for cfg in configs:
        w = edge_weights(cfg, vi, vj)
        terms.append(BankTerm(cfg, base.with_weights(w), structure))
    return LaplacianBank(v.dims, tuple(terms), structure)


def build_default_bank(v: Volume) -> LaplacianBank:
    """The standard 4-term bank: gaussian beta 50/100/150 plus reciprocal
    beta=100, eps=1, in that order."""
    return build_bank(v, default_configs())
