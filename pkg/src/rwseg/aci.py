"""Dual decomposition for simplex-constrained segmentation.

The constrained problem minimizes the same energy as the random-walks
solver but with every voxel's label row restricted to the probability
simplex. The lattice is split into voxel subsets such that each neighbor
pair shares exactly one subset; each subset becomes a small QP slave whose
prior coefficients are scaled by the reciprocal of the voxel's subset
multiplicity, so the slaves sum back to the original energy exactly.
Slaves are solved per iteration, a per-voxel consensus is formed over the
subsets containing each voxel, and dual variables move along the
slave-minus-consensus disagreement with a diminishing learning rate.

Seeded voxels are eliminated from the slaves (their rows fixed one-hot);
their constants stay in the slave objectives so the primal and dual values
remain directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import SolverError, ValidationError
from .lattice import EdgeList
from .rw_solver import RWProblem, energy
from .simplex_qp import SmallQP, pg_minimize, step_size
from .volume import SoftSegmentation

PARTITION_SCHEMES = ("edge", "line")


@dataclass(frozen=True)
class Partition:
    """Voxel subsets covering every lattice edge exactly once.

    ``subset_edges[m]`` holds positions into ``edges`` of the edges owned
    by subset m; slave energies are built from owned edges only.
    """

    edges: EdgeList
    subsets: tuple[np.ndarray, ...]
    subset_edges: tuple[np.ndarray, ...]

    def __post_init__(self):
        subs = tuple(np.ascontiguousarray(s, dtype=np.int64).ravel() for s in self.subsets)
        se = tuple(np.ascontiguousarray(e, dtype=np.int64).ravel() for e in self.subset_edges)
        if len(subs) != len(se):
            raise ValidationError("subsets and subset_edges differ in length")
        n = self.edges.num_voxels
        mult = np.zeros(n, dtype=np.int64)
        for voxels, epos in zip(subs, se):
            if voxels.size == 0:
                raise ValidationError("empty subset")
            if voxels.min() < 0 or voxels.max() >= n:
                raise ValidationError("subset voxel index out of range")
            if np.unique(voxels).size != voxels.size:
                raise ValidationError("duplicate voxel within a subset")
            mult[voxels] += 1
            if epos.size:
                members = set(voxels.tolist())
                for p in epos:
                    if int(self.edges.i[p]) not in members or int(self.edges.j[p]) not in members:
                        raise ValidationError("subset owns an edge outside its voxels")
        if (mult == 0).any():
            raise ValidationError("a voxel belongs to no subset")
        object.__setattr__(self, "subsets", subs)
        object.__setattr__(self, "subset_edges", se)
        object.__setattr__(self, "_multiplicity", mult)

    @property
    def multiplicity(self) -> np.ndarray:
        return self._multiplicity

    @property
    def num_subsets(self) -> int:
        return len(self.subsets)

    def check_edge_cover(self) -> None:
        """Every edge owned by exactly one subset."""
        owned = np.concatenate(self.subset_edges) if self.subset_edges else np.empty(0, np.int64)
        if owned.size != len(self.edges) or np.unique(owned).size != owned.size:
            raise ValidationError("edges are not covered exactly once")


def _edge_key_lookup(edges: EdgeList):
    n = edges.num_voxels
    keys = edges.i.astype(np.int64) * n + edges.j.astype(np.int64)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    if sorted_keys.size and (np.diff(sorted_keys) == 0).any():
        raise ValidationError("duplicate edges in edge list")

    def lookup(i, j):
        key = int(i) * n + int(j)
        pos = int(np.searchsorted(sorted_keys, key))
        if pos >= sorted_keys.size or sorted_keys[pos] != key:
            raise ValidationError(f"edge ({i}, {j}) not present in edge list")
        return int(order[pos])

    return lookup


def build_partition(edges: EdgeList, scheme: str) -> Partition:
    """Edge-disjoint voxel subsets.

    scheme="edge": one subset per edge (multiplicity = lattice degree).
    scheme="line": one subset per maximal axis-aligned line with extent > 1,
    owning the edges along its axis (multiplicity = number of extended axes).
    Voxels covered by no subset (single-voxel grids) get singleton subsets.
    """
    if scheme not in PARTITION_SCHEMES:
        raise ValidationError(f"unknown partition scheme {scheme!r}")
    n = edges.num_voxels
    subsets: list[np.ndarray] = []
    subset_edges: list[np.ndarray] = []

    if scheme == "edge":
        for pos in range(len(edges)):
            subsets.append(np.array([edges.i[pos], edges.j[pos]], dtype=np.int64))
            subset_edges.append(np.array([pos], dtype=np.int64))
    else:
        nx, ny, nz = edges.dims
        lookup = _edge_key_lookup(edges)
        axes = (
            (nx, 1, [(y, z) for z in range(nz) for y in range(ny)], lambda y, z: y * nx + z * nx * ny),
            (ny, nx, [(x, z) for z in range(nz) for x in range(nx)], lambda x, z: x + z * nx * ny),
            (nz, nx * ny, [(x, y) for y in range(ny) for x in range(nx)], lambda x, y: x + y * nx),
        )
        for extent, step, starts, base in axes:
            if extent <= 1:
                continue
            for coords in starts:
                first = base(*coords)
                voxels = first + step * np.arange(extent, dtype=np.int64)
                epos = np.array(
                    [lookup(voxels[k], voxels[k + 1]) for k in range(extent - 1)],
                    dtype=np.int64,
                )
                subsets.append(voxels)
                subset_edges.append(epos)

    covered = np.zeros(n, dtype=bool)
    for s in subsets:
        covered[s] = True
    for vox in np.flatnonzero(~covered):
        subsets.append(np.array([vox], dtype=np.int64))
        subset_edges.append(np.empty(0, dtype=np.int64))

    partition = Partition(edges, tuple(subsets), tuple(subset_edges))
    partition.check_edge_cover()
    return partition


def single_partition(edges: EdgeList) -> Partition:
    """The trivial M=1 decomposition: one subset holding every voxel."""
    n = edges.num_voxels
    return Partition(
        edges,
        (np.arange(n, dtype=np.int64),),
        (np.arange(len(edges), dtype=np.int64),),
    )


class _Slave:
    """Static data of one slave QP over its unseeded voxels.

    The quadratic never changes across dual iterations, so the PSD check
    and the power-iteration step size are paid once at construction.
    """

    def __init__(self, voxels, free_voxels, quadratic, linear0, constant, num_labels):
        self.voxels = voxels
        self.free_voxels = free_voxels
        self.constant = float(constant)
        self.num_labels = num_labels
        groups = tuple(
            np.arange(k * num_labels, (k + 1) * num_labels)
            for k in range(free_voxels.size)
        )
        if free_voxels.size:
            self.qp0 = SmallQP(quadratic, linear0, groups)
            self.step = step_size(self.qp0.quadratic)
        else:
            self.qp0 = None
            self.step = 1.0

    @property
    def num_free(self) -> int:
        return int(self.free_voxels.size)

    @property
    def quadratic(self) -> np.ndarray:
        return self.qp0.quadratic

    @property
    def linear0(self) -> np.ndarray:
        return self.qp0.linear

    def objective_at(self, x: np.ndarray, rho: np.ndarray | None = None) -> float:
        val = (
            0.5 * float(x @ (self.quadratic @ x))
            + float(self.linear0 @ x)
            + self.constant
        )
        if rho is not None and rho.size:
            val += float(rho.ravel() @ x)
        return val

    def solve(self, rho, tol, max_iter, x0=None):
        """Minimize g_m + rho.y over the per-voxel simplexes; returns (y, value)."""
        if self.num_free == 0:
            return np.zeros((0, self.num_labels)), self.constant
        if x0 is None:
            x0 = self.qp0.uniform_start()
        else:
            x0 = np.asarray(x0, dtype=np.float64).ravel()
        x, _, converged = pg_minimize(
            self.quadratic,
            self.linear0 + rho.ravel(),
            self.qp0.groups,
            x0,
            self.step,
            tol,
            max_iter,
            self.qp0.block_shape,
        )
        if not converged:
            raise SolverError(
                f"slave projected gradient did not converge within {max_iter} steps"
            )
        return x.reshape(self.num_free, self.num_labels), self.objective_at(x, rho)


def _build_slaves(
    problem: RWProblem, partition: Partition, extra_linear=None
) -> list[_Slave]:
    """Slave QPs; ``extra_linear`` (N, S) adds a per-voxel linear term to the
    energy (used by loss-augmented inference), split across subsets by the
    same reciprocal-multiplicity rule as the priors."""
    s = problem.num_labels
    mult = partition.multiplicity.astype(np.float64)
    combined_w = np.zeros(len(partition.edges))
    for wt, term in zip(problem.weights.laplacian_weights, problem.bank.terms):
        if wt != 0.0:
            combined_w += wt * term.edges.w

    d_full = problem.prior_diagonal() / mult
    r_full = problem.prior_rhs() / mult[:, None]
    if extra_linear is not None:
        extra_full = np.asarray(extra_linear, dtype=np.float64) / mult[:, None]
    else:
        extra_full = None
    sq = np.zeros(problem.num_voxels)
    for w, p in problem.active_priors():
        sq += w * p.weighting.diagonal * np.sum(p.target.probs**2, axis=1)
    c_full = sq / mult

    seeded = np.zeros(problem.num_voxels, dtype=bool)
    onehot = np.zeros((problem.num_voxels, s))
    if problem.has_seeds():
        seeded[problem.seeds.indices] = True
        onehot[problem.seeds.indices, problem.seeds.labels] = 1.0

    slaves = []
    edges = partition.edges
    for voxels, epos in zip(partition.subsets, partition.subset_edges):
        free_mask = ~seeded[voxels]
        free_voxels = voxels[free_mask]
        nf = free_voxels.size
        var_of = {int(v): k for k, v in enumerate(free_voxels)}
        q = np.zeros((nf * s, nf * s))
        lin = np.zeros(nf * s)
        const = 0.0

        # prior terms, reweighted by reciprocal multiplicity
        for v in voxels:
            v = int(v)
            if seeded[v]:
                const += d_full[v] * float(onehot[v] @ onehot[v]) \
                    - 2.0 * float(r_full[v] @ onehot[v]) + c_full[v]
                if extra_full is not None:
                    const += float(extra_full[v] @ onehot[v])
            else:
                u = var_of[v]
                for lab in range(s):
                    q[u * s + lab, u * s + lab] += 2.0 * d_full[v]
                    lin[u * s + lab] += -2.0 * r_full[v, lab]
                    if extra_full is not None:
                        lin[u * s + lab] += extra_full[v, lab]
                const += c_full[v]

        # owned edges with the combined laplacian weight
        for p in epos:
            p = int(p)
            w = float(combined_w[p])
            a, b = int(edges.i[p]), int(edges.j[p])
            sa, sb = seeded[a], seeded[b]
            if sa and sb:
                diff = onehot[a] - onehot[b]
                const += w * float(diff @ diff)
            elif sa or sb:
                u = var_of[b if sa else a]
                fixed = onehot[a if sa else b]
                const += w * float(fixed @ fixed)
                for lab in range(s):
                    q[u * s + lab, u * s + lab] += 2.0 * w
                    lin[u * s + lab] += -2.0 * w * fixed[lab]
            else:
                ua, ub = var_of[a], var_of[b]
                for lab in range(s):
                    q[ua * s + lab, ua * s + lab] += 2.0 * w
                    q[ub * s + lab, ub * s + lab] += 2.0 * w
                    q[ua * s + lab, ub * s + lab] += -2.0 * w
                    q[ub * s + lab, ua * s + lab] += -2.0 * w

        slaves.append(_Slave(voxels, free_voxels, q, lin, const, s))
    return slaves


@dataclass
class DualState:
    """Dual variables per subset over its unseeded (voxel, label) slots."""

    partition: Partition
    rho: list[np.ndarray]
    free_voxels: list[np.ndarray]
    iteration: int
    eta0: float
    schedule: str

    def scattered_sum(self, num_voxels: int, num_labels: int) -> np.ndarray:
        """sum_m rho_m scattered to full length (zero for the consistency invariant)."""
        total = np.zeros((num_voxels, num_labels))
        for slave_rho, voxels in zip(self.rho, self.free_voxels):
            if slave_rho.size:
                total[voxels] += slave_rho
        return total


@dataclass
class AciDiagnostics:
    iterations: np.ndarray
    dual_values: np.ndarray
    primal_energies: np.ndarray
    max_disagreements: np.ndarray
    converged: bool
    state: DualState

    def csv_rows(self):
        yield "iteration,dual_value,primal_energy,max_disagreement"
        for t, d, p, g in zip(
            self.iterations, self.dual_values, self.primal_energies, self.max_disagreements
        ):
            yield f"{int(t)},{float(d)!r},{float(p)!r},{float(g)!r}"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.csv_rows():
                fh.write(row + "\n")


def _learning_rate(eta0: float, schedule: str, t: int, disagreement: float) -> float:
    if schedule == "harmonic":
        return eta0 / (1.0 + t)
    if schedule == "adaptive":
        # step scaled by how far the slaves currently disagree
        return eta0 * disagreement
    raise ValidationError(f"unknown learning-rate schedule {schedule!r}")


def _consensus(problem, slaves, solutions):
    n, s = problem.num_voxels, problem.num_labels
    acc = np.zeros((n, s))
    count = np.zeros(n)
    for slave, y in zip(slaves, solutions):
        if slave.num_free:
            acc[slave.free_voxels] += y
            count[slave.free_voxels] += 1.0
    free = count > 0
    acc[free] /= count[free, None]
    if problem.has_seeds():
        acc[problem.seeds.indices] = 0.0
        acc[problem.seeds.indices, problem.seeds.labels] = 1.0
    return acc


def solve_aci(
    problem: RWProblem,
    partition: Partition,
    eta0: float = 0.1,
    max_iter: int = 2000,
    gap_tol: float = 1e-5,
    schedule: str = "harmonic",
    slave_tol: float = 1e-8,
    slave_max_iter: int = 200_000,
    warm_start: bool = True,
    extra_linear=None,
) -> tuple[SoftSegmentation, AciDiagnostics]:
    """Iterate slave solves, per-voxel consensus and dual updates.

    Stops when the largest slave-vs-consensus disagreement falls to
    ``gap_tol``. On non-convergence the best consensus seen (lowest primal
    energy) is returned with ``converged=False`` in the diagnostics.

    ``extra_linear`` (N, S) adds a linear term to the minimized objective
    (the primal trace then reports energy plus that term).

    The first iteration always starts every slave at the uniform rows;
    with ``warm_start`` later iterations continue from the slave's
    previous solution (the duals move slowly, so this saves most of the
    projected-gradient work without changing the limit).
    """
    if max_iter < 1:
        raise ValidationError("max_iter must be at least 1")
    if not problem.has_seeds() and not problem.active_priors():
        raise SolverError("unsolvable problem: needs seeds or a positive prior term")
    slaves = _build_slaves(problem, partition, extra_linear=extra_linear)
    num_labels = problem.num_labels
    rho = [np.zeros((sl.num_free, num_labels)) for sl in slaves]
    state = DualState(partition, rho, [sl.free_voxels for sl in slaves], 0, eta0, schedule)

    hist_t, hist_dual, hist_primal, hist_gap = [], [], [], []
    best_primal = np.inf
    best_consensus = None
    converged = False
    previous: list[np.ndarray | None] = [None] * len(slaves)

    for t in range(max_iter):
        solutions = []
        dual_value = 0.0
        for k, (sl, r) in enumerate(zip(slaves, rho)):
            y, val = sl.solve(r, slave_tol, slave_max_iter, x0=previous[k])
            solutions.append(y)
            dual_value += val
            if warm_start and sl.num_free:
                previous[k] = y.ravel()

        ybar = _consensus(problem, slaves, solutions)
        disagreement = 0.0
        for sl, y in zip(slaves, solutions):
            if sl.num_free:
                disagreement = max(
                    disagreement, float(np.abs(y - ybar[sl.free_voxels]).max())
                )

        rows = kernels.project_rows(ybar)
        if problem.has_seeds():
            rows[problem.seeds.indices] = 0.0
            rows[problem.seeds.indices, problem.seeds.labels] = 1.0
        primal = energy(problem, rows)
        if extra_linear is not None:
            primal += float(np.sum(extra_linear * rows))

        hist_t.append(t)
        hist_dual.append(dual_value)
        hist_primal.append(primal)
        hist_gap.append(disagreement)
        if primal < best_primal:
            best_primal = primal
            best_consensus = rows

        state.iteration = t + 1
        if disagreement <= gap_tol:
            converged = True
            best_consensus = rows
            break

        eta = _learning_rate(eta0, schedule, t, disagreement)
        for sl, r, y in zip(slaves, rho, solutions):
            if sl.num_free:
                r += eta * (y - ybar[sl.free_voxels])

    seg = SoftSegmentation(problem.dims, num_labels, np.clip(best_consensus, 0.0, 1.0))
    diag = AciDiagnostics(
        np.array(hist_t),
        np.array(hist_dual),
        np.array(hist_primal),
        np.array(hist_gap),
        converged,
        state,
    )
    return seg, diag


def primal_dual_gap(problem: RWProblem, state: DualState, y_consensus) -> float:
    """Primal energy at the consensus minus the dual lower bound at state.rho."""
    y = y_consensus.probs if isinstance(y_consensus, SoftSegmentation) else np.asarray(y_consensus)
    slaves = _build_slaves(problem, state.partition)
    dual = 0.0
    for sl, r in zip(slaves, state.rho):
        _, val = sl.solve(r, 1e-10, 500_000)
        dual += val
    return float(energy(problem, y) - dual)


def reparameterization_check(
    problem: RWProblem, partition: Partition, num_draws: int = 100, seed: int = 0
) -> float:
    """Max over random feasible y of |sum_m g_m(y|V_m) - E(y)| with zero duals."""
    slaves = _build_slaves(problem, partition)
    rng = np.random.default_rng(seed)
    n, s = problem.num_voxels, problem.num_labels
    worst = 0.0
    for _ in range(num_draws):
        y = rng.dirichlet(np.ones(s), size=n)
        if problem.has_seeds():
            y[problem.seeds.indices] = 0.0
            y[problem.seeds.indices, problem.seeds.labels] = 1.0
        total = 0.0
        for sl in slaves:
            if sl.num_free:
                x = y[sl.free_voxels].ravel()
                total += sl.objective_at(x)
            else:
                total += sl.constant
        worst = max(worst, abs(total - energy(problem, y)))
    return worst
