"""Shared builders for randomized solver instances and their oracles."""

from __future__ import annotations

import numpy as np

from rwseg import aci, simplex_qp
from rwseg.lattice import EdgeWeightConfig, _grid_edges, bank_from_edge_lists, expected_edge_count
from rwseg.rw_solver import PriorTerm, RWProblem, WeightVector
from rwseg.volume import SeedMap, make_soft

GAUSS100 = EdgeWeightConfig("gaussian", 100.0)


def rand_weighted_edges(rng, dims, lo=0.2, hi=1.5):
    """Grid edge list with uniform random weights (well-coupled instances)."""
    edges = _grid_edges(dims)
    return edges.with_weights(rng.uniform(lo, hi, size=expected_edge_count(dims)))


def rand_problem(
    rng,
    dims,
    num_labels,
    num_seeds=0,
    num_priors=0,
    lap_terms=1,
    weight_range=(0.2, 1.5),
):
    """Random RWProblem over the grid with explicit random edge weights."""
    n = dims[0] * dims[1] * dims[2]
    weighted = [
        (GAUSS100, rand_weighted_edges(rng, dims, *weight_range))
        for _ in range(lap_terms)
    ]
    bank = bank_from_edge_lists(dims, weighted)
    seeds = None
    if num_seeds:
        idx = rng.choice(n, size=num_seeds, replace=False)
        seeds = SeedMap(num_labels, idx, rng.integers(0, num_labels, size=num_seeds))
    priors = tuple(
        PriorTerm.uniform(make_soft(dims, rng.dirichlet(np.ones(num_labels), size=n)))
        for _ in range(num_priors)
    )
    weights = WeightVector(
        rng.uniform(0.2, 1.2, size=lap_terms),
        rng.uniform(0.3, 1.2, size=num_priors) if num_priors else np.empty(0),
    )
    return RWProblem(bank, weights, priors, seeds, num_labels)


def full_qp_oracle(problem):
    """Exact constrained optimum via the single-slave QP and active-set
    enumeration. Returns (y_star (N, S), optimal energy-form objective)."""
    edges = problem.bank.terms[0].edges
    slave = aci._build_slaves(problem, aci.single_partition(edges))[0]
    y = np.zeros((problem.num_voxels, problem.num_labels))
    if problem.has_seeds():
        y[problem.seeds.indices, problem.seeds.labels] = 1.0
    if slave.num_free:
        qp = simplex_qp.SmallQP(slave.quadratic, slave.linear0, slave.qp0.groups)
        x = simplex_qp.solve_qp_oracle(qp)
        y[slave.free_voxels] = x.reshape(slave.num_free, problem.num_labels)
    return y


def random_feasible(rng, problem):
    """Random point of the constraint set (simplex rows, seeds one-hot)."""
    y = rng.dirichlet(np.ones(problem.num_labels), size=problem.num_voxels)
    if problem.has_seeds():
        y[problem.seeds.indices] = 0.0
        y[problem.seeds.indices, problem.seeds.labels] = 1.0
    return y
