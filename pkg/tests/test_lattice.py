import itertools

import numpy as np
import pytest

from rwseg.errors import ValidationError
from rwseg.lattice import (
    EdgeList,
    EdgeWeightConfig,
    GridStructure,
    _grid_edges,
    assemble_laplacian,
    build_bank,
    build_default_bank,
    build_edges,
    default_configs,
    expected_edge_count,
    gaussian_weight,
    reciprocal_weight,
)
from rwseg.volume import Volume


def brute_force_edges(dims):
    """Enumeration oracle: all 6-neighbor pairs by coordinate scan."""
    nx, ny, nz = dims
    out = set()
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        i = x + nx * (y + ny * z)
        for dx, dy, dz in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            if x + dx < nx and y + dy < ny and z + dz < nz:
                j = (x + dx) + nx * ((y + dy) + ny * (z + dz))
                out.add((i, j))
    return out


def dense_laplacian_oracle(edges):
    """Independent dense assembly by explicit accumulation."""
    n = edges.num_voxels
    m = np.zeros((n, n))
    for i, j, w in zip(edges.i, edges.j, edges.w):
        m[i, i] += w
        m[j, j] += w
        m[i, j] -= w
        m[j, i] -= w
    return m


def test_edge_counts_forced():
    v1 = Volume((2, 1, 1), (1, 1, 1), [0.0, 1.0])
    e1 = build_edges(v1)
    assert len(e1) == 1 and (e1.i[0], e1.j[0]) == (0, 1)
    v2 = Volume((2, 2, 1), (1, 1, 1), np.zeros(4))
    assert len(build_edges(v2)) == 4


def test_edge_count_3x3x3_vs_enumeration():
    dims = (3, 3, 3)
    v = Volume(dims, (1, 1, 1), np.zeros(27))
    edges = build_edges(v)
    assert len(edges) == 54 == expected_edge_count(dims)
    got = set(zip(edges.i.tolist(), edges.j.tolist()))
    assert got == brute_force_edges(dims)


@pytest.mark.parametrize("dims", [(1, 1, 1), (4, 1, 1), (1, 3, 2), (2, 3, 4)])
def test_edge_enumeration_matches_formula(dims):
    v = Volume(dims, (1, 1, 1), np.zeros(dims[0] * dims[1] * dims[2]))
    edges = build_edges(v)
    assert len(edges) == expected_edge_count(dims)
    assert set(zip(edges.i.tolist(), edges.j.tolist())) == brute_force_edges(dims)


def test_gaussian_weight_values():
    assert gaussian_weight(1.0, 1.0, 50.0) == 1.0
    assert np.isclose(gaussian_weight(0.5, 0.4, 100.0), np.exp(-1.0))
    assert np.isclose(gaussian_weight(0.0, 1.0, 150.0), np.exp(-150.0))


def test_reciprocal_weight_values():
    assert reciprocal_weight(0.7, 0.7, 100.0, 1.0) == 1.0
    assert np.isclose(reciprocal_weight(0.01, 0.0, 100.0, 1.0), 0.5)
    assert np.isclose(reciprocal_weight(0.0, 0.05, 100.0, 1.0), 1.0 / 6.0)


def test_weight_symmetry_and_monotonicity():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert np.allclose(gaussian_weight(a, b, 80.0), gaussian_weight(b, a, 80.0))
    assert np.allclose(
        reciprocal_weight(a, b, 100.0, 1.0), reciprocal_weight(b, a, 100.0, 1.0)
    )
    diffs = np.sort(np.abs(rng.normal(size=50)))
    for fn in (
        lambda d: gaussian_weight(d, 0.0, 60.0),
        lambda d: reciprocal_weight(d, 0.0, 100.0, 1.0),
    ):
        vals = fn(diffs)
        assert np.all(np.diff(vals) <= 1e-15)


def test_weight_config_validation():
    with pytest.raises(ValidationError):
        EdgeWeightConfig("nope", 50.0)
    with pytest.raises(ValidationError):
        EdgeWeightConfig("gaussian", -1.0)
    with pytest.raises(ValidationError):
        EdgeWeightConfig("reciprocal", 100.0)  # missing epsilon


def test_assemble_single_edge():
    edges = EdgeList((2, 1, 1), [0], [1], [0.5])
    lap = assemble_laplacian(edges)
    assert np.allclose(lap.to_dense(), [[0.5, -0.5], [-0.5, 0.5]])


def test_assemble_path_graph_vs_dense_oracle():
    edges = EdgeList((3, 1, 1), [0, 1], [1, 2], [1.0, 1.0])
    lap = assemble_laplacian(edges)
    dense = lap.to_dense()
    assert np.allclose(np.diag(dense), [1.0, 2.0, 1.0])
    assert np.allclose(dense, dense_laplacian_oracle(edges))


def test_laplacian_structure_row_sums_and_psd():
    rng = np.random.default_rng(4)
    for dims in ((4, 4, 4), (3, 2, 4), (2, 2, 2)):
        n = dims[0] * dims[1] * dims[2]
        edges = _grid_edges(dims).with_weights(
            rng.uniform(0.1, 2.0, size=expected_edge_count(dims))
        )
        lap = assemble_laplacian(edges)
        lap.check_structure(tol=1e-10)
        dense = lap.to_dense()
        assert np.allclose(dense, dense_laplacian_oracle(edges))
        assert np.linalg.eigvalsh(dense).min() >= -1e-8


def test_quadratic_form_identity():
    rng = np.random.default_rng(5)
    dims = (4, 4, 4)
    edges = _grid_edges(dims).with_weights(
        rng.uniform(0.1, 2.0, size=expected_edge_count(dims))
    )
    lap = assemble_laplacian(edges)
    n = edges.num_voxels
    for _ in range(100):
        x = rng.normal(size=n)
        direct = float(np.sum(edges.w * (x[edges.i] - x[edges.j]) ** 2))
        assert abs(lap.quad_form(x) - direct) <= 1e-10 * max(1.0, abs(direct))


@pytest.mark.parametrize("dims", [(2, 1, 1), (1, 1, 4), (3, 3, 1), (4, 3, 2)])
def test_grid_structure_matches_scipy_assembly(dims):
    rng = np.random.default_rng(6)
    edges = _grid_edges(dims).with_weights(
        rng.uniform(0.1, 2.0, size=expected_edge_count(dims))
    )
    fast = GridStructure(dims).laplacian(edges.w)
    ref = assemble_laplacian(edges)
    assert np.array_equal(fast.indptr, ref.indptr)
    assert np.array_equal(fast.indices, ref.indices)
    assert np.allclose(fast.data, ref.data, atol=1e-14)


def test_default_bank_composition():
    v = Volume((2, 1, 1), (1, 1, 1), [0.0, 1.0])
    bank = build_default_bank(v)
    assert len(bank) == 4
    kinds = [(t.config.kind, t.config.beta) for t in bank.terms]
    assert kinds == [
        ("gaussian", 50.0),
        ("gaussian", 100.0),
        ("gaussian", 150.0),
        ("reciprocal", 100.0),
    ]
    assert np.isclose(bank.terms[0].edges.w[0], np.exp(-50.0))
    assert np.isclose(bank.terms[3].edges.w[0], 1.0 / 101.0)


def test_default_bank_constant_volume_terms_equal():
    # treated as already normalized; all diffs are zero so every term's
    # weights are exactly 1 (reciprocal has eps=1)
    v = Volume((2, 2, 2), (1, 1, 1), np.full(8, 3.7))
    bank = build_default_bank(v)
    first = bank.terms[0].laplacian.to_dense()
    for term in bank.terms[1:]:
        assert np.allclose(term.laplacian.to_dense(), first)


def test_combined_laplacian_matches_weighted_sum():
    rng = np.random.default_rng(7)
    dims = (3, 2, 2)
    v = Volume(dims, (1, 1, 1), rng.normal(0, 0.2, size=12))
    bank = build_bank(v, default_configs())
    w = rng.uniform(0.0, 2.0, size=4)
    w[1] = 0.0  # exercise the zero-weight skip
    combined = bank.combined(w).to_dense()
    manual = sum(
        wt * t.laplacian.to_dense() for wt, t in zip(w, bank.terms) if wt != 0.0
    )
    assert np.allclose(combined, manual, atol=1e-14)


def test_edge_list_invariants():
    with pytest.raises(ValidationError):
        EdgeList((2, 1, 1), [1], [0], [1.0])  # i >= j
    with pytest.raises(ValidationError):
        EdgeList((2, 1, 1), [0], [1], [-1.0])
    # exact-zero weight allowed (gaussian underflow case)
    EdgeList((2, 1, 1), [0], [1], [0.0])
