import numpy as np
import pytest

from helpers import GAUSS100, rand_weighted_edges
from rwseg import learning as L
from rwseg.errors import SolverError, ValidationError
from rwseg.lattice import EdgeList, bank_from_edge_lists
from rwseg.rw_solver import PriorTerm, energy
from rwseg.volume import SeedMap, make_soft, one_hot


def make_sample(rng, dims, num_labels, lap_terms=2, prior=True, seed_frac=0.3):
    n = dims[0] * dims[1] * dims[2]
    weighted = [
        (GAUSS100, rand_weighted_edges(rng, dims, 0.2, 1.2)) for _ in range(lap_terms)
    ]
    bank = bank_from_edge_lists(dims, weighted)
    z = rng.integers(0, num_labels, size=n)
    k = max(1, int(n * seed_frac))
    idx = rng.choice(n, size=k, replace=False)
    seeds = SeedMap(num_labels, idx, z[idx])
    priors = ()
    if prior:
        priors = (
            PriorTerm.uniform(make_soft(dims, rng.dirichlet(np.ones(num_labels), size=n))),
        )
    return L.TrainingSample(bank, z, num_labels, priors, seeds)


def one_voxel_sample(target_rows, z, num_labels=2):
    dims = (1, 1, 1)
    bank = bank_from_edge_lists(dims, [(GAUSS100, EdgeList(dims, [], [], []))])
    priors = (PriorTerm.uniform(make_soft(dims, target_rows)),)
    return L.TrainingSample(bank, [z], num_labels, priors, None)


def test_loss_trivial_values():
    z = np.array([0, 1, 1])
    assert L.loss(z, one_hot((3, 1, 1), z, 2)) == 0.0
    uniform = make_soft((3, 1, 1), np.full((3, 2), 0.5))
    assert np.isclose(L.loss(z, uniform), 0.5)  # 1 - 1/S


def test_loss_single_voxel_hand_value():
    assert np.isclose(L.loss([1], np.array([[0.25, 0.75]])), 0.25)


def test_loss_uniform_general_s():
    z = np.zeros(4, dtype=int)
    uniform = make_soft((4, 1, 1), np.full((4, 3), 1.0 / 3.0))
    assert np.isclose(L.loss(z, uniform), 1.0 - 1.0 / 3.0)


def test_feature_map_constant_rows_zero_laplacian_entries():
    rng = np.random.default_rng(0)
    s = make_sample(rng, (3, 2, 1), 2)
    y = np.tile([0.3, 0.7], (6, 1))
    feats = s.features(y)
    assert np.allclose(feats[:2], 0.0, atol=1e-12)


def test_feature_map_prior_entry_zero_at_target():
    rng = np.random.default_rng(1)
    s = make_sample(rng, (3, 2, 1), 2)
    feats = s.features(s.priors[0].target)
    assert np.isclose(feats[-1], 0.0, atol=1e-12)
    assert (feats >= 0.0).all()


def test_feature_map_hand_computed_two_voxel():
    dims = (2, 1, 1)
    edges = EdgeList(dims, [0], [1], [0.8])
    bank = bank_from_edge_lists(dims, [(GAUSS100, edges)])
    y = np.array([[0.9, 0.1], [0.2, 0.8]])
    feats = L.feature_map(bank, (), y)
    # 0.8 * ((0.9-0.2)^2 + (0.1-0.8)^2)
    assert np.isclose(feats[0], 0.8 * 2 * 0.7**2)


def test_weighted_features_equal_energy():
    rng = np.random.default_rng(2)
    s = make_sample(rng, (3, 3, 1), 2)
    w = rng.uniform(0.1, 1.5, size=s.num_terms)
    y = rng.dirichlet(np.ones(2), size=9)
    assert abs(float(w @ s.features(y)) - energy(s.problem(w), y)) <= 1e-10


def test_compatible_set_collapses_to_one_hot():
    rng = np.random.default_rng(3)
    z = rng.integers(0, 2, size=6)
    truth = one_hot((6, 1, 1), z, 2)
    assert L.loss(z, truth) == 0.0
    for _ in range(100):
        y = rng.dirichlet(np.ones(2), size=6)
        if np.abs(y - truth.probs).max() > 1e-12:
            assert L.loss(z, y) > 0.0


def test_loss_augmented_dominant_prior_returns_truth():
    rng = np.random.default_rng(4)
    dims = (2, 2, 2)
    n = 8
    z = rng.integers(0, 2, size=n)
    bank = bank_from_edge_lists(dims, [(GAUSS100, rand_weighted_edges(rng, dims))])
    prior = PriorTerm.uniform(one_hot(dims, z, 2))
    sample = L.TrainingSample(bank, z, 2, (prior,), None)
    w = np.array([0.2, 500.0])  # prior dominates the loss pull
    y = L.loss_augmented_inference(sample, w)
    assert np.abs(y.probs - prior.target.probs).max() < 1e-2
    # the solver value must not exceed the value at the exact truth point
    val = float(w @ sample.features(y)) - L.loss(z, y)
    val_truth = float(w @ sample.features(sample.onehot_truth()))
    assert val <= val_truth + 1e-9


def test_loss_augmented_tiny_weights_pushes_mass_off_truth():
    sample = one_voxel_sample([[0.5, 0.5]], z=0)
    w = np.array([1.0, 1e-4])
    y = L.loss_augmented_inference(sample, w)
    assert y.probs[0, 0] < 1e-6  # mass concentrated on the wrong label


def test_loss_augmented_matches_grid_search_oracle():
    sample = one_voxel_sample([[0.7, 0.3]], z=0)
    w = np.array([1.0, 0.4])
    y = L.loss_augmented_inference(sample, w)
    got = float(w @ sample.features(y)) - L.loss([0], y)

    grid = np.linspace(0.0, 1.0, 101)
    best = np.inf
    for p in grid:
        rows = np.array([[p, 1.0 - p]])
        val = float(w @ sample.features(rows)) - L.loss([0], rows)
        best = min(best, val)
    assert got <= best + 1e-4


def test_inference_upper_bound_holds_each_iteration():
    rng = np.random.default_rng(5)
    dataset = [make_sample(rng, (3, 2, 1), 2), make_sample(rng, (2, 2, 2), 2)]
    config = L.LearnConfig(lam=1e-3, iterations=6, eta0=0.05)
    _, trace = L.train(dataset, config)
    assert np.all(trace.risks <= trace.hinges + 1e-6)
    assert np.all(trace.bound >= trace.risk - 1e-9)


def test_train_all_hinges_zero_shrinks_weights():
    # constant-label truth (zero laplacian features) with a one-hot prior:
    # the loss-augmented minimizer is the truth itself, every hinge is 0
    # and the objective reduces to the regularizer
    rng = np.random.default_rng(6)
    dims = (2, 2, 1)
    z = np.zeros(4, dtype=int)
    bank = bank_from_edge_lists(dims, [(GAUSS100, rand_weighted_edges(rng, dims))])
    prior = PriorTerm.uniform(one_hot(dims, z, 2))
    sample = L.TrainingSample(bank, z, 2, (prior,), None)
    config = L.LearnConfig(lam=0.05, iterations=6, eta0=0.5)
    weights, trace = L.train([sample], config)
    assert np.allclose(trace.bound, 0.0, atol=1e-9)
    w_norms = np.linalg.norm(trace.weights, axis=1)
    assert np.all(np.diff(w_norms) < 0.0)  # strict shrink toward zero
    assert np.allclose(trace.objective, config.lam * w_norms**2, atol=1e-12)
    assert weights.as_array().max() > 0.0


def test_train_all_zero_weights_is_error():
    rng = np.random.default_rng(7)
    dataset = [make_sample(rng, (3, 3, 1), 2)]
    config = L.LearnConfig(lam=1e-3, iterations=3, eta0=50.0)
    with pytest.raises(SolverError, match="zero"):
        L.train(dataset, config)


def test_subgradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    sample = make_sample(rng, (2, 1, 1), 2, seed_frac=0.5)
    config = L.LearnConfig(lam=1e-2, iterations=1, slave_tol=1e-12)

    def objective(w):
        y_a = L.loss_augmented_inference(sample, w, config)
        aug = float(w @ sample.features(y_a)) - L.loss(sample.ground_truth, y_a)
        hinge = max(0.0, float(w @ sample.features(sample.onehot_truth())) - aug)
        return config.lam * float(w @ w) + hinge

    w0 = np.array([0.7, 0.4, 0.9])
    y_a = L.loss_augmented_inference(sample, w0, config)
    sub = 2 * config.lam * w0 + (
        sample.features(sample.onehot_truth()) - sample.features(y_a)
    )
    h = 1e-5
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        fd = (objective(w0 + e) - objective(w0 - e)) / (2 * h)
        assert abs(fd - sub[d]) < 1e-4


def test_weights_stay_nonnegative():
    rng = np.random.default_rng(9)
    dataset = [make_sample(rng, (3, 2, 1), 2)]
    _, trace = L.train(dataset, L.LearnConfig(lam=1e-3, iterations=10, eta0=0.05))
    assert trace.weights.min() >= 0.0


def test_dataset_validation():
    rng = np.random.default_rng(10)
    with pytest.raises(ValidationError):
        L.train([], L.LearnConfig())
    a = make_sample(rng, (2, 2, 1), 2, lap_terms=2)
    b = make_sample(rng, (2, 2, 1), 2, lap_terms=1)
    with pytest.raises(ValidationError, match="term counts"):
        L.train([a, b], L.LearnConfig())


def test_sample_rejects_seed_truth_mismatch():
    rng = np.random.default_rng(11)
    dims = (2, 1, 1)
    bank = bank_from_edge_lists(dims, [(GAUSS100, rand_weighted_edges(rng, dims))])
    seeds = SeedMap(2, [0], [1])
    with pytest.raises(ValidationError, match="disagree"):
        L.TrainingSample(bank, [0, 0], 2, (), seeds)


def test_trace_csv(tmp_path):
    rng = np.random.default_rng(12)
    _, trace = L.train(
        [make_sample(rng, (2, 2, 1), 2)], L.LearnConfig(lam=1e-3, iterations=4, eta0=0.05)
    )
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iter,objective,bound,risk"
    assert len(lines) == 5


def test_weights_json_roundtrip(tmp_path):
    from rwseg.rw_solver import WeightVector

    w = WeightVector([0.5, 1.5], [0.25])
    path = tmp_path / "w.json"
    L.save_weights(w, path)
    back = L.load_weights(path)
    assert np.array_equal(back.laplacian_weights, w.laplacian_weights)
    assert np.array_equal(back.prior_weights, w.prior_weights)
