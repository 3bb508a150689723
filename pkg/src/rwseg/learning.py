"""Max-margin learning of the energy term weights.

The empirical risk of the inferred segmentations is non-convex in the
weights, so training minimizes its convex surrogate: for each sample the
risk is upper-bounded by the energy of the best loss-free segmentation
minus the minimum loss-augmented energy. With the linear disagreement
loss used here, the only zero-loss segmentation is the one-hot ground
truth, so the surrogate collapses to the margin-rescaled hinge

    hinge_k(w) = [ w.psi(x_k, onehot(z_k))
                   - min_y ( w.psi(x_k, y) - loss(z_k, y) ) ]_+

minimized over w >= 0 by projected subgradient descent with an L2
regularizer. Both the plain inference and the loss-augmented inner
minimization run over per-voxel probability simplexes through the
dual-decomposition solver, which keeps every inner problem convex and
makes the bound hold at every iterate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aci
from .errors import SolverError, ValidationError
from .lattice import LaplacianBank, build_default_bank
from .rw_solver import PriorTerm, RWProblem, WeightVector
from .volume import (
    PriorWeighting,
    SeedMap,
    SoftSegmentation,
    load_seed_map,
    load_soft_segmentation,
    load_volume,
    normalize_intensities,
    one_hot,
)


def loss(z, y) -> float:
    """Normalized linear disagreement: (1/N) sum_i (1 - y[i, z_i]).

    Zero exactly when y is the one-hot encoding of z; linear in y so the
    loss-augmented problem stays a convex QP.
    """
    z = np.asarray(z, dtype=np.int64).ravel()
    probs = y.probs if isinstance(y, SoftSegmentation) else np.asarray(y, float)
    if probs.shape[0] != z.size:
        raise ValidationError(
            f"segmentation has {probs.shape[0]} rows but {z.size} labels given"
        )
    return float(np.mean(1.0 - probs[np.arange(z.size), z]))


def feature_map(bank: LaplacianBank, priors, y) -> np.ndarray:
    """Per-term energies: [y^T L_a y for each a] ++ [||y - y_b||^2_Omega_b].

    The dot product of a weight vector with this map equals the full
    energy by construction.
    """
    probs = y.probs if isinstance(y, SoftSegmentation) else np.asarray(y, float)
    feats = np.empty(len(bank.terms) + len(priors))
    for k, term in enumerate(bank.terms):
        feats[k] = term.laplacian.quad_form(probs)
    for k, p in enumerate(priors):
        diff = probs - p.target.probs
        feats[len(bank.terms) + k] = float(
            np.sum(p.weighting.diagonal[:, None] * diff * diff)
        )
    return feats


@dataclass(frozen=True)
class TrainingSample:
    """One (input, hard ground truth) pair with its derived energy terms."""

    bank: LaplacianBank
    ground_truth: np.ndarray
    num_labels: int
    priors: tuple[PriorTerm, ...] = ()
    seeds: SeedMap | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(self.priors))
        z = np.asarray(self.ground_truth, dtype=np.int64).ravel()
        if z.size != self.bank.num_voxels:
            raise ValidationError("ground truth does not cover every voxel")
        if z.min() < 0 or z.max() >= self.num_labels:
            raise ValidationError("ground-truth label out of range")
        object.__setattr__(self, "ground_truth", z)
        if self.seeds is not None:
            self.seeds.validate_for(self.bank.num_voxels)
            mismatch = z[self.seeds.indices] != self.seeds.labels
            if mismatch.any():
                raise ValidationError(
                    "seed labels disagree with the ground truth; the "
                    "zero-loss segmentation would be infeasible"
                )

    @property
    def num_terms(self) -> int:
        return len(self.bank.terms) + len(self.priors)

    def onehot_truth(self) -> SoftSegmentation:
        return one_hot(self.bank.dims, self.ground_truth, self.num_labels)

    def problem(self, w: np.ndarray) -> RWProblem:
        nl = len(self.bank.terms)
        weights = WeightVector(w[:nl], w[nl:])
        return RWProblem(self.bank, weights, self.priors, self.seeds, self.num_labels)

    def features(self, y) -> np.ndarray:
        return feature_map(self.bank, self.priors, y)


@dataclass(frozen=True)
class LearnConfig:
    """Training hyperparameters; lam is the L2 regularization weight."""

    lam: float = 1e-3
    iterations: int = 50
    eta0: float = 1.0
    loss_weight: float = 1.0
    partition_scheme: str = "single"  # single | edge | line
    inner_eta0: float = 1.0
    inner_schedule: str = "adaptive"
    inner_max_iter: int = 2000
    inner_gap_tol: float = 1e-6
    slave_tol: float = 1e-10
    initial_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if self.iterations < 1:
            raise ValidationError("need at least one training iteration")


def _partition_for(sample: TrainingSample, scheme: str) -> aci.Partition:
    edges = sample.bank.terms[0].edges
    if scheme == "single":
        return aci.single_partition(edges)
    return aci.build_partition(edges, scheme)


def _constrained_minimize(sample, w, config, extra_linear=None) -> SoftSegmentation:
    problem = sample.problem(w)
    partition = _partition_for(sample, config.partition_scheme)
    seg, _ = aci.solve_aci(
        problem,
        partition,
        eta0=config.inner_eta0,
        max_iter=config.inner_max_iter,
        gap_tol=config.inner_gap_tol,
        schedule=config.inner_schedule,
        slave_tol=config.slave_tol,
        extra_linear=extra_linear,
    )
    return seg


def infer(sample: TrainingSample, w, config: LearnConfig = LearnConfig()) -> SoftSegmentation:
    """Simplex-constrained minimizer of the energy at weights w."""
    return _constrained_minimize(sample, np.asarray(w, float), config)


def loss_augmented_inference(
    sample: TrainingSample, w, config: LearnConfig = LearnConfig()
) -> SoftSegmentation:
    """argmin over per-voxel simplexes of  w.psi(x, y) - loss(z, y).

    The loss is linear in y, so it folds into the slaves' linear terms:
    minimizing energy - loss equals adding +loss_weight/N at each (i, z_i)
    slot (the constant -loss_weight is dropped inside the solver).
    """
    w = np.asarray(w, float)
    n = sample.bank.num_voxels
    extra = np.zeros((n, sample.num_labels))
    extra[np.arange(n), sample.ground_truth] = config.loss_weight / n
    return _constrained_minimize(sample, w, config, extra_linear=extra)


@dataclass
class TrainTrace:
    iterations: np.ndarray
    objective: np.ndarray
    bound: np.ndarray
    risk: np.ndarray
    hinges: np.ndarray       # (iters, num_samples)
    risks: np.ndarray        # (iters, num_samples)
    weights: np.ndarray      # (iters, num_terms), before each update

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iter,objective,bound,risk\n")
            for t, o, b, r in zip(self.iterations, self.objective, self.bound, self.risk):
                fh.write(f"{int(t)},{float(o)!r},{float(b)!r},{float(r)!r}\n")


def _validate_dataset(dataset):
    if not dataset:
        raise ValidationError("empty training dataset")
    terms = dataset[0].num_terms
    labels = dataset[0].num_labels
    nlap = len(dataset[0].bank.terms)
    for s in dataset:
        if s.num_terms != terms or len(s.bank.terms) != nlap:
            raise ValidationError("inconsistent term counts across the dataset")
        if s.num_labels != labels:
            raise ValidationError("inconsistent label counts across the dataset")
    return nlap, terms


def train(dataset, config: LearnConfig = LearnConfig()):
    """Projected subgradient descent on the regularized hinge objective.

    Returns (WeightVector, TrainTrace). Trace rows hold, for the weights
    at the START of each iteration: the objective lam*||w||^2 + mean
    hinge, the mean hinge (the risk bound), and the mean true risk of the
    plain inference.
    """
    nlap, num_terms = _validate_dataset(dataset)
    if config.initial_weights is not None:
        w = np.asarray(config.initial_weights, dtype=np.float64).copy()
        if w.shape != (num_terms,):
            raise ValidationError(f"initial weights must have length {num_terms}")
    else:
        w = np.ones(num_terms)

    k = len(dataset)
    hist = {key: [] for key in ("obj", "bound", "risk")}
    hinge_rows, risk_rows, weight_rows = [], [], []

    for t in range(config.iterations):
        subgrad = 2.0 * config.lam * w
        hinges = np.zeros(k)
        risks = np.zeros(k)
        for idx, sample in enumerate(dataset):
            truth = sample.onehot_truth()
            feats_truth = sample.features(truth)
            y_aug = loss_augmented_inference(sample, w, config)
            aug_value = float(w @ sample.features(y_aug)) - config.loss_weight * loss(
                sample.ground_truth, y_aug
            )
            hinge = float(w @ feats_truth) - aug_value
            y_plain = infer(sample, w, config)
            risks[idx] = loss(sample.ground_truth, y_plain)
            if hinge > 0.0:
                hinges[idx] = hinge
                subgrad += (feats_truth - sample.features(y_aug)) / k

        objective = config.lam * float(w @ w) + float(hinges.mean())
        hist["obj"].append(objective)
        hist["bound"].append(float(hinges.mean()))
        hist["risk"].append(float(risks.mean()))
        hinge_rows.append(hinges)
        risk_rows.append(risks)
        weight_rows.append(w.copy())

        eta = config.eta0 / (1.0 + t)
        w = np.maximum(w - eta * subgrad, 0.0)
        if w.max() <= 0.0:
            raise SolverError(
                "all weights hit zero after projection; lower eta0 or lambda"
            )

    trace = TrainTrace(
        np.arange(config.iterations),
        np.array(hist["obj"]),
        np.array(hist["bound"]),
        np.array(hist["risk"]),
        np.array(hinge_rows),
        np.array(risk_rows),
        np.array(weight_rows),
    )
    return WeightVector(w[:nlap], w[nlap:]), trace


def save_weights(weights: WeightVector, path) -> None:
    doc = {
        "laplacian_weights": [float(x) for x in weights.laplacian_weights],
        "prior_weights": [float(x) for x in weights.prior_weights],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_weights(path) -> WeightVector:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return WeightVector(
        np.asarray(doc["laplacian_weights"], dtype=np.float64),
        np.asarray(doc.get("prior_weights", []), dtype=np.float64),
    )


def load_training_sample(entry: dict, base: Path) -> TrainingSample:
    """Build a TrainingSample from one manifest entry.

    entry keys: volume (RVOL), labels (RVOL of integer label ids),
    optional seeds (JSON), priors (list of RSEG paths), prior_weightings
    (list of RVOL paths, parallel to priors).
    """
    vol = normalize_intensities(load_volume(base / entry["volume"]))
    bank = build_default_bank(vol)
    z_vol = load_volume(base / entry["labels"])
    if z_vol.dims != vol.dims:
        raise ValidationError("label volume dims do not match the intensity volume")
    z = z_vol.data
    if not np.allclose(z, np.round(z)):
        raise ValidationError("label volume must contain integer label ids")
    z = np.round(z).astype(np.int64)

    seeds = None
    if entry.get("seeds"):
        seeds = load_seed_map(base / entry["seeds"])

    priors = []
    weighting_paths = entry.get("prior_weightings") or []
    for k, prior_path in enumerate(entry.get("priors") or []):
        target = load_soft_segmentation(base / prior_path)
        if k < len(weighting_paths) and weighting_paths[k]:
            weighting = PriorWeighting.from_volume(load_volume(base / weighting_paths[k]))
        else:
            weighting = PriorWeighting.uniform(target.num_voxels)
        priors.append(PriorTerm(target, weighting))

    num_labels = entry.get("num_labels")
    if num_labels is None:
        if seeds is not None:
            num_labels = seeds.num_labels
        elif priors:
            num_labels = priors[0].target.num_labels
        else:
            num_labels = int(z.max()) + 1
    return TrainingSample(
        bank, z, int(num_labels), tuple(priors), seeds, name=str(entry["volume"])
    )


def load_dataset(manifest_path) -> list[TrainingSample]:
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValidationError("manifest must be a JSON list of sample entries")
    base = manifest_path.parent
    return [load_training_sample(e, base) for e in entries]
