"""Synthetic phantom generators shared by the test suite."""

from __future__ import annotations

import numpy as np

from rwseg.volume import SeedMap, Volume


def two_class_phantom(dims, mean0=0.0, mean1=1.0, sigma=0.05, split_axis=0, seed=0):
    """Two-region volume split halfway along an axis, gaussian noise per class.

    Returns (Volume, labels) with labels[i] in {0, 1}.
    """
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    ix = np.arange(nx * ny * nz, dtype=np.int64)
    coords = (ix % nx, (ix // nx) % ny, ix // (nx * ny))
    extent = dims[split_axis]
    labels = (coords[split_axis] >= extent // 2).astype(np.int64)
    data = np.where(labels == 0, mean0, mean1) + rng.normal(0.0, sigma, size=ix.size)
    return Volume(dims, (1.0, 1.0, 1.0), data), labels


def blob_indices(dims, center, radius):
    """Linear indices of the cube of given half-width around center."""
    nx, ny, nz = dims
    cx, cy, cz = center
    xs = np.arange(max(0, cx - radius), min(nx, cx + radius + 1))
    ys = np.arange(max(0, cy - radius), min(ny, cy + radius + 1))
    zs = np.arange(max(0, cz - radius), min(nz, cz + radius + 1))
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return (gx + nx * (gy + ny * gz)).ravel()


def two_blob_seeds(dims, num_labels=2, radius=2, split_axis=0):
    """One seed blob per class, centered in each half of the split axis."""
    nx, ny, nz = dims
    centers = []
    for frac in (0.25, 0.75):
        c = [nx // 2, ny // 2, nz // 2]
        c[split_axis] = int(dims[split_axis] * frac)
        centers.append(tuple(c))
    indices = []
    labels = []
    for lab, center in enumerate(centers):
        idx = blob_indices(dims, center, radius)
        indices.append(idx)
        labels.append(np.full(idx.size, lab, dtype=np.int64))
    return SeedMap(num_labels, np.concatenate(indices), np.concatenate(labels))


def dice_scores(pred, truth, num_labels):
    """Per-class Dice overlap between two hard labelings."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    scores = []
    for lab in range(num_labels):
        p = pred == lab
        t = truth == lab
        denom = p.sum() + t.sum()
        scores.append(2.0 * np.logical_and(p, t).sum() / denom if denom else 1.0)
    return np.array(scores)


def dithered_recovery_phantom(dims, jump, dither, seed=0, split_axis=0):
    """Two-region phantom whose intensity differences take exactly two
    magnitudes: ``dither`` inside regions (checkerboard parity) and
    ``jump`` +- ``dither`` across the region boundary.

    Intensities are emitted in "normalized" units (the caller treats the
    volume as already intensity-normalized), so edge-weight exponents are
    exact by construction. Region geometry varies with the RNG seed via a
    random split offset.
    """
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    n = nx * ny * nz
    ix = np.arange(n, dtype=np.int64)
    x, y, z = ix % nx, (ix // nx) % ny, ix // (nx * ny)
    coords = (x, y, z)
    extent = dims[split_axis]
    cut = int(rng.integers(extent // 3, 2 * extent // 3 + 1))
    labels = (coords[split_axis] >= cut).astype(np.int64)
    parity = (x + y + z) % 2
    data = labels * jump + parity * dither
    return Volume(dims, (1.0, 1.0, 1.0), data.astype(np.float64)), labels
