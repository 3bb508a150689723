"""3D scalar volumes, seed maps and soft segmentations, with bit-exact file I/O.

File formats
------------
RVOL  text header ``RVOL1 nx ny nz sx sy sz\\n`` followed by nx*ny*nz
      little-endian float32 values in x-fastest order.
RSEG  text header ``RSEG1 nx ny nz S\\n`` followed by S*N little-endian
      float64 values, label-fastest per voxel. Probabilities are stored
      at full precision so row normalization survives a round-trip.
seeds JSON ``{"num_labels": S, "seeds": [{"index": i, "label": l}, ...]}``.

Voxel linearization is x-fastest everywhere: index = x + nx*(y + ny*z).
All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

ROW_SUM_TOL = 1e-9


def linear_index(dims, x, y, z):
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def unravel(dims, index):
    nx, ny, _ = dims
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return x, y, z


def _check_dims(dims):
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise ValidationError(f"dims must be three positive integers, got {dims!r}")
    return tuple(int(d) for d in dims)


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid; ``data`` is flat in x-fastest order."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if data.size != self.num_voxels:
            raise ValidationError(
                f"data length {data.size} does not match dims {dims} "
                f"({self.num_voxels} voxels)"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def grid(self) -> np.ndarray:
        """View of the data as a (nz, ny, nx) array."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx)


def normalize_intensities(v: Volume) -> Volume:
    """Divide intensities by their empirical (population) standard deviation.

    The mean is not subtracted: edge weights depend only on intensity
    differences, which are mean-invariant. Idempotent up to rounding
    because the output has unit standard deviation.
    """
    if v.num_voxels < 2:
        raise ValidationError("degenerate volume: need at least 2 voxels")
    std = float(v.data.std())
    if std == 0.0:
        raise ValidationError("degenerate volume: zero intensity standard deviation")
    return Volume(v.dims, v.spacing, v.data / std)


def _format_spacing(value: float) -> str:
    return str(float(value))


def save_volume(v: Volume, path) -> None:
    header = "RVOL1 {} {} {} {} {} {}\n".format(
        *v.dims, *(_format_spacing(s) for s in v.spacing)
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.data.astype("<f4").tobytes())


def _read_header(fh, magic: str, path):
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: malformed header (no newline)")
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != magic:
        raise FormatError(f"{path}: malformed header (expected {magic})")
    return tokens[1:]


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        fields = _read_header(fh, "RVOL1", path)
        if len(fields) != 6:
            raise FormatError(f"{path}: malformed header (expected 6 fields)")
        try:
            nx, ny, nz = (int(t) for t in fields[:3])
            spacing = tuple(float(t) for t in fields[3:])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header ({exc})") from exc
        if min(nx, ny, nz) < 1:
            raise FormatError(f"{path}: malformed header (non-positive dims)")
        n = nx * ny * nz
        payload = fh.read()
    if len(payload) != 4 * n:
        raise FormatError(
            f"{path}: payload mismatch (expected {4 * n} bytes, got {len(payload)})"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values in payload")
    return Volume((nx, ny, nz), spacing, data)


@dataclass(frozen=True)
class SeedMap:
    """Deterministic label assignments: linear voxel index -> label id.

    Entries are kept sorted by index so serialization is canonical.
    """

    num_labels: int
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValidationError("num_labels must be at least 2")
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        lab = np.asarray(self.labels, dtype=np.int64).ravel()
        if idx.size != lab.size:
            raise ValidationError("seed indices and labels differ in length")
        order = np.argsort(idx, kind="stable")
        idx, lab = idx[order], lab[order]
        if idx.size and (np.diff(idx) == 0).any():
            raise ValidationError("duplicate seed indices")
        if idx.size and idx[0] < 0:
            raise ValidationError("negative seed index")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_labels):
            raise ValidationError("seed label out of range")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return int(self.indices.size)

    def validate_for(self, num_voxels: int) -> None:
        if len(self) and self.indices.max() >= num_voxels:
            raise ValidationError(
                f"seed index {int(self.indices.max())} out of range "
                f"for {num_voxels} voxels"
            )


def save_seed_map(seeds: SeedMap, path) -> None:
    doc = {
        "num_labels": seeds.num_labels,
        "seeds": [
            {"index": int(i), "label": int(l)}
            for i, l in zip(seeds.indices, seeds.labels)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_seed_map(path) -> SeedMap:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        entries = doc["seeds"]
        num_labels = int(doc["num_labels"])
        indices = [int(e["index"]) for e in entries]
        labels = [int(e["label"]) for e in entries]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed seed document ({exc})") from exc
    try:
        return SeedMap(num_labels, np.array(indices), np.array(labels))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class SoftSegmentation:
    """Per-voxel probability rows over S labels; rows live on the simplex."""

    dims: tuple[int, int, int]
    num_labels: int
    probs: np.ndarray  # (N, S)

    def __post_init__(self):
        dims = _check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        if self.num_labels < 2:
            raise ValidationError("num_labels must be at least 2")
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        n = dims[0] * dims[1] * dims[2]
        if probs.shape != (n, self.num_labels):
            raise ValidationError(
                f"probability array shape {probs.shape} does not match "
                f"({n}, {self.num_labels})"
            )
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValidationError("probabilities outside [0, 1]")
        sums = probs.sum(axis=1)
        if probs.size and np.abs(sums - 1.0).max() > ROW_SUM_TOL:
            raise ValidationError("row not normalized")
        object.__setattr__(self, "probs", probs)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def make_soft(dims, rows, num_labels=None) -> SoftSegmentation:
    """Build a SoftSegmentation from raw rows, clipping negatives and
    renormalizing so the construction invariants hold exactly."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValidationError("rows must be a 2D array")
    if num_labels is None:
        num_labels = rows.shape[1]
    rows = np.clip(rows, 0.0, None)
    sums = rows.sum(axis=1)
    if (sums <= 0.0).any():
        raise ValidationError("cannot normalize a nonpositive probability row")
    return SoftSegmentation(dims, num_labels, rows / sums[:, None])


def one_hot(dims, hard_labels, num_labels) -> SoftSegmentation:
    hard_labels = np.asarray(hard_labels, dtype=np.int64).ravel()
    if hard_labels.size and (hard_labels.min() < 0 or hard_labels.max() >= num_labels):
        raise ValidationError("hard label out of range")
    rows = np.zeros((hard_labels.size, num_labels))
    rows[np.arange(hard_labels.size), hard_labels] = 1.0
    return SoftSegmentation(dims, num_labels, rows)


def save_soft_segmentation(seg: SoftSegmentation, path) -> None:
    header = "RSEG1 {} {} {} {}\n".format(*seg.dims, seg.num_labels)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(seg.probs.astype("<f8").tobytes())


def load_soft_segmentation(path) -> SoftSegmentation:
    with open(path, "rb") as fh:
        fields = _read_header(fh, "RSEG1", path)
        if len(fields) != 4:
            raise FormatError(f"{path}: malformed header (expected 4 fields)")
        try:
            nx, ny, nz, num_labels = (int(t) for t in fields)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header ({exc})") from exc
        n = nx * ny * nz
        payload = fh.read()
    if len(payload) != 8 * n * num_labels:
        raise FormatError(
            f"{path}: payload mismatch (expected {8 * n * num_labels} bytes, "
            f"got {len(payload)})"
        )
    rows = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    rows = rows.reshape(n, num_labels)
    try:
        return SoftSegmentation((nx, ny, nz), num_labels, rows)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class PriorWeighting:
    """Per-voxel nonnegative diagonal weighting for a prior term."""

    diagonal: np.ndarray

    def __post_init__(self):
        diag = np.ascontiguousarray(self.diagonal, dtype=np.float64).ravel()
        if not np.all(np.isfinite(diag)):
            raise ValidationError("prior weighting contains non-finite values")
        if diag.size and diag.min() < 0.0:
            raise ValidationError("prior weighting contains negative values")
        object.__setattr__(self, "diagonal", diag)

    @classmethod
    def uniform(cls, num_voxels: int) -> "PriorWeighting":
        return cls(np.ones(num_voxels))

    @classmethod
    def from_volume(cls, v: Volume) -> "PriorWeighting":
        return cls(v.data)
