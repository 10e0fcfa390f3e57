"""Synthetic sparse logistic-regression instances and sample partitioning.

Every worker regenerates its own shard from a small problem description:
all randomness for sample n comes from a counter-based generator keyed by
(seed, n), so the rows of the dataset do not depend on how the sample range
is split across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

SHARD_MAGIC = b"ADMMDS1"


@dataclass(frozen=True)
class ProblemSpec:
    """Global description of one l1-logistic instance."""

    num_samples: int
    dimension: int
    density: float
    l1_weight: float
    seed: int

    def __post_init__(self):
        if self.num_samples < 1 or self.dimension < 1:
            raise ContractViolation("num_samples and dimension must be >= 1")
        if not (0.0 < self.density <= 1.0):
            raise ContractViolation("density must lie in (0, 1]")
        if self.l1_weight < 0.0:
            raise ContractViolation("l1_weight must be >= 0")
        if self.nnz_per_sample < 1:
            raise ContractViolation("round(density * dimension) must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ContractViolation("seed must fit in 64 unsigned bits")

    @property
    def nnz_per_sample(self) -> int:
        return int(round(self.density * self.dimension))


@dataclass(frozen=True)
class SampleRange:
    """Half-open range [start, end) of global sample indices."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ContractViolation(f"bad sample range [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start


@dataclass
class LocalDataset:
    """One worker's shard in CSR layout with +-1 labels.

    Every row holds the same number of nonzeros, so the CSR arrays can be
    viewed as (rows, nnz) matrices; the kernels exploit that.
    """

    dim: int
    row_offsets: np.ndarray  # int64, len rows+1
    col_indices: np.ndarray  # int32, sorted within each row
    values: np.ndarray  # float64
    labels: np.ndarray  # int8, entries in {-1, +1}

    @property
    def num_rows(self) -> int:
        return len(self.labels)

    @property
    def nnz_per_row(self) -> int:
        return 0 if self.num_rows == 0 else int(self.row_offsets[1] - self.row_offsets[0])

    def col_matrix(self) -> np.ndarray:
        return self.col_indices.reshape(self.num_rows, self.nnz_per_row)

    def value_matrix(self) -> np.ndarray:
        return self.values.reshape(self.num_rows, self.nnz_per_row)

    @classmethod
    def empty(cls, dim: int) -> "LocalDataset":
        return cls(
            dim=dim,
            row_offsets=np.zeros(1, dtype=np.int64),
            col_indices=np.zeros(0, dtype=np.int32),
            values=np.zeros(0),
            labels=np.zeros(0, dtype=np.int8),
        )


def partition(num_samples: int, num_workers: int, worker: int) -> SampleRange:
    """Contiguous range of samples owned by worker `worker` (1-based).

    The first num_samples % num_workers workers get one extra sample, so the
    ranges tile [0, num_samples) with imbalance at most 1.
    """
    if not (1 <= worker <= num_workers <= num_samples):
        raise ContractViolation(
            f"need 1 <= worker ({worker}) <= num_workers ({num_workers}) <= num_samples ({num_samples})"
        )
    base, rem = divmod(num_samples, num_workers)
    start = (worker - 1) * base + min(worker - 1, rem)
    size = base + (1 if worker <= rem else 0)
    return SampleRange(start, start + size)


def _sample_rng(seed: int, n: int) -> np.random.Generator:
    # Counter-based generator keyed by (seed, sample index): sample n is
    # reproducible in isolation, independent of which worker draws it.
    return np.random.Generator(np.random.Philox(key=np.array([seed, n], dtype=np.uint64)))


def generate_shard(spec: ProblemSpec, sample_range: SampleRange) -> LocalDataset:
    """Generate the samples in `sample_range` of the instance `spec`.

    Per sample: the label is +-1 with probability 1/2; nnz feature indices
    are drawn uniformly without replacement; a mean is drawn uniformly from
    [0,1] for positive labels and [-1,0] for negative ones; the nonzero
    values are Normal(mean, 1).
    """
    if sample_range.end > spec.num_samples:
        raise ContractViolation("sample range exceeds num_samples")
    rows = len(sample_range)
    nnz = spec.nnz_per_sample
    cols = np.empty((rows, nnz), dtype=np.int32)
    vals = np.empty((rows, nnz))
    labels = np.empty(rows, dtype=np.int8)
    for i, n in enumerate(range(sample_range.start, sample_range.end)):
        rng = _sample_rng(spec.seed, n)
        b = 1 if rng.random() < 0.5 else -1
        idx = rng.choice(spec.dimension, size=nnz, replace=False)
        nu = rng.random()
        if b < 0:
            nu -= 1.0
        v = rng.normal(nu, 1.0, size=nnz)
        order = np.argsort(idx)
        cols[i] = idx[order]
        vals[i] = v[order]
        labels[i] = b
    return LocalDataset(
        dim=spec.dimension,
        row_offsets=np.arange(0, (rows + 1) * nnz, nnz, dtype=np.int64),
        col_indices=cols.reshape(-1),
        values=vals.reshape(-1),
        labels=labels,
    )


def dump_shard(dataset: LocalDataset, path) -> None:
    """Write a shard as a self-describing little-endian binary file."""
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(
            struct.pack(
                "<QQQ", dataset.dim, dataset.num_rows, len(dataset.col_indices)
            )
        )
        fh.write(dataset.row_offsets.astype("<i8").tobytes())
        fh.write(dataset.col_indices.astype("<i4").tobytes())
        fh.write(dataset.values.astype("<f8").tobytes())
        fh.write(dataset.labels.astype("i1").tobytes())


def load_shard(path) -> LocalDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(SHARD_MAGIC))
        if magic != SHARD_MAGIC:
            raise ContractViolation(f"bad shard magic {magic!r}")
        dim, rows, total = struct.unpack("<QQQ", fh.read(24))
        row_offsets = np.frombuffer(fh.read(8 * (rows + 1)), dtype="<i8").astype(np.int64)
        col_indices = np.frombuffer(fh.read(4 * total), dtype="<i4").astype(np.int32)
        values = np.frombuffer(fh.read(8 * total), dtype="<f8").astype(np.float64)
        labels = np.frombuffer(fh.read(rows), dtype="i1").astype(np.int8)
    return LocalDataset(dim, row_offsets, col_indices, values, labels)
