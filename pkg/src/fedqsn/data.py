"""Synthetic tasks, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, InvalidSpec, MissingColumn, ParseError
from .seeding import derive_seed

SYNTHETIC_KINDS = ("linear_regression", "gaussian_clusters")
SCHEMES = ("iid", "dirichlet", "size_skew")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray  # (n, d_out) floats for regression, (n,) int labels for classification

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise InvalidSpec(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.targets) != len(self.inputs):
            raise InvalidSpec("inputs and targets disagree on the number of rows")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def __len__(self) -> int:
        return self.size

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1 and np.issubdtype(self.targets.dtype, np.integer)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx])

    def split(self, sizes: Sequence[int], seed: int) -> list["Dataset"]:
        """Shuffle once and cut into consecutive pieces of the given sizes."""
        if sum(sizes) > self.size:
            raise InvalidSpec(f"cannot take {sum(sizes)} rows from {self.size}")
        order = np.random.default_rng(derive_seed(seed, "split")).permutation(self.size)
        out, pos = [], 0
        for s in sizes:
            out.append(self.subset(np.sort(order[pos : pos + s])))
            pos += s
        return out


@dataclass(frozen=True)
class ClientDataset(Dataset):
    client_id: int = 0
    indices: np.ndarray | None = None  # row indices into the parent dataset


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------

def gen_synthetic(
    kind: str,
    n: int,
    input_dim: int,
    output_dim: int,
    noise_std: float = 0.1,
    seed: int = 0,
    task_seed: int | None = None,
) -> Dataset:
    """Draw a synthetic dataset.

    ``linear_regression``: ``y = x @ A + eps`` with ``x ~ N(0, I)``,
    ``A ~ N(0, 1/input_dim)`` and ``eps ~ N(0, noise_std**2)``.
    ``gaussian_clusters``: ``output_dim`` class centroids ``~ N(0, 4 I)``,
    points drawn around them with std ``1 + noise_std``.

    ``task_seed`` fixes the ground truth (``A`` or the centroids)
    independently of ``seed``, which drives the samples, so several splits
    of the same task can be drawn. It defaults to ``seed``.
    """
    if kind not in SYNTHETIC_KINDS:
        raise InvalidSpec(f"unknown synthetic kind {kind!r}")
    if n < 1 or input_dim < 1 or output_dim < 1:
        raise InvalidSpec("n and dimensions must be positive")
    if noise_std < 0:
        raise InvalidSpec("noise_std must be non-negative")
    truth = np.random.default_rng(derive_seed(seed if task_seed is None else task_seed, kind, "truth"))
    draw = np.random.default_rng(derive_seed(seed, kind, "samples"))

    if kind == "linear_regression":
        coef = truth.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, output_dim))
        x = draw.normal(size=(n, input_dim))
        y = x @ coef + draw.normal(0.0, noise_std, size=(n, output_dim)) if noise_std else x @ coef
        return Dataset(x.astype(np.float32), y.astype(np.float32))

    if output_dim < 2:
        raise InvalidSpec("gaussian_clusters needs at least two classes")
    centroids = truth.normal(0.0, 2.0, size=(output_dim, input_dim))
    labels = draw.integers(0, output_dim, size=n)
    x = centroids[labels] + draw.normal(0.0, 1.0 + noise_std, size=(n, input_dim))
    return Dataset(x.astype(np.float32), labels.astype(np.int64))


def true_coefficients(input_dim: int, output_dim: int, seed: int) -> np.ndarray:
    """The ``A`` matrix ``gen_synthetic('linear_regression', ...)`` uses for ``seed``."""
    truth = np.random.default_rng(derive_seed(seed, "linear_regression", "truth"))
    return truth.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, output_dim))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def load_csv(path, input_columns: Sequence[str], target_columns: Sequence[str], classification: bool = False) -> Dataset:
    """Read a header-first, comma-separated numeric file.

    With ``classification=True`` there must be exactly one target column,
    holding non-negative integer class labels.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        for col in (*input_columns, *target_columns):
            if col not in header:
                raise MissingColumn(f"column {col!r} not in header of {path}")
        x_idx = [header.index(c) for c in input_columns]
        y_idx = [header.index(c) for c in target_columns]
        xs, ys = [], []
        # row 1 is the header, data starts at row 2
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}", f"row {row_no}")
            values = []
            for col_i in x_idx + y_idx:
                try:
                    values.append(float(row[col_i]))
                except ValueError:
                    raise ParseError(
                        f"row {row_no}, column {header[col_i]!r}: not a number: {row[col_i]!r}",
                        f"row {row_no}",
                    ) from None
            if not np.all(np.isfinite(values)):
                raise ParseError(f"row {row_no}: non-finite value", f"row {row_no}")
            xs.append(values[: len(x_idx)])
            ys.append(values[len(x_idx) :])
    if not xs:
        raise EmptyDataset(f"{path} has a header but no data rows")
    x = np.asarray(xs, dtype=np.float32)
    y = np.asarray(ys, dtype=np.float64)
    if classification:
        if y.shape[1] != 1 or np.any(y < 0) or np.any(y != np.round(y)):
            raise ParseError("classification targets must be one column of non-negative integers")
        return Dataset(x, y[:, 0].astype(np.int64))
    return Dataset(x, y.astype(np.float32))


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    scheme: str = "iid"
    seed: int = 0
    alpha: float = 0.5  # dirichlet concentration
    weights: tuple[float, ...] = ()  # size_skew proportions

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.num_clients < 1:
            raise InvalidSpec("num_clients must be >= 1")
        if self.scheme not in SCHEMES:
            raise InvalidSpec(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise InvalidSpec("dirichlet alpha must be > 0")
        if self.scheme == "size_skew":
            if len(self.weights) != self.num_clients:
                raise InvalidSpec("size_skew needs one weight per client")
            if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
                raise InvalidSpec("size_skew weights must be positive and sum to 1")


def largest_remainder(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    props = np.asarray(proportions, dtype=np.float64)
    exact = props / props.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    # stable sort keeps ties in client order
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _repair_empty(assignment: list[np.ndarray], gen: np.random.Generator) -> list[np.ndarray]:
    # Move single rows from the largest client into empty ones.
    assignment = [a.copy() for a in assignment]
    while True:
        sizes = np.array([a.size for a in assignment])
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return assignment
        donor = int(np.argmax(sizes))
        pick = int(gen.integers(sizes[donor]))
        moved = assignment[donor][pick]
        assignment[donor] = np.delete(assignment[donor], pick)
        assignment[int(empty[0])] = np.array([moved], dtype=np.int64)


def partition_indices(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    n, k = dataset.size, spec.num_clients
    if n < k:
        raise InvalidSpec(f"cannot split {n} rows across {k} clients")
    gen = np.random.default_rng(derive_seed(spec.seed, "partition", spec.scheme))

    if spec.scheme == "iid":
        order = gen.permutation(n)
        bounds = np.cumsum(largest_remainder(n, np.ones(k)))[:-1]
        parts = np.split(order, bounds)
    elif spec.scheme == "size_skew":
        order = gen.permutation(n)
        counts = largest_remainder(n, spec.weights)
        parts = np.split(order, np.cumsum(counts)[:-1])
    else:
        if not dataset.is_classification:
            raise InvalidSpec("dirichlet label skew needs integer class labels")
        buckets = [[] for _ in range(k)]
        for label in np.unique(dataset.targets):
            rows = np.flatnonzero(dataset.targets == label)
            rows = rows[gen.permutation(rows.size)]
            props = gen.dirichlet(np.full(k, spec.alpha))
            cuts = np.cumsum(largest_remainder(rows.size, props))[:-1]
            for c, chunk in enumerate(np.split(rows, cuts)):
                buckets[c].append(chunk)
        parts = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]

    parts = _repair_empty([np.asarray(p, dtype=np.int64) for p in parts], gen)
    return [np.sort(p) for p in parts]


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    return [
        ClientDataset(dataset.inputs[idx], dataset.targets[idx], client_id=c, indices=idx)
        for c, idx in enumerate(partition_indices(dataset, spec))
    ]


def aggregation_weights(datasets: Sequence[Dataset]) -> np.ndarray:
    sizes = np.array([d.size for d in datasets], dtype=np.float64)
    return sizes / sizes.sum()
