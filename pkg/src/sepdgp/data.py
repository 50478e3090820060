"""Dataset loading, standardization and train/test splits."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

import numpy as np

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "SEPDGP_DATA_DIR"
REGISTRY_FILE = "registry.json"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    column_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError("X and y have different numbers of rows")
        if self.X.shape[0] < 2:
            raise DataError("a dataset needs at least two rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def D(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.name, self.X[idx], self.y[idx],
                       list(self.column_names))


def load_csv(path, target_column: Union[str, int] = -1, name=None) -> Dataset:
    """Read a headered numeric CSV; the target column becomes ``y``.

    ``target_column`` is a header name or an integer index (negative counts
    from the end). A string that parses as an integer is treated as an index.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if isinstance(target_column, str):
        try:
            target_column = int(target_column)
        except ValueError:
            pass
    if isinstance(target_column, str):
        if target_column not in header:
            raise DataError(f"target column {target_column!r} not in header")
        t = header.index(target_column)
    else:
        t = int(target_column)
        if not -len(header) <= t < len(header):
            raise DataError(f"target index {t} out of range")
        t %= len(header)

    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(
                f"row {i + 2} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise DataError(
                    f"non-numeric cell {cell!r} at row {i + 2}, column "
                    f"{j + 1} ({header[j]})")
            values[i, j] = v
    keep = [j for j in range(len(header)) if j != t]
    return Dataset(name or path.stem, values[:, keep], values[:, t],
                   [header[j] for j in keep])


# bundled registry at the repository root (src layout: <root>/src/sepdgp)
BUNDLED_DATA_DIR = Path(__file__).resolve().parents[2] / "data"


def data_dir():
    """Registry directory: ``$SEPDGP_DATA_DIR`` if set, else the bundled one."""
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else BUNDLED_DATA_DIR


def load_registry(root=None):
    root = Path(root) if root is not None else data_dir()
    reg_path = root / REGISTRY_FILE
    if not reg_path.is_file():
        raise DataError(f"dataset registry not found at {reg_path}")
    with open(reg_path, encoding="utf-8") as fh:
        return json.load(fh)


def load_named(name, root=None) -> Dataset:
    """Load a dataset by registry name (no network access)."""
    root = Path(root) if root is not None else data_dir()
    registry = load_registry(root)
    if name not in registry:
        raise DataError(f"dataset {name!r} is not in the registry")
    entry = registry[name]
    return load_csv(root / entry["path"], entry.get("target", -1), name=name)


@dataclass
class Standardizer:
    input_means: np.ndarray
    input_stds: np.ndarray
    target_mean: float
    target_std: float
    constant_columns: np.ndarray = field(default=None)

    def __post_init__(self):
        self.input_means = np.asarray(self.input_means, dtype=np.float64)
        self.input_stds = np.asarray(self.input_stds, dtype=np.float64)
        self.target_mean = float(self.target_mean)
        self.target_std = float(self.target_std)
        if self.constant_columns is None:
            self.constant_columns = np.zeros(self.input_means.shape, bool)

    @property
    def has_constant_columns(self):
        return bool(np.any(self.constant_columns))

    def transform_inputs(self, X):
        return (np.asarray(X, dtype=np.float64) - self.input_means) / self.input_stds

    def inverse_inputs(self, Xs):
        return np.asarray(Xs) * self.input_stds + self.input_means

    def transform_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_target(self, mean, var=None):
        raw = self.target_mean + self.target_std * np.asarray(mean)
        if var is None:
            return raw
        return raw, self.target_std**2 * np.asarray(var)


def fit_standardizer(train: Dataset) -> Standardizer:
    """Per-column mean and population standard deviation of the training set."""
    means = train.X.mean(axis=0)
    stds = train.X.std(axis=0)
    const = ~(stds > 0)
    if np.any(const):
        logger.warning("constant input columns: %s", np.flatnonzero(const))
        stds = np.where(const, 1.0, stds)
    t_std = float(train.y.std())
    if not t_std > 0:
        logger.warning("constant target")
        t_std = 1.0
    return Standardizer(means, stds, float(train.y.mean()), t_std, const)


def make_splits(dataset_or_n, n_splits: int, train_fraction: float, seed: int):
    """Seeded random train/test index splits.

    Split ``i`` is a permutation drawn from ``default_rng([seed, i])`` so each
    split depends only on ``(seed, i, N)``.
    """
    N = dataset_or_n if isinstance(dataset_or_n, int) else dataset_or_n.N
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must be in (0, 1)")
    n_train = int(math.floor(N * train_fraction))
    if n_train < 1 or n_train >= N:
        raise DataError(f"degenerate split sizes for N={N}")
    splits = []
    for i in range(n_splits):
        perm = np.random.default_rng([seed, i]).permutation(N)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return splits
