"""Datasets: synthetic generators, CSV ingestion, splits and partitions."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .errors import ConfigInvalid, ParseError, SchemaError
from .rng import CounterRNG


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    partition_of: np.ndarray | None = None
    true_params: dict = field(default_factory=dict)
    feature_names: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs must be finite")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=int)
            if y.shape != (len(x),) or not np.all(np.isin(y, (-1, 1))):
                raise ValueError("labels must be a length-N vector in {-1, +1}")
            object.__setattr__(self, "labels", y)
        if self.partition_of is not None:
            p = np.asarray(self.partition_of, dtype=int)
            if p.shape != (len(x),) or np.any(p < 0):
                raise ValueError("partition ids must be non-negative, one per row")
            object.__setattr__(self, "partition_of", p)
        if not self.feature_names:
            object.__setattr__(self, "feature_names",
                               tuple(f"x{i}" for i in range(x.shape[1])))

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            inputs=self.inputs[idx],
            labels=None if self.labels is None else self.labels[idx],
            partition_of=None if self.partition_of is None else self.partition_of[idx],
        )

    def partition_ids(self, k: int) -> np.ndarray:
        """Partition id per row for ``k`` partitions.

        Stored group labels are used when there are exactly ``k`` groups and
        are split round-robin within each group when ``k`` is a multiple of
        the group count.  Otherwise rows are dealt round-robin.
        """
        if not 1 <= k <= self.n:
            raise ConfigInvalid(f"need 1 <= K <= N, got K={k}, N={self.n}")
        if self.partition_of is not None and k > 1:
            groups, dense = np.unique(self.partition_of, return_inverse=True)
            g = len(groups)
            if k == g:
                return dense
            if k % g == 0:
                per = k // g
                out = np.empty(self.n, dtype=int)
                for j in range(g):
                    rows = np.flatnonzero(dense == j)
                    out[rows] = j * per + np.arange(len(rows)) % per
                return out
        return np.arange(self.n) % k


@dataclass(frozen=True)
class ProbitGenConfig:
    N: int = 5000
    D: int = 4
    input_dist: str = "gaussian"
    J: int = 5
    gamma: float = 1.0
    seed: int = 0
    center_scale: float = 3.0
    min_separation: float = 4.0

    def __post_init__(self):
        if self.N < 1 or self.D < 1:
            raise ConfigInvalid("N and D must be >= 1")
        if self.input_dist not in ("gaussian", "mog"):
            raise ConfigInvalid(f"unknown input distribution {self.input_dist!r}")
        if self.input_dist == "mog" and self.J < 2:
            raise ConfigInvalid("mixture inputs need J >= 2")
        if not self.gamma > 0:
            raise ConfigInvalid("gamma must be positive")


@dataclass(frozen=True)
class MoGGenConfig:
    N: int = 200
    D: int = 2
    J: int = 4
    sigma: float = 0.5
    center: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.N < self.J:
            raise ConfigInvalid("need N >= J")
        if self.J < 2 or self.D < 1:
            raise ConfigInvalid("need J >= 2 and D >= 1")
        if not self.sigma > 0:
            raise ConfigInvalid("sigma must be positive")


def _separated_centres(cfg: ProbitGenConfig, rng: CounterRNG) -> np.ndarray:
    for attempt in range(10_000):
        c = cfg.center_scale * rng.child(attempt).normal((cfg.J, cfg.D))
        d = np.sqrt(np.sum((c[:, None] - c[None]) ** 2, axis=-1))
        if np.all(d[np.triu_indices(cfg.J, 1)] >= cfg.min_separation):
            return c
    raise ConfigInvalid("could not place well-separated input clusters; raise center_scale")


def gen_probit(cfg: ProbitGenConfig) -> Dataset:
    """Sample ``theta ~ N(0, gamma I)``, inputs, and probit labels.

    With mixture inputs the generating component of each row is recorded as
    its partition id.
    """
    rng = CounterRNG(cfg.seed, 100)
    theta = math.sqrt(cfg.gamma) * rng.child(1).normal(cfg.D)
    truth = {"theta": theta.tolist()}
    partition_of = None
    if cfg.input_dist == "gaussian":
        x = rng.child(2).normal((cfg.N, cfg.D))
    else:
        centres = _separated_centres(cfg, rng.child(3))
        comp = rng.child(4).choice(np.full(cfg.J, 1.0 / cfg.J), cfg.N)
        x = centres[comp] + rng.child(5).normal((cfg.N, cfg.D))
        partition_of = comp
        truth["centres"] = centres.tolist()
    p = ndtr(x @ theta)
    y = np.where(rng.child(6).uniform(cfg.N) < p, 1, -1)
    return Dataset(x, y, partition_of, truth)


def gen_mog(cfg: MoGGenConfig) -> Dataset:
    """Sample cluster means, uniform assignments and isotropic observations."""
    rng = CounterRNG(cfg.seed, 200)
    means = cfg.center + rng.child(1).normal((cfg.J, cfg.D))
    h = rng.child(2).choice(np.full(cfg.J, 1.0 / cfg.J), cfg.N)
    x = means[h] + cfg.sigma * rng.child(3).normal((cfg.N, cfg.D))
    truth = {"means": means.tolist(), "assignments": h.tolist()}
    return Dataset(x, None, None, truth)


def load_csv(path, label_column: str | None = "label", positive_token: str | None = None,
             standardize: bool = True) -> Dataset:
    """Read a comma-separated file with a header row.

    Every column other than ``label_column`` must be numeric.  Labels are
    mapped to {-1, +1}: rows equal to ``positive_token`` are positive when a
    token is given, otherwise labels must already be {0, 1} or {-1, +1}.
    Pass ``label_column=None`` for unlabeled data.

    Raises
    ------
    ParseError
        Malformed numbers or missing values, with the offending location.
    SchemaError
        Missing label column or labels that are not binary.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("file is empty; a header row is required")
    header = [h.strip() for h in rows[0]]
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if r]
    if label_column is not None and label_column not in header:
        raise SchemaError(f"label column {label_column!r} not in header {header}")
    li = header.index(label_column) if label_column is not None else None
    feats = [i for i in range(len(header)) if i != li]
    x = np.empty((len(body), len(feats)))
    raw_labels = []
    for k, (r, row) in enumerate(body):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=r)
        for j, c in enumerate(feats):
            cell = row[c].strip()
            if cell == "":
                raise ParseError("missing value", row=r, column=header[c])
            try:
                x[k, j] = float(cell)
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", row=r, column=header[c]) from None
            if not math.isfinite(x[k, j]):
                raise ParseError(f"non-finite value {cell!r}", row=r, column=header[c])
        if li is not None:
            cell = row[li].strip()
            if cell == "":
                raise ParseError("missing label", row=r, column=label_column)
            raw_labels.append(cell)
    labels = None
    if li is not None:
        labels = _map_labels(raw_labels, positive_token)
    data = Dataset(x, labels, feature_names=tuple(header[c] for c in feats))
    if standardize:
        data, _ = standardize_split(data)
    return data


def _map_labels(tokens, positive_token):
    if positive_token is not None:
        return np.where(np.array(tokens) == positive_token, 1, -1)
    try:
        values = np.array([float(t) for t in tokens])
    except ValueError:
        raise SchemaError("non-numeric labels need a positive token") from None
    kinds = set(np.unique(values).tolist())
    if kinds <= {0.0, 1.0}:
        return np.where(values == 1.0, 1, -1)
    if kinds <= {-1.0, 1.0}:
        return values.astype(int)
    raise SchemaError(f"labels must be binary {{0,1}} or {{-1,+1}}, found {sorted(kinds)}")


def standardize_split(train: Dataset, test: Dataset | None = None):
    """Zero-mean, unit-variance features using ``train`` statistics only.

    Columns that are constant on ``train`` are dropped from both sets with
    a warning.
    """
    mean = train.inputs.mean(axis=0)
    sd = train.inputs.std(axis=0)
    keep = sd > 0
    if not np.all(keep):
        dropped = [n for n, k in zip(train.feature_names, keep) if not k]
        warnings.warn(f"dropping constant columns: {dropped}", stacklevel=2)
    names = tuple(n for n, k in zip(train.feature_names, keep) if k)

    def apply(d):
        x = (d.inputs[:, keep] - mean[keep]) / sd[keep]
        return replace(d, inputs=x, feature_names=names)

    return apply(train), None if test is None else apply(test)


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; rows keep their original relative order."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigInvalid("test_fraction must lie in (0, 1)")
    n_test = min(max(int(round(data.n * test_fraction)), 1), data.n - 1)
    perm = CounterRNG(seed, 300).permutation(data.n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))
