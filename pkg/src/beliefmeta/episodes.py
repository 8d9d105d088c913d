"""Datasets and N-way K-shot episodes, including multi-query tasks.

A multi-query task shares one labeled support set across several query sets
whose labels stay hidden until :func:`reveal_labels` is called for one of them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .belief import one_hot
from .errors import DatasetParseError, LabelError, SamplingError

OOD_KINDS = ("feature-shift", "feature-scale", "random-rotation")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: tuple = ()
    class_index: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, features, labels) -> "Dataset":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or len(features) != len(labels):
            raise DatasetParseError("features must be (rows, d) and align with labels")
        classes = tuple(dict.fromkeys(labels.tolist()))
        index = {c: np.flatnonzero(labels == c) for c in classes}
        return cls(features, labels, classes, index)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class SamplerConfig:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 2
    queries_per_task: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "q_query", "queries_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    rows: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)


@dataclass(frozen=True)
class QuerySet:
    x: np.ndarray
    rows: np.ndarray
    _y: np.ndarray = field(repr=False)
    labels_revealed: bool = False

    @property
    def y(self) -> np.ndarray:
        if not self.labels_revealed:
            raise LabelError("query-set labels have not been revealed")
        return self._y

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class Task:
    support: LabeledSet
    query_sets: tuple[QuerySet, ...]
    classes: tuple = ()

    @property
    def n_way(self) -> int:
        return self.support.y.shape[1]

    def all_rows(self) -> np.ndarray:
        return np.concatenate([self.support.rows, *[q.rows for q in self.query_sets]])


class LabelBudget:
    """Counts revealed query sets; raises once the limit would be exceeded."""

    def __init__(self, limit: Optional[int] = None, on_charge: Callable[[int], None] | None = None):
        self.limit = limit
        self.used = 0
        self._on_charge = on_charge

    @property
    def remaining(self) -> Optional[int]:
        return None if self.limit is None else self.limit - self.used

    def charge(self, units: int = 1) -> None:
        if self.limit is not None and self.used + units > self.limit:
            raise LabelError(f"label budget of {self.limit} query sets exhausted")
        self.used += units
        if self._on_charge is not None:
            self._on_charge(units)


def class_means(num_classes: int, dim: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_synthetic(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    radius: float,
    noise: float,
    seed: int,
) -> Dataset:
    """Gaussian clusters whose means sit evenly on a circle in the first two dims."""
    if num_classes < 2 or dim < 2 or samples_per_class < 1 or noise < 0:
        raise ValueError("invalid dims: need num_classes >= 2, dim >= 2, samples_per_class >= 1, noise >= 0")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim, radius)
    feats = np.repeat(means, samples_per_class, axis=0)
    feats = feats + noise * rng.standard_normal(feats.shape)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return Dataset.from_arrays(feats, labels)


def load_csv(path: str | Path) -> Dataset:
    """Parse ``label,f0,...,f{d-1}`` rows (UTF-8, LF or CRLF)."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise DatasetParseError(f"{path}: file is empty")
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader)
    if len(header) < 2 or header[0].strip() != "label":
        raise DatasetParseError(f"{path}: row 1: header must start with 'label' and name at least one feature")
    width = len(header)
    feats, labels = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise DatasetParseError(
                f"{path}: row {lineno}: inconsistent width, expected {width} columns, got {len(row)}"
            )
        label = row[0].strip()
        if not label:
            raise DatasetParseError(f"{path}: row {lineno}, column 1: empty label")
        try:
            values = [float(v) for v in row[1:]]
        except ValueError:
            col = next(i for i, v in enumerate(row[1:], start=2) if not _is_float(v))
            raise DatasetParseError(f"{path}: row {lineno}, column {col}: not a number: {row[col - 1]!r}") from None
        feats.append(values)
        labels.append(label)
    if not feats:
        raise DatasetParseError(f"{path}: no data rows")
    return Dataset.from_arrays(np.array(feats), np.array(labels, dtype=object))


def _is_float(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def sample_task(ds: Dataset, cfg: SamplerConfig, rng: np.random.Generator) -> Task:
    n, k, q, j = cfg.n_way, cfg.k_shot, cfg.q_query, cfg.queries_per_task
    if n > ds.num_classes:
        raise SamplingError(f"insufficient samples: {n}-way task but dataset has {ds.num_classes} classes")
    need = k + q * j
    picked = rng.choice(ds.num_classes, size=n, replace=False)
    classes = tuple(ds.classes[i] for i in picked)
    sup_rows, query_rows = [], [[] for _ in range(j)]
    for c in classes:
        pool = ds.class_index[c]
        if len(pool) < need:
            raise SamplingError(
                f"insufficient samples: class {c!r} has {len(pool)} rows, task needs {need}"
            )
        rows = rng.choice(pool, size=need, replace=False)
        sup_rows.append(rows[:k])
        for s in range(j):
            query_rows[s].append(rows[k + s * q:k + (s + 1) * q])
    local = np.arange(n)
    sup_idx = np.concatenate(sup_rows)
    support = LabeledSet(ds.features[sup_idx], one_hot(np.repeat(local, k), n), sup_idx)
    queries = []
    for parts in query_rows:
        idx = np.concatenate(parts)
        queries.append(QuerySet(ds.features[idx], idx, one_hot(np.repeat(local, q), n)))
    return Task(support, tuple(queries), classes)


def reveal_labels(task: Task, index: int, budget: LabelBudget | None = None) -> Task:
    if not 0 <= index < len(task.query_sets):
        raise IndexError(f"query-set index {index} out of range for {len(task.query_sets)} sets")
    if task.query_sets[index].labels_revealed:
        raise LabelError(f"query set {index} is already revealed")
    if budget is not None:
        budget.charge(1)
    sets = list(task.query_sets)
    sets[index] = replace(sets[index], labels_revealed=True)
    return replace(task, query_sets=tuple(sets))


def rotation_matrix(dim: int, magnitude: float, seed: int) -> np.ndarray:
    """Blend of identity and a seeded random orthogonal matrix, re-orthonormalised."""
    t = float(np.clip(magnitude, 0.0, 1.0))
    if t == 0.0:
        return np.eye(dim)
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    blend = (1.0 - t) * np.eye(dim) + t * q
    u, _, vt = np.linalg.svd(blend)
    return u @ vt


def ood_transform(x, kind: str, magnitude: float, seed: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if magnitude < 0:
        raise ValueError("magnitude must be nonnegative")
    if kind == "feature-shift":
        return x + magnitude
    if kind == "feature-scale":
        return x * (1.0 + magnitude)
    if kind == "random-rotation":
        return x @ rotation_matrix(x.shape[-1], magnitude, seed).T
    raise ValueError(f"unknown OOD transform {kind!r}; expected one of {OOD_KINDS}")


def transform_queries(task: Task, kind: str, magnitude: float, seed: int = 0) -> Task:
    sets = tuple(replace(qs, x=ood_transform(qs.x, kind, magnitude, seed)) for qs in task.query_sets)
    return replace(task, query_sets=sets)
