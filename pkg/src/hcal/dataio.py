"""Datasets, batching and a seeded hierarchical Gaussian generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .taxonomy import Taxonomy, balanced, save_taxonomy


@dataclass(frozen=True)
class Sample:
    id: str
    features: tuple[float, ...]
    labels: tuple[int, ...]


class Dataset:
    """Column-stored samples: ids, (n, input_dim) features, (n, m) labels."""

    def __init__(self, ids: Sequence[str], features: np.ndarray, labels: np.ndarray):
        self.ids = list(ids)
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = len(self.ids)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DataError("ids, features and labels disagree on the number of rows")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], input_dim: int = 0, m: int = 0) -> "Dataset":
        if not samples:
            return cls([], np.zeros((0, input_dim)), np.zeros((0, m), dtype=np.int64))
        return cls(
            [s.id for s in samples],
            np.array([s.features for s in samples], dtype=np.float64),
            np.array([s.labels for s in samples], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.ids[i], tuple(self.features[i].tolist()), tuple(self.labels[i].tolist()))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset([self.ids[i] for i in index], self.features[index], self.labels[index])


def validate_labels(ds: Dataset, tax: Taxonomy) -> None:
    for i in range(len(ds)):
        row = ds.labels[i]
        try:
            bad = tax.first_violation(row.tolist())
        except ValueError as exc:
            raise DataError(f"sample {ds.ids[i]!r}: {exc}") from exc
        if bad is not None:
            k, expected, got = bad
            raise DataError(
                f"sample {ds.ids[i]!r}: inconsistent labels {row.tolist()}, parent of level-{k} "
                f"class {row[k - 1]} is {expected} but level {k + 1} label is {got}"
            )


def load_dataset(path: str | Path, tax: Taxonomy) -> Dataset:
    """Read a JSONL file of ``{"id", "features", "labels"}`` rows."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    samples = []
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                sid, feats, labels = str(row["id"]), row["features"], row["labels"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from exc
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise DataError(f"{path}:{lineno}: sample {sid!r} has {len(feats)} features, expected {dim}")
            samples.append(Sample(sid, tuple(float(f) for f in feats), tuple(int(l) for l in labels)))
    ds = Dataset.from_samples(samples, m=tax.m)
    if len(set(ds.ids)) != len(ds):
        raise DataError(f"{path}: duplicate sample ids")
    if len(ds) and ds.labels.shape[1] != tax.m:
        raise DataError(f"{path}: label tuples have {ds.labels.shape[1]} entries, taxonomy has {tax.m} levels")
    validate_labels(ds, tax)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            row = {"id": ds.ids[i], "features": ds.features[i].tolist(), "labels": ds.labels[i].tolist()}
            fh.write(json.dumps(row) + "\n")


def batch_iterator(n: int | Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Row-index batches of a seeded per-epoch permutation; the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(n) if isinstance(n, Dataset) else int(n)
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C])).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class SynthSpec:
    classes_per_level: tuple[int, ...] = (8, 4, 2)  # finest first
    input_dim: int = 16
    separation: float = 10.0
    sigma: float = 0.5
    per_class: int = 100
    seed: int = 0
    train_fraction: float = 0.8
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.per_class < 1 or self.input_dim < 1:
            raise ConfigError("per_class and input_dim must be positive")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ConfigError("train and test fractions must sum to 1")


def _directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Unit vectors, mutually orthogonal whenever count <= dim."""
    g = rng.standard_normal((dim, max(count, 1)))
    if count <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q[:, :count].T
    return (g / np.linalg.norm(g, axis=0)).T[:count]


def class_means(spec: SynthSpec, tax: Taxonomy, rng: np.random.Generator) -> list[np.ndarray]:
    """Generating mean of every class, finest level first."""
    m = tax.m
    means: list[np.ndarray] = [np.empty(0)] * m
    means[m - 1] = spec.separation * _directions(rng, tax.size(m), spec.input_dim)
    for k in range(m - 1, 0, -1):
        radius = spec.separation / 2 ** (m - k)
        parents = tax.parent_array(k)
        mk = np.empty((tax.size(k), spec.input_dim))
        for p in range(tax.size(k + 1)):
            kids = np.flatnonzero(parents == p)
            mk[kids] = means[k][p] + radius * _directions(rng, len(kids), spec.input_dim)
        means[k - 1] = mk
    return means


def synth_generate(spec: SynthSpec) -> tuple[Dataset, Dataset, Taxonomy]:
    tax = balanced(spec.classes_per_level)
    rng = np.random.default_rng(spec.seed)
    fine_means = class_means(spec, tax, rng)[0]
    n_train = int(round(spec.per_class * spec.train_fraction))
    train_rows, test_rows = [], []
    for c in range(tax.size(1)):
        x = fine_means[c] + spec.sigma * rng.standard_normal((spec.per_class, spec.input_dim))
        chain = tax.chain(c)
        for j in range(spec.per_class):
            row = (f"c{c:03d}_{j:04d}", x[j], chain)
            (train_rows if j < n_train else test_rows).append(row)

    def build(rows):
        if not rows:
            return Dataset([], np.zeros((0, spec.input_dim)), np.zeros((0, tax.m), dtype=np.int64))
        return Dataset([r[0] for r in rows], np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))

    return build(train_rows), build(test_rows), tax


def write_synth(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, tax = synth_generate(spec)
    paths = {"taxonomy": out / "taxonomy.json", "train": out / "train.jsonl", "test": out / "test.jsonl"}
    save_taxonomy(tax, paths["taxonomy"])
    save_dataset(train, paths["train"])
    save_dataset(test, paths["test"])
    return paths
