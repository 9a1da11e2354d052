"""Label-driven aggregation of level-1 features into higher-level class features.

A parent-level vector is the mean of its members. Two weightings are
available: ``sample_weighted`` averages all samples beneath the parent
(children contribute in proportion to their member counts), ``child_mean``
averages the child class vectors with equal weight. Means are formed as a
constant averaging matrix times the feature rows, so gradients reach the
level-1 features unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DataError, TaxonomyError
from .taxonomy import Taxonomy

MODES = ("sample_weighted", "child_mean")


@dataclass
class LevelFeatures:
    level: int
    kind: str  # per_sample | per_class
    vectors: nc.Tensor
    # sample positions (per_sample) or class indices (per_class), one per row
    keys: np.ndarray
    # class index of every row at ``level``
    classes: np.ndarray
    member_counts: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(k): self.vectors.data[i] for i, k in enumerate(self.keys)}


def per_sample(features, labels_1, level: int = 1) -> LevelFeatures:
    """Wrap a (n, d) feature matrix with each sample's class at ``level``."""
    f = nc.as_tensor(features)
    labels_1 = np.asarray(labels_1, dtype=np.int64)
    if labels_1.shape != (f.shape[0],):
        raise DataError(f"{f.shape[0]} feature rows but {labels_1.shape} labels")
    n = f.shape[0]
    return LevelFeatures(level, "per_sample", f, np.arange(n), labels_1, np.ones(n, dtype=np.int64))


def _group_index(labels: np.ndarray, num_classes: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Sorted distinct labels and, for each row, its group position."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DataError("labels must be one-dimensional")
    if num_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise DataError(f"label {bad} out of range for a level with {num_classes} classes")
    uniq, inverse = np.unique(labels, return_inverse=True)
    return uniq, inverse.reshape(-1)


def partition_by_level(features: LevelFeatures, labels_k, num_classes: int | None = None) -> dict[int, nc.Tensor]:
    """Split the rows of ``features`` into groups sharing a level-k label."""
    labels_k = np.asarray(labels_k, dtype=np.int64)
    if labels_k.shape != (len(features),):
        raise DataError(f"{len(features)} feature rows but {labels_k.shape} labels")
    uniq, inverse = _group_index(labels_k, num_classes)
    return {int(c): nc.take_rows(features.vectors, np.flatnonzero(inverse == g)) for g, c in enumerate(uniq)}


def _averaging_matrix(inverse: np.ndarray, weights: np.ndarray, n_groups: int) -> np.ndarray:
    w = np.zeros((n_groups, inverse.size))
    w[inverse, np.arange(inverse.size)] = weights
    w /= w.sum(axis=1, keepdims=True)
    return w


def aggregate_level(
    features_lower: LevelFeatures,
    labels_k,
    mode: str = "sample_weighted",
    num_classes: int | None = None,
) -> LevelFeatures:
    """Per-class features one level up.

    ``labels_k`` is aligned with the rows of ``features_lower``: the parent
    label of each sample (per_sample input) or of each class row (per_class
    input).
    """
    if mode not in MODES:
        raise ValueError(f"aggregation mode must be one of {MODES}, got {mode!r}")
    labels_k = np.asarray(labels_k, dtype=np.int64)
    if labels_k.shape != (len(features_lower),):
        raise DataError(f"{len(features_lower)} feature rows but {labels_k.shape} labels")
    if len(features_lower) == 0:
        raise DataError("cannot aggregate an empty feature set")
    uniq, inverse = _group_index(labels_k, num_classes)
    counts = np.bincount(inverse, weights=features_lower.member_counts, minlength=len(uniq))
    vectors = features_lower.vectors

    if mode == "sample_weighted":
        weights = features_lower.member_counts.astype(np.float64)
    elif features_lower.kind == "per_class":
        weights = np.ones(len(features_lower))
    else:
        # collapse samples to their own classes first, then average those equally
        child_ids, child_inv = np.unique(features_lower.classes, return_inverse=True)
        child_inv = child_inv.reshape(-1)
        vectors = nc.matmul(
            _averaging_matrix(child_inv, np.ones(child_inv.size), len(child_ids)), vectors
        )
        child_parent = np.empty(len(child_ids), dtype=np.int64)
        child_parent[child_inv] = labels_k
        if np.any(child_parent[child_inv] != labels_k):
            raise DataError("samples of one class carry different parent labels")
        uniq, inverse = _group_index(child_parent, num_classes)
        weights = np.ones(len(child_ids))

    agg = nc.matmul(_averaging_matrix(inverse, weights, len(uniq)), vectors)
    return LevelFeatures(
        features_lower.level + 1,
        "per_class",
        agg,
        uniq,
        uniq.copy(),
        counts.astype(np.int64),
    )


def check_labels(labels: np.ndarray, tax: Taxonomy) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] != tax.m:
        raise DataError(f"label array must have shape (n, {tax.m}), got {labels.shape}")
    for k in range(1, tax.m + 1):
        col = labels[:, k - 1]
        if col.size and (col.min() < 0 or col.max() >= tax.size(k)):
            raise DataError(f"label out of range at level {k}")
    for k in range(1, tax.m):
        bad = np.flatnonzero(tax.parent_array(k)[labels[:, k - 1]] != labels[:, k])
        if bad.size:
            i = int(bad[0])
            raise TaxonomyError(
                f"inconsistent label tuple {labels[i].tolist()} at row {i}: "
                f"parent of level-{k} class {labels[i, k - 1]} is not {labels[i, k]}"
            )
    return labels


def hierarchy_features(
    F1: LevelFeatures, labels, tax: Taxonomy, mode: str = "sample_weighted"
) -> list[LevelFeatures]:
    """Aggregated per-class features for levels 2..m of one batch."""
    labels = check_labels(labels, tax)
    if labels.shape[0] != len(F1):
        raise DataError(f"{len(F1)} feature rows but {labels.shape[0]} label tuples")
    out: list[LevelFeatures] = []
    current = F1
    for k in range(2, tax.m + 1):
        if current.kind == "per_sample":
            parents = labels[:, k - 1]
        else:
            parents = tax.parent_array(k - 1)[current.keys]
        current = aggregate_level(current, parents, mode, num_classes=tax.size(k))
        out.append(current)
    return out
