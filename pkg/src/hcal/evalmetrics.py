"""Nearest-prototype hierarchical inference, per-level accuracy and HVR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DataError, DegenerateVectorError, TaxonomyError
from .protobank import PrototypeBank
from .taxonomy import Taxonomy, edge_count_R

PREDICT_MODES = ("per_sample", "batch_grouped")
HVR_NORMS = ("edge_fraction", "paper_eq15")
DEFAULT_HVR_NORM = "edge_fraction"


@dataclass
class PredictionRecord:
    id: str
    pred: tuple[int, ...]
    scores: tuple[float, ...] | None = None


@dataclass
class MetricsReport:
    acc: list[float]
    hvr_edge_fraction: float
    hvr_paper_eq15: float
    violations_by_parent: dict[str, int]
    n: int
    m: int
    R: int
    hvr_default: str = DEFAULT_HVR_NORM
    violations: int = 0

    @property
    def hvr(self) -> float:
        return self.hvr_edge_fraction if self.hvr_default == "edge_fraction" else self.hvr_paper_eq15

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "R": self.R,
            "acc": self.acc,
            "violations": self.violations,
            "hvr": self.hvr,
            "hvr_default": self.hvr_default,
            "hvr_edge_fraction": self.hvr_edge_fraction,
            "hvr_paper_eq15": self.hvr_paper_eq15,
            "violations_by_parent": dict(sorted(self.violations_by_parent.items())),
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm <= nc.NORM_EPS):
        raise DegenerateVectorError("cannot classify a (near) zero feature vector")
    return x / norm


def nearest_prototype(features: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax cosine similarity per row (first index wins ties) and its score."""
    sims = _unit_rows(np.asarray(features, dtype=np.float64)) @ _unit_rows(np.asarray(prototypes)).T
    idx = np.argmax(sims, axis=1)
    return idx, sims[np.arange(len(idx)), idx]


def _group_means(features: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Each row replaced by the mean of all rows in its group."""
    uniq, inv = np.unique(groups, return_inverse=True)
    sums = np.zeros((len(uniq), features.shape[1]))
    np.add.at(sums, inv, features)
    return (sums / np.bincount(inv)[:, None])[inv]


def predict_levels(
    features_1,
    bank: PrototypeBank,
    levels: Sequence[int],
    mode: str = "per_sample",
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Predicted class and similarity per level for the given levels."""
    if mode not in PREDICT_MODES:
        raise ValueError(f"predict mode must be one of {PREDICT_MODES}")
    f1 = features_1.data if isinstance(features_1, nc.Tensor) else np.asarray(features_1, dtype=np.float64)
    preds, scores = {}, {}
    current = f1
    prev_level = None
    for k in sorted(levels):
        if mode == "batch_grouped" and prev_level is not None:
            current = _group_means(current, preds[prev_level])
        preds[k], scores[k] = nearest_prototype(current, bank.base(k).data)
        prev_level = k
    return preds, scores


def predict(
    features_1,
    bank: PrototypeBank,
    tax: Taxonomy,
    mode: str = "per_sample",
    ids: Sequence[str] | None = None,
) -> list[PredictionRecord]:
    preds, scores = predict_levels(features_1, bank, range(1, tax.m + 1), mode)
    return records_from_arrays(preds, scores, tax.m, ids)


def records_from_arrays(preds: dict[int, np.ndarray], scores, m: int, ids=None) -> list[PredictionRecord]:
    n = len(preds[1])
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    table = np.stack([preds[k] for k in range(1, m + 1)], axis=1)
    score_table = None if scores is None else np.stack([scores[k] for k in range(1, m + 1)], axis=1)
    return [
        PredictionRecord(
            ids[i],
            tuple(int(v) for v in table[i]),
            None if score_table is None else tuple(float(v) for v in score_table[i]),
        )
        for i in range(n)
    ]


def _pred_array(preds) -> np.ndarray:
    if isinstance(preds, np.ndarray):
        return preds.astype(np.int64)
    return np.array([p.pred for p in preds], dtype=np.int64)


def align(preds: Sequence[PredictionRecord], truths: dict[str, Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """(predicted, true) label tables in prediction order; ids must match exactly."""
    pred_ids = [p.id for p in preds]
    if len(set(pred_ids)) != len(pred_ids):
        raise DataError("duplicate ids in predictions")
    if set(pred_ids) != set(truths):
        missing = sorted(set(truths) - set(pred_ids))[:3]
        extra = sorted(set(pred_ids) - set(truths))[:3]
        raise DataError(f"prediction ids do not match truths (missing {missing}, unexpected {extra})")
    return _pred_array(preds), np.array([truths[i] for i in pred_ids], dtype=np.int64)


def accuracy_at(preds, truths, level: int) -> float:
    """Fraction of samples whose level-k prediction equals the truth."""
    p, t = _pred_array(preds), np.asarray(truths, dtype=np.int64)
    if p.shape[0] == 0:
        raise DataError("accuracy of an empty prediction set")
    if p.shape != t.shape:
        raise DataError(f"predictions {p.shape} and truths {t.shape} are misaligned")
    return float(np.mean(p[:, level - 1] == t[:, level - 1]))


def violation_mask(preds, tax: Taxonomy) -> np.ndarray:
    """(n, m-1) booleans: column k-2 flags parent(pred^{k-1}) != pred^k."""
    p = _pred_array(preds)
    if tax.m < 2:
        raise TaxonomyError("HVR is undefined for a single-level taxonomy")
    if p.ndim != 2 or p.shape[1] != tax.m:
        raise DataError(f"prediction tuples must have {tax.m} entries")
    cols = [tax.parent_array(k)[p[:, k - 1]] != p[:, k] for k in range(1, tax.m)]
    return np.stack(cols, axis=1)


def hvr(preds, tax: Taxonomy, normalization: str = DEFAULT_HVR_NORM) -> float:
    """Hierarchical violation rate.

    ``edge_fraction`` divides the violation count by n * (m - 1), the number
    of predicted parent-child edges; ``paper_eq15`` divides by n * R where R
    sums the class counts of levels 1..m-1.
    """
    if normalization not in HVR_NORMS:
        raise ValueError(f"normalization must be one of {HVR_NORMS}")
    mask = violation_mask(preds, tax)
    n = mask.shape[0]
    if n == 0:
        raise DataError("HVR of an empty prediction set")
    v = int(mask.sum())
    if normalization == "edge_fraction":
        return v / (n * (tax.m - 1))
    return v / (n * edge_count_R(tax))


def metrics_report(preds, truths, tax: Taxonomy, hvr_default: str = DEFAULT_HVR_NORM) -> MetricsReport:
    """All per-level accuracies, both HVR normalizations and a per-parent breakdown.

    ``violations_by_parent`` is keyed by the expected parent (the parent of
    the predicted child) as ``"L<level>:<index>"``.
    """
    if isinstance(truths, dict):
        p, t = align(preds, truths)
    else:
        p, t = _pred_array(preds), np.asarray(truths, dtype=np.int64)
    if hvr_default not in HVR_NORMS:
        raise ValueError(f"hvr_default must be one of {HVR_NORMS}")
    acc = [accuracy_at(p, t, k) for k in range(1, tax.m + 1)]
    by_parent: dict[str, int] = {}
    violations = 0
    if tax.m >= 2:
        mask = violation_mask(p, tax)
        violations = int(mask.sum())
        for k in range(1, tax.m):
            expected = tax.parent_array(k)[p[:, k - 1]][mask[:, k - 1]]
            for c, cnt in zip(*np.unique(expected, return_counts=True)):
                by_parent[f"L{k + 1}:{int(c)}"] = int(cnt)
        e_frac, e15 = hvr(p, tax, "edge_fraction"), hvr(p, tax, "paper_eq15")
    else:
        e_frac = e15 = 0.0
    return MetricsReport(
        acc=acc,
        hvr_edge_fraction=e_frac,
        hvr_paper_eq15=e15,
        violations_by_parent=by_parent,
        n=int(p.shape[0]),
        m=tax.m,
        R=edge_count_R(tax),
        hvr_default=hvr_default,
        violations=violations,
    )


def write_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            row = {"id": r.id, "pred": list(r.pred)}
            if r.scores is not None:
                row["scores"] = list(r.scores)
            fh.write(json.dumps(row) + "\n")


def read_predictions(path: str | Path, m: int | None = None) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rec = PredictionRecord(str(row["id"]), tuple(int(v) for v in row["pred"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed prediction row ({exc})") from exc
            if m is not None and len(rec.pred) != m:
                raise DataError(f"{path}:{lineno}: prediction has {len(rec.pred)} levels, expected {m}")
            out.append(rec)
    return out


def write_metrics(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
