"""Prototype InfoNCE losses, softmax loss weighting and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DataError, NumericalError
from .hierfeat import LevelFeatures
from .protobank import PrototypeBank

NEGATIVE_SETS = ("base_and_perturbed", "base_only")


@dataclass
class LevelLossSet:
    losses: list[nc.Tensor]
    classes_present: list[int]

    def values(self) -> list[float]:
        return [l.item() for l in self.losses]


@dataclass(frozen=True)
class WeightState:
    weights: tuple[float, ...]
    gamma: float

    def __post_init__(self) -> None:
        w = np.asarray(self.weights)
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError(f"weights {self.weights} are not on the simplex")


def prototype_info_nce(
    anchors,
    targets,
    base: nc.Tensor,
    perturbed: nc.Tensor,
    tau: float,
    negatives: str = "base_and_perturbed",
) -> nc.Tensor:
    """Mean over anchors of the two-positive InfoNCE term.

    Each anchor's positives are the base and perturbed prototype of its
    target class; every candidate (positives and negatives) shares one
    softmax denominator.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if negatives not in NEGATIVE_SETS:
        raise ConfigError(f"negatives must be one of {NEGATIVE_SETS}")
    anchors = nc.as_tensor(anchors)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = anchors.shape[0], base.shape[0]
    if n == 0:
        raise DataError("InfoNCE over an empty batch")
    if targets.shape != (n,) or targets.min() < 0 or targets.max() >= c:
        raise DataError("targets must index the prototype rows, one per anchor")

    logits = nc.scale(nc.cosine_matrix(anchors, nc.concat([base, perturbed])), 1.0 / tau)
    mask = None
    if negatives == "base_only":
        mask = np.ones((n, 2 * c), dtype=bool)
        mask[:, c:] = False
        mask[np.arange(n), c + targets] = True
    lse = nc.logsumexp(logits, axis=1, mask=mask)
    pos = nc.add(nc.pick(logits, targets), nc.pick(logits, targets + c))
    per_anchor = nc.sub(nc.scale(lse, 2.0), pos)
    return nc.mean(per_anchor)


def info_nce_level1(
    F1,
    labels_1,
    bank: PrototypeBank,
    tau: float,
    perturbed: dict[int, nc.Tensor] | None = None,
    negatives: str = "base_and_perturbed",
) -> nc.Tensor:
    """Level-1 loss: anchors are the per-sample features, averaged over the batch."""
    if isinstance(F1, LevelFeatures):
        F1 = F1.vectors
    pert = perturbed[1] if perturbed is not None else bank.base(1)
    return prototype_info_nce(F1, labels_1, bank.base(1), pert, tau, negatives)


def info_nce_levelk(
    Fk: LevelFeatures,
    bank: PrototypeBank,
    k: int,
    tau: float,
    perturbed: dict[int, nc.Tensor] | None = None,
    negatives: str = "base_and_perturbed",
) -> nc.Tensor:
    """Level-k loss over aggregated class features, averaged over classes present."""
    if k < 2:
        raise ValueError("info_nce_levelk is for levels k >= 2")
    if len(Fk) == 0:
        raise DataError(f"no classes present at level {k}")
    pert = perturbed[k] if perturbed is not None else bank.base(k)
    return prototype_info_nce(Fk.vectors, Fk.keys, bank.base(k), pert, tau, negatives)


def adaptive_weights(losses: Sequence[float], gamma: float) -> WeightState:
    """Softmax of losses / gamma; larger losses get larger weights."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    x = np.asarray([float(l) for l in losses], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite loss in {x.tolist()}")
    z = x / gamma
    e = np.exp(z - z.max())
    w = e / e.sum()
    return WeightState(tuple(float(v) for v in w), gamma)


def total_loss(losses: Sequence[nc.Tensor], weights: Sequence[float] | WeightState) -> nc.Tensor:
    """Sum of weight * loss with the weights held constant."""
    if isinstance(weights, WeightState):
        weights = weights.weights
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    out = nc.scale(losses[0], weights[0])
    for l, w in zip(losses[1:], weights[1:]):
        out = nc.add(out, nc.scale(l, w))
    return out
