"""Learnable per-class prototypes and their bounded-noise perturbed copies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DegenerateVectorError, TaxonomyError
from .taxonomy import Taxonomy

PERTURB_MODES = ("per_step", "static", "off")
MAX_RETRIES = 8


def proto_group(level: int) -> str:
    return f"prototypes-level-{level}"


@dataclass
class PrototypeBank:
    prototypes: dict[int, nc.Parameter]
    epsilon: float = 0.05
    perturb_mode: str = "per_step"
    seed: int = 0
    static_noise: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.perturb_mode not in PERTURB_MODES:
            raise ConfigError(f"perturb_mode must be one of {PERTURB_MODES}")
        if self.perturb_mode == "static" and not self.static_noise and self.active:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5747]))
            self.static_noise = {
                k: rng.uniform(-self.epsilon, self.epsilon, size=p.shape)
                for k, p in sorted(self.prototypes.items())
            }

    @property
    def levels(self) -> list[int]:
        return sorted(self.prototypes)

    @property
    def dim(self) -> int:
        return next(iter(self.prototypes.values())).shape[1]

    @property
    def active(self) -> bool:
        """Whether perturbed copies differ from the base prototypes."""
        return self.perturb_mode != "off" and self.epsilon > 0

    def parameters(self) -> list[nc.Parameter]:
        return [self.prototypes[k] for k in self.levels]

    def base(self, level: int) -> nc.Parameter:
        if level not in self.prototypes:
            raise TaxonomyError(f"no prototypes for level {level} (have {self.levels})")
        return self.prototypes[level]


def init_prototypes(
    tax: Taxonomy,
    d: int,
    seed: int = 0,
    epsilon: float = 0.05,
    perturb_mode: str = "per_step",
    levels: list[int] | None = None,
    prefix: str = "",
) -> PrototypeBank:
    """Standard-normal rows projected onto the unit sphere, one per class.

    ``levels`` restricts the bank to a subset of levels (one tower of the
    single-task ablation owns a single level).
    """
    if d <= 0:
        raise ConfigError("prototype dimension must be positive")
    levels = list(range(1, tax.m + 1)) if levels is None else sorted(levels)
    rng = np.random.default_rng(seed)
    protos = {}
    for k in range(1, tax.m + 1):
        # draw every level so a level's rows do not depend on which subset is kept
        raw = rng.standard_normal((tax.size(k), d))
        if k in levels:
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            protos[k] = nc.Parameter(raw, name=f"{prefix}prototypes.{k}", group=proto_group(k))
    return PrototypeBank(protos, epsilon=epsilon, perturb_mode=perturb_mode, seed=seed)


def draw_noise(bank: PrototypeBank, step_seed: int) -> dict[int, np.ndarray]:
    """Uniform noise in [-eps, eps] for every prototype row (per_step mode)."""
    rng = np.random.default_rng(np.random.SeedSequence([bank.seed, int(step_seed)]))
    return {
        k: rng.uniform(-bank.epsilon, bank.epsilon, size=bank.prototypes[k].shape)
        for k in bank.levels
    }


def _perturb(p: nc.Parameter, delta: np.ndarray, rng: np.random.Generator, eps: float) -> nc.Tensor:
    delta = delta.copy()
    for _ in range(MAX_RETRIES + 1):
        shifted = p.data + delta
        bad = np.linalg.norm(shifted, axis=1) <= nc.NORM_EPS
        if not bad.any():
            return nc.l2_normalize(nc.add(p, delta))
        delta[bad] = rng.uniform(-eps, eps, size=(int(bad.sum()), p.shape[1]))
    raise DegenerateVectorError(f"{p.name}: perturbed prototype stayed degenerate after {MAX_RETRIES} retries")


def perturbed_view(bank: PrototypeBank, step_seed: int = 0) -> dict[int, nc.Tensor]:
    """Perturbed, re-normalized copy of every level's prototypes.

    With perturbation inactive (mode ``off`` or epsilon 0) the view is the
    base parameter itself, so both settings take the identical code path.
    """
    if not bank.active:
        return {k: bank.prototypes[k] for k in bank.levels}
    noise = bank.static_noise if bank.perturb_mode == "static" else draw_noise(bank, step_seed)
    retry_rng = np.random.default_rng(np.random.SeedSequence([bank.seed, int(step_seed), 1]))
    return {
        k: _perturb(bank.prototypes[k], noise[k], retry_rng, bank.epsilon) for k in bank.levels
    }


def prototypes_at(bank: PrototypeBank, level: int, step_seed: int = 0) -> tuple[nc.Tensor, nc.Tensor]:
    """(base, perturbed) matrices for one level, row j = class j."""
    base = bank.base(level)
    if not bank.active:
        return base, base
    return base, perturbed_view(bank, step_seed)[level]
