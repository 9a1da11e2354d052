"""Closed-loop joint training of encoder and prototypes, plus checkpoints.

One step: encode the batch, build per-level anchors (aggregated class means
or raw sample features), draw the step's perturbed prototypes, compute the
per-level InfoNCE losses, turn the observed losses into weights, backprop
the weighted total with the weights held constant and apply momentum SGD.
"""

from __future__ import annotations

import csv
import io
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import Dataset, batch_iterator
from .encoder import Encoder, EncoderConfig, encode, init_encoder
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evalmetrics import predict_levels
from .hierfeat import hierarchy_features, per_sample
from .objective import (
    WeightState,
    adaptive_weights,
    info_nce_level1,
    info_nce_levelk,
    prototype_info_nce,
    total_loss,
)
from .protobank import PrototypeBank, init_prototypes, perturbed_view
from .taxonomy import Taxonomy, from_dict

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr_encoder: float = 0.01
    lr_proto_level1: float = 0.05
    proto_lr_multiplier: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    gamma: float = 0.5
    epsilon: float = 0.05
    tau: float = 0.1
    weighting: str = "adaptive"  # adaptive | fixed
    fixed_weights: tuple[float, ...] | None = None
    seed: int = 0
    multi_task: bool = True
    feature_aggregation: bool = True
    prototype_perturbation: bool = True
    adaptive_weighting: bool = True
    perturb_mode: str = "per_step"  # per_step | static | off
    aggregation_mode: str = "sample_weighted"  # sample_weighted | child_mean
    negatives: str = "base_and_perturbed"  # base_and_perturbed | base_only
    weight_source: str = "current"  # current | previous
    weight_ema: float = 0.0  # 0 disables loss smoothing before weighting
    hidden_dims: tuple[int, ...] = ()  # linear encoder; see README
    dim: int = 256
    trainable: str = "all"  # all | last_layer

    def __post_init__(self) -> None:
        if self.fixed_weights is not None:
            self.fixed_weights = tuple(float(w) for w in self.fixed_weights)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("lr_encoder", "lr_proto_level1", "proto_lr_multiplier", "gamma", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epsilon < 0:
            raise ConfigError("weight_decay and epsilon must be >= 0")
        if not 0 <= self.weight_ema < 1:
            raise ConfigError("weight_ema must lie in [0, 1)")
        choices = {
            "weighting": ("adaptive", "fixed"),
            "perturb_mode": ("per_step", "static", "off"),
            "aggregation_mode": ("sample_weighted", "child_mean"),
            "negatives": ("base_and_perturbed", "base_only"),
            "weight_source": ("current", "previous"),
            "trainable": ("all", "last_layer"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.fixed_weights is not None:
            w = np.asarray(self.fixed_weights)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"fixed_weights must be nonnegative and sum to 1, got {self.fixed_weights}")

    @property
    def uses_adaptive(self) -> bool:
        return self.weighting == "adaptive" and self.adaptive_weighting

    @property
    def effective_perturb_mode(self) -> str:
        return self.perturb_mode if self.prototype_perturbation else "off"

    def level_weights_fixed(self, m: int) -> tuple[float, ...]:
        if self.fixed_weights is None:
            return tuple([1.0 / m] * m)
        if len(self.fixed_weights) != m:
            raise ConfigError(f"fixed_weights has {len(self.fixed_weights)} entries for {m} levels")
        return self.fixed_weights

    def proto_lr(self, level: int) -> float:
        return self.lr_proto_level1 * self.proto_lr_multiplier ** (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        if self.fixed_weights is not None:
            d["fixed_weights"] = list(self.fixed_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- model ----------------------------------------------------------------------


@dataclass
class Tower:
    """One encoder with the prototypes of the levels it is trained on."""

    encoder: Encoder
    bank: PrototypeBank
    levels: list[int]

    def parameters(self) -> list[nc.Parameter]:
        return self.encoder.parameters() + self.bank.parameters()

    def trainable_parameters(self) -> list[nc.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class Model:
    towers: list[Tower]
    tax: Taxonomy

    @property
    def multi_task(self) -> bool:
        return len(self.towers) == 1

    def parameters(self) -> list[nc.Parameter]:
        return [p for t in self.towers for p in t.parameters()]

    def trainable_parameters(self) -> list[nc.Parameter]:
        return [p for t in self.towers for p in t.trainable_parameters()]


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def build_model(tax: Taxonomy, input_dim: int, config: TrainConfig) -> Model:
    """One shared tower (multi-task) or one independent tower per level."""
    groups = [list(range(1, tax.m + 1))] if config.multi_task else [[k] for k in range(1, tax.m + 1)]
    towers = []
    for t, levels in enumerate(groups):
        prefix = "" if config.multi_task else f"tower{levels[0]}."
        enc_cfg = EncoderConfig(
            input_dim=input_dim,
            hidden_dims=config.hidden_dims,
            output_dim=config.dim,
            seed=_derive_seed(config.seed, 1, t),
            trainable=config.trainable,
        )
        bank = init_prototypes(
            tax,
            config.dim,
            seed=_derive_seed(config.seed, 2, t),
            epsilon=config.epsilon,
            perturb_mode=config.effective_perturb_mode,
            levels=levels,
            prefix=prefix,
        )
        towers.append(Tower(init_encoder(enc_cfg, prefix=prefix + "encoder"), bank, levels))
    return Model(towers, tax)


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    lrs: dict[str, float] = field(default_factory=dict)


def init_optimizer(model: Model, config: TrainConfig) -> OptimizerState:
    lrs = {"encoder": config.lr_encoder}
    for k in range(1, model.tax.m + 1):
        lrs[f"prototypes-level-{k}"] = config.proto_lr(k)
    velocity = {p.name: np.zeros_like(p.data) for p in model.trainable_parameters()}
    return OptimizerState(velocity, lrs)


def sgd_step(
    params: Sequence[nc.Parameter],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """Momentum SGD with L2 weight decay; clears the gradients afterwards."""
    for p in params:
        if p.name not in grads:
            raise NumericalError(f"no gradient reached trainable parameter {p.name}")
    for p in params:
        g = grads[p.name] + config.weight_decay * p.data
        v = state.velocity.setdefault(p.name, np.zeros_like(p.data))
        v *= config.momentum
        v += g
        p.data -= state.lrs[p.group] * v
        p.zero_grad()


# -- training loop --------------------------------------------------------------


@dataclass
class LoopState:
    """Everything besides parameters that a resumed run needs."""

    optimizer: OptimizerState
    step: int = 0
    epoch: int = 0
    prev_losses: list[float] | None = None
    ema_losses: list[float] | None = None


@dataclass
class StepResult:
    losses: list[float]
    weights: WeightState
    total: float
    classes_present: list[int]


@dataclass
class EpochRecord:
    epoch: int
    losses: list[float]
    weights: list[float]
    total: float
    wall_time: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint: Path | None = None

    def to_csv(self, m: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *[f"L_{k}" for k in range(1, m + 1)], *[f"lambda_{k}" for k in range(1, m + 1)], "total"])
        for r in self.records:
            w.writerow([r.epoch, *map(repr, r.losses), *map(repr, r.weights), repr(r.total)])
        return buf.getvalue()


def _level_losses(
    tower: Tower,
    x: np.ndarray,
    labels: np.ndarray,
    tax: Taxonomy,
    config: TrainConfig,
    step_seed: int,
) -> tuple[list[nc.Tensor], list[int]]:
    F1 = encode(tower.encoder, x)
    pert = perturbed_view(tower.bank, step_seed)
    higher = None
    if config.feature_aggregation and max(tower.levels) > 1:
        higher = hierarchy_features(per_sample(F1, labels[:, 0]), labels, tax, config.aggregation_mode)
    losses, present = [], []
    for k in tower.levels:
        try:
            if k == 1:
                loss = info_nce_level1(F1, labels[:, 0], tower.bank, config.tau, pert, config.negatives)
                present.append(len(np.unique(labels[:, 0])))
            elif higher is not None:
                Fk = higher[k - 2]
                loss = info_nce_levelk(Fk, tower.bank, k, config.tau, pert, config.negatives)
                present.append(len(Fk))
            else:
                loss = prototype_info_nce(
                    F1, labels[:, k - 1], tower.bank.base(k), pert[k], config.tau, config.negatives
                )
                present.append(len(np.unique(labels[:, k - 1])))
        except NumericalError as exc:
            raise NumericalError(f"non-finite loss at level {k}: {exc}") from exc
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite loss at level {k}")
        losses.append(loss)
    return losses, present


def _choose_weights(observed: list[float], state: LoopState, config: TrainConfig, m: int) -> WeightState:
    if not config.uses_adaptive:
        return WeightState(config.level_weights_fixed(m), config.gamma)
    source = observed
    if config.weight_source == "previous" and state.prev_losses is not None:
        source = state.prev_losses
    if config.weight_ema > 0:
        if state.ema_losses is None:
            state.ema_losses = list(source)
        else:
            b = config.weight_ema
            state.ema_losses = [b * e + (1 - b) * s for e, s in zip(state.ema_losses, source)]
        source = state.ema_losses
    return adaptive_weights(source, config.gamma)


def train_step(
    x: np.ndarray,
    labels: np.ndarray,
    model: Model,
    config: TrainConfig,
    state: LoopState,
) -> StepResult:
    """One closed-loop update on a batch; advances ``state.step``."""
    tax = model.tax
    if len(x) == 0:
        raise DataError("empty batch")
    m = tax.m
    if model.multi_task:
        tower = model.towers[0]
        step_seed = _derive_seed(config.seed, 3, state.step, 0)
        loss_t, present = _level_losses(tower, x, labels, tax, config, step_seed)
        observed = [l.item() for l in loss_t]
        weights = _choose_weights(observed, state, config, m)
        total = total_loss(loss_t, weights)
        reached = {p.name: p.grad for p in nc.backward(total)}
        sgd_step(tower.trainable_parameters(), reached, state.optimizer, config)
        total_value = total.item()
    else:
        observed, present = [], []
        for t, tower in enumerate(model.towers):
            step_seed = _derive_seed(config.seed, 3, state.step, t)
            (loss,), (cp,) = _level_losses(tower, x, labels, tax, config, step_seed)
            reached = {p.name: p.grad for p in nc.backward(loss)}
            sgd_step(tower.trainable_parameters(), reached, state.optimizer, config)
            observed.append(loss.item())
            present.append(cp)
        # independent towers: uniform weights only summarize the level losses
        weights = WeightState(tuple([1.0 / m] * m), config.gamma)
        total_value = float(np.dot(weights.weights, observed))
    state.prev_losses = observed
    state.step += 1
    return StepResult(observed, weights, total_value, present)


def fit(
    dataset: Dataset,
    tax: Taxonomy,
    config: TrainConfig,
    model: Model | None = None,
    state: LoopState | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> tuple[TrainReport, Model, LoopState]:
    """Run ``config.epochs`` epochs (continuing from ``state`` when given).

    Writes ``checkpoint.npz`` under ``out_dir`` when one is supplied.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if model is None:
        model = build_model(tax, dataset.input_dim, config)
    if state is None:
        state = LoopState(init_optimizer(model, config))
    report = TrainReport()
    start = state.epoch
    for epoch in range(start, start + config.epochs):
        t0 = time.perf_counter()
        steps = []
        for idx in batch_iterator(len(dataset), config.batch_size, config.seed, epoch):
            steps.append(train_step(dataset.features[idx], dataset.labels[idx], model, config, state))
        state.epoch = epoch + 1
        rec = EpochRecord(
            epoch=epoch + 1,
            losses=np.mean([s.losses for s in steps], axis=0).tolist(),
            weights=np.mean([s.weights.weights for s in steps], axis=0).tolist(),
            total=float(np.mean([s.total for s in steps])),
            wall_time=time.perf_counter() - t0,
        )
        report.records.append(rec)
        if log is not None:
            log(rec)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.checkpoint = out / "checkpoint.npz"
        save_checkpoint(model, state, config, report.checkpoint)
    return report, model, state


def features_of(model: Model, x: np.ndarray) -> list[np.ndarray]:
    """Level-1 features from every tower."""
    return [encode(t.encoder, x).data for t in model.towers]


def predict_model(model: Model, x: np.ndarray, mode: str = "per_sample") -> tuple[dict, dict]:
    preds, scores = {}, {}
    for t, f in zip(model.towers, features_of(model, x)):
        p, s = predict_levels(f, t.bank, t.levels, mode)
        preds.update(p)
        scores.update(s)
    return preds, scores


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, state: LoopState, config: TrainConfig, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "taxonomy": model.tax.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "prev_losses": state.prev_losses,
        "ema_losses": state.ema_losses,
        "lrs": state.optimizer.lrs,
        "towers": [
            {
                "levels": t.levels,
                "encoder": {**asdict(t.encoder.config), "hidden_dims": list(t.encoder.config.hidden_dims)},
                "bank": {"epsilon": t.bank.epsilon, "perturb_mode": t.bank.perturb_mode, "seed": t.bank.seed},
            }
            for t in model.towers
        ],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for p in model.parameters():
        arrays[f"param/{p.name}"] = p.data
    for name, v in state.optimizer.velocity.items():
        arrays[f"velocity/{name}"] = v
    for t, tower in enumerate(model.towers):
        for k, noise in tower.bank.static_noise.items():
            arrays[f"static/{t}/{k}"] = noise
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, expect_dim: int | None = None) -> tuple[Model, LoopState, TrainConfig]:
    """Restore (model, loop state, config) bit-exactly."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(meta["config"])
    if expect_dim is not None and config.dim != expect_dim:
        raise CheckpointError(f"dimension mismatch: checkpoint d={config.dim}, expected d={expect_dim}")
    tax = from_dict(meta["taxonomy"])
    towers = []
    for t, tm in enumerate(meta["towers"]):
        prefix = "" if len(meta["towers"]) == 1 else f"tower{tm['levels'][0]}."
        enc = init_encoder(EncoderConfig(**tm["encoder"]), prefix=prefix + "encoder")
        # perturb_mode "off" skips regenerating static noise; stored noise is restored below
        bank = init_prototypes(
            tax, config.dim, seed=tm["bank"]["seed"], epsilon=tm["bank"]["epsilon"],
            perturb_mode="off", levels=tm["levels"], prefix=prefix,
        )
        bank.perturb_mode = tm["bank"]["perturb_mode"]
        bank.static_noise = {
            int(key.split("/")[2]): arrays[key] for key in arrays if key.startswith(f"static/{t}/")
        }
        towers.append(Tower(enc, bank, tm["levels"]))
    model = Model(towers, tax)
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {p.name}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(
                f"dimension mismatch for {p.name}: stored {arrays[key].shape}, expected {p.shape}"
            )
        p.data[...] = arrays[key]
    velocity = {k[len("velocity/"):]: v.copy() for k, v in arrays.items() if k.startswith("velocity/")}
    state = LoopState(
        OptimizerState(velocity, dict(meta["lrs"])),
        step=meta["step"],
        epoch=meta["epoch"],
        prev_losses=meta["prev_losses"],
        ema_losses=meta["ema_losses"],
    )
    return model, state, config
