"""MLP feature extractor producing level-1 features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 256
    seed: int = 0
    trainable: str = "all"  # all | last_layer

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError("encoder input_dim and output_dim must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise ConfigError("hidden layer widths must be positive")
        if self.trainable not in ("all", "last_layer"):
            raise ConfigError(f"trainable must be 'all' or 'last_layer', got {self.trainable!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class Encoder:
    config: EncoderConfig
    layers: list[tuple[nc.Parameter, nc.Parameter]] = field(default_factory=list)

    def parameters(self) -> list[nc.Parameter]:
        return [p for layer in self.layers for p in layer]

    def trainable_parameters(self) -> list[nc.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def __call__(self, x) -> nc.Tensor:
        return encode(self, x)


def init_encoder(config: EncoderConfig, prefix: str = "encoder") -> Encoder:
    rng = np.random.default_rng(config.seed)
    dims = config.dims
    n_layers = len(dims) - 1
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        trainable = config.trainable == "all" or i == n_layers - 1
        w = nc.Parameter(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            name=f"{prefix}.{i}.weight",
            group="encoder",
            requires_grad=trainable,
        )
        b = nc.Parameter(
            np.zeros(fan_out), name=f"{prefix}.{i}.bias", group="encoder", requires_grad=trainable
        )
        layers.append((w, b))
    return Encoder(config, layers)


def encode(enc: Encoder, batch_inputs) -> nc.Tensor:
    """Affine + ReLU for every hidden layer, affine only for the last."""
    h = nc.as_tensor(batch_inputs)
    if h.data.ndim != 2 or h.shape[1] != enc.config.input_dim:
        raise ShapeError(
            f"encoder expects (B, {enc.config.input_dim}) inputs, got shape {h.shape}"
        )
    last = len(enc.layers) - 1
    for i, (w, b) in enumerate(enc.layers):
        h = nc.add(nc.matmul(h, w), b)
        if i < last:
            h = nc.relu(h)
    return h
