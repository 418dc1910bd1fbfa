"""Configuration dataclasses shared by the model, trainer and CLI."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

BACKENDS = ("RNN", "LSTM", "GRU", "SelectiveSSM")
QUANT_MODES = ("hierarchical", "flat", "continuous")
K_GRID = (8, 16, 32, 64, 128)


class ConfigError(ValueError):
    pass


@dataclass
class WindowSpec:
    W: int = 100
    stride: int | None = None

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.W
        if self.W < 2:
            raise ConfigError(f"window length must be >= 2, got {self.W}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    dropout: float = 0.0
    ff_mult: int = 4
    positional: bool = True
    # "spatial" gates ROIs from the spatial branch; "temporal" reproduces the literal text
    spatial_gate_source: str = "spatial"

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("encoder layers and heads must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.spatial_gate_source not in ("spatial", "temporal"):
            raise ConfigError(f"unknown spatial_gate_source {self.spatial_gate_source!r}")


@dataclass
class SsmConfig:
    backend: str = "SelectiveSSM"
    hidden: int = 256
    layers: int = 2
    linear_state_head: bool = False
    a_scale: float = 1.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("hidden and layers must be >= 1")


@dataclass
class QuantizerConfig:
    state_codes: int = 8
    transition_codes: int = 8
    state_residual_codes: int | None = None
    transition_residual_codes: int | None = None
    gamma: float = 0.99
    mode: str = "hierarchical"
    revival: bool = True
    # route the transition residual through the state residual codebook, as written
    literal_transition_residual: bool = False

    def __post_init__(self):
        if self.state_residual_codes is None:
            self.state_residual_codes = self.state_codes
        if self.transition_residual_codes is None:
            self.transition_residual_codes = self.transition_codes
        for k in (self.state_codes, self.transition_codes,
                  self.state_residual_codes, self.transition_residual_codes):
            if k < 2:
                raise ConfigError(f"codebook size must be >= 2, got {k}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.mode not in QUANT_MODES:
            raise ConfigError(f"unknown quantizer mode {self.mode!r}")


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    dropout: float = 0.0
    ff_mult: int = 4


@dataclass
class ModelConfig:
    n_rois: int = 16
    window: int = 100
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssm: SsmConfig = field(default_factory=SsmConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.n_rois % self.encoder.heads:
            raise ConfigError(f"n_rois={self.n_rois} not divisible by encoder heads={self.encoder.heads}")
        if self.window % self.encoder.heads:
            raise ConfigError(f"window={self.window} not divisible by encoder heads={self.encoder.heads}")
        if (2 * self.ssm.hidden) % self.decoder.heads:
            raise ConfigError(f"decoder width {2 * self.ssm.hidden} not divisible by heads={self.decoder.heads}")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma_loss: float = 0.1
    commitment: float = 0.25

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_loss", "commitment"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")


@dataclass
class TrainConfig:
    phase1_steps: int = 4000
    phase2_epochs: int = 200
    learning_rate: float = 2e-4
    phase2_learning_rate: float | None = None
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "Adam"
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    # "quantized": mean of concatenated quantized embeddings; "continuous": pre-quantization (o, h)
    classifier_pooling: str = "quantized"
    classifier_widths: tuple[int, ...] = (256, 64)
    n_classes: int = 2

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_epochs < 0:
            raise ConfigError("step/epoch counts must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning_rate and batch_size must be positive")
        if self.optimizer != "Adam":
            raise ConfigError(f"only Adam is supported, got {self.optimizer!r}")
        if self.classifier_pooling not in ("quantized", "continuous"):
            raise ConfigError(f"unknown classifier_pooling {self.classifier_pooling!r}")
        self.classifier_widths = tuple(self.classifier_widths)


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict[str, Any]):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown field {key!r} for {cls.__name__}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_NESTED = {
    (ModelConfig, "encoder"): EncoderConfig,
    (ModelConfig, "ssm"): SsmConfig,
    (ModelConfig, "quantizer"): QuantizerConfig,
    (ModelConfig, "decoder"): DecoderConfig,
    (TrainConfig, "loss"): LossWeights,
    (TrainConfig, "model"): ModelConfig,
}


def train_config_from_dict(data: dict[str, Any]) -> TrainConfig:
    return _build(TrainConfig, data)


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    return _build(ModelConfig, data)


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2)
