"""Feed-forward encoder with a tappable intermediate layer and a label head.

The encoder consumes precomputed embedding vectors; there is no tokenizer.
Layer 1 maps input_dim to hidden_dim, layers 2..L map hidden to hidden, and
the head assigns one score per label. ``tap_layer`` names the layer whose
post-activation output feeds the contrastive losses; the head always reads
the final layer. Parameters are immutable values: training replaces them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyList,
    ShapeMismatch,
)

ACTIVATIONS = ("tanh", "relu")


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activate_deriv(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Derivative of the activation, from pre- and post-activation values."""
    if name == "tanh":
        return 1.0 - post * post
    return (pre > 0.0).astype(np.float64)


def default_tap_layer(num_layers: int) -> int:
    """Four fifths of the way up the stack, rounded toward the top."""
    return max(1, math.ceil(0.8 * num_layers))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int
    num_layers: int
    num_labels: int
    tap_layer: int = -1  # -1 means "use the default placement"
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.num_labels, int) or self.num_labels < 2:
            raise ConfigError(f"num_labels must be an integer >= 2, got {self.num_labels!r}")
        if self.tap_layer == -1:
            object.__setattr__(self, "tap_layer", default_tap_layer(self.num_layers))
        if not isinstance(self.tap_layer, int) or not (1 <= self.tap_layer <= self.num_layers):
            raise ConfigError(
                f"tap_layer must lie in [1, {self.num_layers}], got {self.tap_layer!r}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )

    def with_tap_layer(self, tap_layer: int) -> "ModelConfig":
        return replace(self, tap_layer=tap_layer)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_labels": self.num_labels,
            "tap_layer": self.tap_layer,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {
            "input_dim",
            "hidden_dim",
            "num_layers",
            "num_labels",
            "tap_layer",
            "activation",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for req in ("input_dim", "hidden_dim", "num_layers", "num_labels"):
            if req not in d:
                raise ConfigError(f"model config missing required key {req!r}")
        return cls(**d)


@dataclass(frozen=True)
class ModelParams:
    """Weights as a tuple of (weight, bias) per layer plus the label head.

    layer_weights[k] has shape (fan_out, fan_in); biases are 1-D. The head
    holds one score row per label.
    """

    layer_weights: tuple
    layer_biases: tuple
    head_weights: np.ndarray
    head_bias: np.ndarray

    def num_params(self) -> int:
        return flatten_params(self).shape[0]


def layer_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    """(fan_out, fan_in) for each encoder layer in order."""
    shapes = [(config.hidden_dim, config.input_dim)]
    shapes += [(config.hidden_dim, config.hidden_dim)] * (config.num_layers - 1)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform weights in ±1/sqrt(fan_in), zero biases, seeded."""
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_out, fan_in in layer_shapes(config):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    bound = 1.0 / math.sqrt(config.hidden_dim)
    head_w = rng.uniform(-bound, bound, size=(config.num_labels, config.hidden_dim))
    head_b = np.zeros(config.num_labels, dtype=np.float64)
    return ModelParams(
        layer_weights=tuple(weights),
        layer_biases=tuple(biases),
        head_weights=head_w,
        head_bias=head_b,
    )


def flatten_params(params: ModelParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.layer_weights, params.layer_biases):
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64))
    parts.append(np.asarray(params.head_weights, dtype=np.float64).ravel())
    parts.append(np.asarray(params.head_bias, dtype=np.float64))
    return np.concatenate(parts)


def unflatten_params(flat: np.ndarray, config: ModelConfig) -> ModelParams:
    flat = np.asarray(flat, dtype=np.float64)
    expected = num_params(config)
    if flat.ndim != 1 or flat.shape[0] != expected:
        raise ShapeMismatch(
            f"flat vector of length {flat.shape} does not fit config "
            f"expecting {expected} parameters"
        )
    weights = []
    biases = []
    offset = 0
    for fan_out, fan_in in layer_shapes(config):
        size = fan_out * fan_in
        weights.append(flat[offset : offset + size].reshape(fan_out, fan_in).copy())
        offset += size
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    size = config.num_labels * config.hidden_dim
    head_w = flat[offset : offset + size].reshape(config.num_labels, config.hidden_dim).copy()
    offset += size
    head_b = flat[offset : offset + config.num_labels].copy()
    return ModelParams(
        layer_weights=tuple(weights),
        layer_biases=tuple(biases),
        head_weights=head_w,
        head_bias=head_b,
    )


def num_params(config: ModelConfig) -> int:
    total = 0
    for fan_out, fan_in in layer_shapes(config):
        total += fan_out * fan_in + fan_out
    total += config.num_labels * config.hidden_dim + config.num_labels
    return total


def forward_batch(
    params: ModelParams, config: ModelConfig, features: np.ndarray
) -> dict:
    """Forward pass over a batch of row vectors, keeping every intermediate.

    Returns a cache with pre-activations, post-activations, the tap-layer
    output, the final representation, and head logits. The cache feeds the
    analytic backward pass, which must see the exact forward intermediates.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DimensionMismatch(
            f"expected features of shape (n, {config.input_dim}), got {x.shape}"
        )
    hidden = [x]
    pre = []
    for w, b in zip(params.layer_weights, params.layer_biases):
        a = hidden[-1] @ w.T + b
        pre.append(a)
        hidden.append(_activate(config.activation, a))
    logits = hidden[-1] @ params.head_weights.T + params.head_bias
    return {
        "hidden": hidden,
        "pre": pre,
        "tapped": hidden[config.tap_layer],
        "final": hidden[-1],
        "logits": logits,
    }


def encode(
    params: ModelParams, config: ModelConfig, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(final_repr, tapped_repr) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != config.input_dim:
        raise DimensionMismatch(
            f"expected an input vector of dim {config.input_dim}, got shape {x.shape}"
        )
    cache = forward_batch(params, config, x[None, :])
    return cache["final"][0], cache["tapped"][0]


def score_labels(params: ModelParams, final_repr: np.ndarray) -> np.ndarray:
    """Per-label logits: head row dotted with the representation, plus bias."""
    r = np.asarray(final_repr, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] != params.head_weights.shape[1]:
        raise DimensionMismatch(
            f"expected a representation of dim {params.head_weights.shape[1]}, "
            f"got shape {r.shape}"
        )
    return params.head_weights @ r + params.head_bias


def _shapes_of(params: ModelParams) -> list[tuple]:
    shapes = []
    for w, b in zip(params.layer_weights, params.layer_biases):
        shapes.append(np.shape(w))
        shapes.append(np.shape(b))
    shapes.append(np.shape(params.head_weights))
    shapes.append(np.shape(params.head_bias))
    return shapes


def average_checkpoints(checkpoints: list[ModelParams]) -> ModelParams:
    """Coordinate-wise mean of parameter sets.

    Computed as anchor + mean(deltas) so a list of identical checkpoints
    returns those parameters bit-exactly, which the adaptation protocol
    relies on when comparing against plain fine-tuning.
    """
    if not checkpoints:
        raise EmptyList("average_checkpoints requires at least one checkpoint")
    first_shapes = _shapes_of(checkpoints[0])
    for ckpt in checkpoints[1:]:
        if _shapes_of(ckpt) != first_shapes:
            raise ShapeMismatch(
                f"checkpoint shapes differ: {first_shapes} vs {_shapes_of(ckpt)}"
            )
    flats = np.stack([flatten_params(p) for p in checkpoints])
    anchor = flats[0]
    mean_flat = anchor + np.mean(flats - anchor, axis=0)
    weights = []
    biases = []
    offset = 0
    template = checkpoints[0]
    for w in template.layer_weights:
        size = w.size
        weights.append(mean_flat[offset : offset + size].reshape(w.shape).copy())
        offset += size
        b_size = w.shape[0]
        biases.append(mean_flat[offset : offset + b_size].copy())
        offset += b_size
    hw = template.head_weights
    size = hw.size
    head_w = mean_flat[offset : offset + size].reshape(hw.shape).copy()
    offset += size
    head_b = mean_flat[offset:].copy()
    return ModelParams(
        layer_weights=tuple(weights),
        layer_biases=tuple(biases),
        head_weights=head_w,
        head_bias=head_b,
    )


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Write a checkpoint: config header plus the flat float64 parameter list."""
    payload = {
        "config": config.to_dict(),
        "params": [float(v) for v in flatten_params(params)],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict) or set(payload) != {"config", "params"}:
        raise ConfigError(
            f"checkpoint file {path} must hold exactly the keys 'config' and 'params'"
        )
    config = ModelConfig.from_dict(payload["config"])
    flat = np.asarray(payload["params"], dtype=np.float64)
    return unflatten_params(flat, config), config
