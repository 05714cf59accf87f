"""Training objectives and their analytic gradients.

Three objectives: plain cross-entropy, CE plus a translation-pair contrastive
term (each target representation pulled toward its paired source
representation and away from every other source instance), and CE plus a
class contrastive term (pulled toward all same-label source representations,
away from different-label ones). Both contrastive terms are computed from one
cosine matrix through one shared masked-sum core, so the class term on
singleton-class paired batches reproduces the pair term bit for bit.

The ``paper`` denominator mode evaluates the loss literally as
(negative_similarity - positive_similarity) / temperature per target; the
``info_nce`` mode replaces the denominator with a log-sum-exp over the
aggregated positive term and each negative cosine individually.

Gradients are hand-written reverse mode: cross-entropy flows through the
final layer and head, the contrastive term flows through the tap layer, and
both paths meet in the shared backward sweep. Every gradient is checked
against central differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyInput,
    LabelOutOfRange,
    MissingPairing,
    NoPositiveAvailable,
)
from .model import ModelConfig, ModelParams, _activate_deriv, forward_batch
from .numerics import log_softmax, normalized_rows

OBJECTIVES = ("ce_only", "ce_plus_xrcl", "ce_plus_xccl")
PHI_MODES = ("sum", "mean")
DENOMINATOR_MODES = ("paper", "info_nce")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    objective: str = "ce_only"
    phi_mode: str = "sum"
    denominator_mode: str = "paper"

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ConfigError(f"temperature must be positive, got {self.temperature!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.phi_mode not in PHI_MODES:
            raise ConfigError(f"phi_mode must be one of {PHI_MODES}, got {self.phi_mode!r}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(
                f"denominator_mode must be one of {DENOMINATOR_MODES}, "
                f"got {self.denominator_mode!r}"
            )

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "objective": self.objective,
            "phi_mode": self.phi_mode,
            "denominator_mode": self.denominator_mode,
        }


def _as_label_array(labels, what: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
        raise ConfigError(f"{what} must be a 1-D integer array, got {arr.dtype} {arr.shape}")
    return arr.astype(np.int64)


def _as_repr_matrix(reprs, what: str) -> np.ndarray:
    m = np.asarray(reprs, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{what} must be a 2-D matrix of row vectors, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class ContrastiveBatch:
    """Tap-layer representations of one adaptation batch.

    ``pairing`` maps each target row to the source row holding its
    translation; it is required by the pair loss and ignored by the class
    loss.
    """

    target_reprs: np.ndarray
    source_reprs: np.ndarray
    target_labels: np.ndarray
    source_labels: np.ndarray
    pairing: Optional[np.ndarray] = None

    def __post_init__(self):
        t = _as_repr_matrix(self.target_reprs, "target_reprs")
        s = _as_repr_matrix(self.source_reprs, "source_reprs")
        if t.shape[1] != s.shape[1]:
            raise DimensionMismatch(
                f"representation dims differ: target {t.shape[1]} vs source {s.shape[1]}"
            )
        tl = _as_label_array(self.target_labels, "target_labels")
        sl = _as_label_array(self.source_labels, "source_labels")
        if len(tl) != t.shape[0] or len(sl) != s.shape[0]:
            raise DimensionMismatch(
                f"label counts ({len(tl)}, {len(sl)}) do not match representation "
                f"rows ({t.shape[0]}, {s.shape[0]})"
            )
        pairing = self.pairing
        if pairing is not None:
            pairing = _as_label_array(pairing, "pairing")
            if len(pairing) != t.shape[0]:
                raise DimensionMismatch(
                    f"pairing length {len(pairing)} does not match {t.shape[0]} targets"
                )
            if pairing.size and (pairing.min() < 0 or pairing.max() >= s.shape[0]):
                raise MissingPairing(
                    f"pairing indices must lie in [0, {s.shape[0]}), got "
                    f"[{pairing.min()}, {pairing.max()}]"
                )
        object.__setattr__(self, "target_reprs", t)
        object.__setattr__(self, "source_reprs", s)
        object.__setattr__(self, "target_labels", tl)
        object.__setattr__(self, "source_labels", sl)
        object.__setattr__(self, "pairing", pairing)


def _pair_pos_mask(batch: ContrastiveBatch) -> np.ndarray:
    if batch.pairing is None:
        raise MissingPairing("the pair loss needs a target-to-source pairing")
    n_t = batch.target_reprs.shape[0]
    n_s = batch.source_reprs.shape[0]
    if n_t != n_s or not np.array_equal(np.sort(batch.pairing), np.arange(n_s)):
        raise MissingPairing(
            f"pairing must be a bijection between {n_t} targets and {n_s} sources"
        )
    mask = np.zeros((n_t, n_s), dtype=bool)
    mask[np.arange(n_t), batch.pairing] = True
    return mask


def _class_pos_mask(batch: ContrastiveBatch) -> np.ndarray:
    mask = batch.source_labels[None, :] == batch.target_labels[:, None]
    counts = mask.sum(axis=1)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise NoPositiveAvailable(int(batch.target_labels[empty[0]]))
    return mask


def _contrastive_core(
    cosines: np.ndarray, pos_mask: np.ndarray, cfg: LossConfig, want_grad: bool
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Per-target loss terms, and optionally d(loss)/d(cosine matrix).

    The positive similarity is the masked row sum (divided by the set size in
    mean mode); the empty negative set contributes exactly zero, which keeps
    the single-pair loss at exactly -cos/temperature.
    """
    tau = cfg.temperature
    pos_sum = np.where(pos_mask, cosines, 0.0).sum(axis=1)
    counts = pos_mask.sum(axis=1)
    if cfg.phi_mode == "mean":
        divisor = counts.astype(np.float64)
    else:
        divisor = np.ones(cosines.shape[0], dtype=np.float64)
    pos_total = pos_sum / divisor

    if cfg.denominator_mode == "paper":
        neg_sum = np.where(~pos_mask, cosines, 0.0).sum(axis=1)
        terms = (neg_sum - pos_total) / tau
        if not want_grad:
            return terms, None
        grad = np.where(pos_mask, -1.0 / (tau * divisor[:, None]), 1.0 / tau)
        return terms, grad

    z = cosines / tau
    z_pos = pos_total / tau
    neg_shifted_max = np.where(~pos_mask, z, -np.inf).max(axis=1, initial=-np.inf)
    peak = np.maximum(z_pos, neg_shifted_max)
    neg_exp = np.exp(np.where(~pos_mask, z - peak[:, None], -np.inf))
    denom = np.exp(z_pos - peak) + neg_exp.sum(axis=1)
    lse = peak + np.log(denom)
    terms = lse - z_pos
    if not want_grad:
        return terms, None
    pos_weight = np.exp(z_pos - lse)
    neg_weights = np.exp(np.where(~pos_mask, z - lse[:, None], -np.inf))
    grad = np.where(
        pos_mask,
        ((pos_weight - 1.0) / (tau * divisor))[:, None],
        neg_weights / tau,
    )
    return terms, grad


def _cosine_matrix(
    targets: np.ndarray, sources: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All pairwise cosines, plus the normalized rows and norms.

    Computed as raw dot products over an outer product of scalar norms so a
    one-element matrix agrees bit for bit with the scalar cosine.
    """
    t_hat, t_norms = normalized_rows(targets, "target representation")
    s_hat, s_norms = normalized_rows(sources, "source representation")
    cosines = (targets @ sources.T) / np.outer(t_norms, s_norms)
    return cosines, t_hat, s_hat, t_norms, s_norms


def _cosine_grad_to_reprs(
    grad_c: np.ndarray,
    cosines: np.ndarray,
    t_hat: np.ndarray,
    s_hat: np.ndarray,
    t_norms: np.ndarray,
    s_norms: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cosine-matrix gradient back onto the raw representation rows."""
    row_dot = (grad_c * cosines).sum(axis=1)
    col_dot = (grad_c * cosines).sum(axis=0)
    d_t = (grad_c @ s_hat - row_dot[:, None] * t_hat) / t_norms[:, None]
    d_s = (grad_c.T @ t_hat - col_dot[:, None] * s_hat) / s_norms[:, None]
    return d_t, d_s


def _contrastive_loss(batch: ContrastiveBatch, cfg: LossConfig, kind: str) -> float:
    if batch.target_reprs.shape[0] == 0:
        raise EmptyInput("contrastive batch has no targets")
    if kind == "pair":
        pos_mask = _pair_pos_mask(batch)
    else:
        pos_mask = _class_pos_mask(batch)
    cosines = _cosine_matrix(batch.target_reprs, batch.source_reprs)[0]
    terms, _ = _contrastive_core(cosines, pos_mask, cfg, want_grad=False)
    return float(np.sum(terms))


def xrcl_loss(batch: ContrastiveBatch, cfg: LossConfig) -> float:
    """Pair contrastive loss: positives are paired translations, negatives
    are every other source instance in the batch."""
    return _contrastive_loss(batch, cfg, "pair")


def xccl_loss(batch: ContrastiveBatch, cfg: LossConfig) -> float:
    """Class contrastive loss: positives are same-label source instances,
    negatives the rest. No pairing needed."""
    return _contrastive_loss(batch, cfg, "class")


def cross_entropy(logits, y: int) -> float:
    """-log p(y) under a softmax over the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionMismatch(f"logits must be 1-D, got shape {z.shape}")
    if not isinstance(y, (int, np.integer)) or not (0 <= int(y) < z.shape[0]):
        raise LabelOutOfRange(f"label {y!r} outside [0, {z.shape[0]})")
    return float(-log_softmax(z)[int(y)])


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def cross_entropy_sum(logits: np.ndarray, labels: np.ndarray) -> float:
    """Summed -log p(y_i) over a batch; the CE term of the total loss."""
    z = np.asarray(logits, dtype=np.float64)
    labels = _as_label_array(labels, "labels")
    if z.ndim != 2 or z.shape[0] != len(labels):
        raise DimensionMismatch(
            f"logits shape {z.shape} does not match {len(labels)} labels"
        )
    if z.shape[0] == 0:
        raise EmptyInput("cross_entropy_sum over an empty batch")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise LabelOutOfRange(
            f"labels must lie in [0, {z.shape[1]}), got [{labels.min()}, {labels.max()}]"
        )
    logp = _log_softmax_rows(z)
    terms = -logp[np.arange(z.shape[0]), labels]
    return float(np.sum(terms))


def total_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    contrastive: Optional[ContrastiveBatch],
    cfg: LossConfig,
) -> float:
    """CE summed over every instance, plus the configured contrastive term.

    The two terms add with no mixing weight. Logits come from the final
    layer; contrastive representations come from the tap layer.
    """
    ce = cross_entropy_sum(logits, labels)
    if cfg.objective == "ce_only":
        return ce
    if contrastive is None:
        raise ConfigError(f"objective {cfg.objective} requires a contrastive batch")
    if cfg.objective == "ce_plus_xrcl":
        return ce + xrcl_loss(contrastive, cfg)
    return ce + xccl_loss(contrastive, cfg)


@dataclass(frozen=True)
class FeatureBatch:
    """Raw input features for one training batch, split by language side.

    CE runs over both sides; the contrastive term contrasts target rows
    against source rows. Single-language batches leave the source side
    empty. ``pairing`` maps target rows to their translation's source row.
    """

    target_features: np.ndarray
    target_labels: np.ndarray
    source_features: np.ndarray
    source_labels: np.ndarray
    pairing: Optional[np.ndarray] = None

    def __post_init__(self):
        t = _as_repr_matrix(self.target_features, "target_features")
        s = _as_repr_matrix(self.source_features, "source_features")
        if t.shape[1] != s.shape[1]:
            raise DimensionMismatch(
                f"feature dims differ: target {t.shape[1]} vs source {s.shape[1]}"
            )
        tl = _as_label_array(self.target_labels, "target_labels")
        sl = _as_label_array(self.source_labels, "source_labels")
        if len(tl) != t.shape[0] or len(sl) != s.shape[0]:
            raise DimensionMismatch(
                f"label counts ({len(tl)}, {len(sl)}) do not match feature "
                f"rows ({t.shape[0]}, {s.shape[0]})"
            )
        pairing = self.pairing
        if pairing is not None:
            pairing = _as_label_array(pairing, "pairing")
        object.__setattr__(self, "target_features", t)
        object.__setattr__(self, "target_labels", tl)
        object.__setattr__(self, "source_features", s)
        object.__setattr__(self, "source_labels", sl)
        object.__setattr__(self, "pairing", pairing)

    @classmethod
    def single_language(cls, features, labels) -> "FeatureBatch":
        """A batch with every instance on the target side; CE-only shape."""
        f = _as_repr_matrix(features, "features")
        return cls(
            target_features=f,
            target_labels=labels,
            source_features=np.zeros((0, f.shape[1]), dtype=np.float64),
            source_labels=np.zeros(0, dtype=np.int64),
            pairing=None,
        )

    @property
    def num_instances(self) -> int:
        return self.target_features.shape[0] + self.source_features.shape[0]


def _tap_contrastive_batch(batch: FeatureBatch, tapped: np.ndarray) -> ContrastiveBatch:
    n_t = batch.target_features.shape[0]
    return ContrastiveBatch(
        target_reprs=tapped[:n_t],
        source_reprs=tapped[n_t:],
        target_labels=batch.target_labels,
        source_labels=batch.source_labels,
        pairing=batch.pairing,
    )


def loss_and_grad(
    batch: FeatureBatch,
    params: ModelParams,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Total loss and its analytic gradient, flattened parameter-wise.

    One forward pass serves both loss terms; the backward sweep carries the
    head gradient down the stack and injects the contrastive gradient where
    the tap layer's output enters the loss.
    """
    if batch.num_instances == 0:
        raise EmptyInput("loss_and_grad over an empty batch")
    features = np.concatenate([batch.target_features, batch.source_features], axis=0)
    labels = np.concatenate([batch.target_labels, batch.source_labels])
    n = features.shape[0]
    n_t = batch.target_features.shape[0]
    cache = forward_batch(params, model_cfg, features)
    logits = cache["logits"]
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(
            f"labels must lie in [0, {logits.shape[1]}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    logp = _log_softmax_rows(logits)
    loss = float(np.sum(-logp[np.arange(n), labels]))
    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0

    d_tap: Optional[np.ndarray] = None
    if loss_cfg.objective != "ce_only":
        contrastive = _tap_contrastive_batch(batch, cache["tapped"])
        if loss_cfg.objective == "ce_plus_xrcl":
            pos_mask = _pair_pos_mask(contrastive)
        else:
            pos_mask = _class_pos_mask(contrastive)
        cosines, t_hat, s_hat, t_norms, s_norms = _cosine_matrix(
            contrastive.target_reprs, contrastive.source_reprs
        )
        terms, grad_c = _contrastive_core(cosines, pos_mask, loss_cfg, want_grad=True)
        loss += float(np.sum(terms))
        d_t, d_s = _cosine_grad_to_reprs(grad_c, cosines, t_hat, s_hat, t_norms, s_norms)
        d_tap = np.concatenate([d_t, d_s], axis=0)

    hidden = cache["hidden"]
    pre = cache["pre"]
    num_layers = model_cfg.num_layers
    d_weights = [None] * num_layers
    d_biases = [None] * num_layers
    d_head_w = d_logits.T @ hidden[-1]
    d_head_b = d_logits.sum(axis=0)
    d_h = d_logits @ params.head_weights
    if d_tap is not None and model_cfg.tap_layer == num_layers:
        d_h = d_h + d_tap
    for layer in range(num_layers, 0, -1):
        delta = d_h * _activate_deriv(model_cfg.activation, pre[layer - 1], hidden[layer])
        d_weights[layer - 1] = delta.T @ hidden[layer - 1]
        d_biases[layer - 1] = delta.sum(axis=0)
        d_h = delta @ params.layer_weights[layer - 1]
        if d_tap is not None and model_cfg.tap_layer == layer - 1:
            d_h = d_h + d_tap

    parts = []
    for dw, db in zip(d_weights, d_biases):
        parts.append(dw.ravel())
        parts.append(db)
    parts.append(d_head_w.ravel())
    parts.append(d_head_b)
    return loss, np.concatenate(parts)


def total_loss_from_features(
    batch: FeatureBatch,
    params: ModelParams,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
) -> float:
    """Forward-only total loss on raw features; the gradcheck target."""
    if batch.num_instances == 0:
        raise EmptyInput("total_loss over an empty batch")
    features = np.concatenate([batch.target_features, batch.source_features], axis=0)
    labels = np.concatenate([batch.target_labels, batch.source_labels])
    cache = forward_batch(params, model_cfg, features)
    contrastive = None
    if loss_cfg.objective != "ce_only":
        contrastive = _tap_contrastive_batch(batch, cache["tapped"])
    return total_loss(cache["logits"], labels, contrastive, loss_cfg)


def backward(
    batch: FeatureBatch,
    params: ModelParams,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
) -> np.ndarray:
    """Flat analytic gradient of the total loss for one batch."""
    return loss_and_grad(batch, params, model_cfg, loss_cfg)[1]
