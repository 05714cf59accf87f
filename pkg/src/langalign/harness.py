"""Two-phase training protocol and the experiment runner.

Phase one fine-tunes the encoder on the source corpus with cross-entropy
alone. Phase two adapts on a K-shot episode spanning both languages for a
fixed number of epochs with no validation set and no early stopping; the
method decides what happens there:

- ``ft``: cross-entropy over both languages.
- ``ca``: same gradient sequence as ft, but the result is the mean of the
  per-epoch parameter snapshots.
- ``colap_xrcl``: cross-entropy plus the pair contrastive term (needs a
  paired episode).
- ``colap_xccl``: cross-entropy plus the class contrastive term (paired or
  unpaired).

Every random choice draws from a stream derived from (seed, purpose), never
from the method or from K, so different methods at the same seed see the
same initialization, source training, and episode. That makes method
comparisons exact rather than statistical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import (
    Corpus,
    Episode,
    SyntheticSpec,
    class_prototypes,
    exemplar_scores,
    generate_synthetic,
    read_corpus,
    sample_episode,
    select_exemplars,
)
from .errors import (
    ConfigError,
    EmptyClass,
    EmptyCorpus,
    EmptyInput,
    MethodEpisodeMismatch,
    MissingParallelTwin,
)
from .losses import FeatureBatch, LossConfig, loss_and_grad
from .model import (
    ModelConfig,
    ModelParams,
    average_checkpoints,
    flatten_params,
    forward_batch,
    init_params,
    unflatten_params,
)
from .numerics import OptimHyper, OptimState, adamw_step, cosine
from .seeding import derive_seed, make_rng

METHODS = ("ft", "ca", "colap_xrcl", "colap_xccl")

METHOD_OBJECTIVES = {
    "ft": "ce_only",
    "ca": "ce_only",
    "colap_xrcl": "ce_plus_xrcl",
    "colap_xccl": "ce_plus_xccl",
}

SELECTIONS = ("random", "high", "low")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    source_epochs: int = 5
    adapt_epochs: int = 10
    optim: OptimHyper = OptimHyper()
    loss: LossConfig = LossConfig()
    method: str = "ft"
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not isinstance(self.source_epochs, int) or self.source_epochs < 1:
            raise ConfigError(
                f"source_epochs must be a positive integer, got {self.source_epochs!r}"
            )
        # adapt_epochs = 0 is the zero-shot configuration and stays legal.
        if not isinstance(self.adapt_epochs, int) or self.adapt_epochs < 0:
            raise ConfigError(
                f"adapt_epochs must be a nonnegative integer, got {self.adapt_epochs!r}"
            )
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        object.__setattr__(self, "seeds", seeds)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "source_epochs": self.source_epochs,
            "adapt_epochs": self.adapt_epochs,
            "method": self.method,
            "seeds": list(self.seeds),
            "optim": {
                "learning_rate": self.optim.learning_rate,
                "beta1": self.optim.beta1,
                "beta2": self.optim.beta2,
                "epsilon": self.optim.epsilon,
                "weight_decay": self.optim.weight_decay,
            },
            "loss": {
                "temperature": self.loss.temperature,
                "phi_mode": self.loss.phi_mode,
                "denominator_mode": self.loss.denominator_mode,
            },
        }


@dataclass(frozen=True)
class EpisodeConfig:
    """K values to sweep, pairing, and the exemplar-selection mode."""

    k_values: tuple = (10,)
    paired: bool = True
    selection: str = "random"

    def __post_init__(self):
        ks = tuple(int(k) for k in self.k_values)
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"K values must be positive integers, got {self.k_values!r}")
        if self.selection not in SELECTIONS:
            raise ConfigError(
                f"selection must be one of {SELECTIONS}, got {self.selection!r}"
            )
        if self.selection != "random" and not self.paired:
            raise ConfigError(
                "score-based selection picks source exemplars and their "
                "translation twins, which is a paired episode; set paired=true"
            )
        object.__setattr__(self, "k_values", ks)

    def to_dict(self) -> dict:
        ks = list(self.k_values)
        return {
            "K": ks[0] if len(ks) == 1 else ks,
            "paired": self.paired,
            "selection": self.selection,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: data source, model, training, episodes."""

    model: ModelConfig
    train: TrainConfig
    episode: EpisodeConfig
    synthetic: Optional[SyntheticSpec] = None
    corpus_paths: Optional[dict] = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.corpus_paths is None):
            raise ConfigError(
                "exactly one data source is required: a synthetic spec or "
                "corpus file paths"
            )
        if self.corpus_paths is not None:
            needed = {"source", "target_train", "target_test"}
            if set(self.corpus_paths) != needed:
                raise ConfigError(
                    f"corpus paths must hold exactly the keys {sorted(needed)}, "
                    f"got {sorted(self.corpus_paths)}"
                )
        if self.synthetic is not None:
            if self.synthetic.dim != self.model.input_dim:
                raise ConfigError(
                    f"synthetic dim {self.synthetic.dim} does not match model "
                    f"input_dim {self.model.input_dim}"
                )
            if self.synthetic.num_labels != self.model.num_labels:
                raise ConfigError(
                    f"synthetic num_labels {self.synthetic.num_labels} does not "
                    f"match model num_labels {self.model.num_labels}"
                )

    def to_dict(self) -> dict:
        if self.synthetic is not None:
            data = self.synthetic.to_dict()
        else:
            data = dict(self.corpus_paths)
        return {
            "synthetic": data,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "episode": self.episode.to_dict(),
        }


def effective_loss_config(train_cfg: TrainConfig) -> LossConfig:
    """The loss configuration actually trained with: the method picks the
    objective, the loss block supplies temperature and modes."""
    return replace(train_cfg.loss, objective=METHOD_OBJECTIVES[train_cfg.method])


def _batch_chunks(order: np.ndarray, size: int) -> list:
    return [order[i : i + size] for i in range(0, len(order), size)]


def train_source(
    params: ModelParams,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    source: Corpus,
    seed: int,
) -> tuple[ModelParams, list]:
    """Cross-entropy fine-tuning on the source corpus.

    Shuffles every epoch from a seeded stream, keeps the short final batch,
    and never touches a contrastive term. Returns the trained parameters and
    the per-epoch mean CE trajectory.
    """
    labels = source.label_array()
    present = set(labels.tolist())
    for c in range(source.num_labels):
        if c not in present:
            raise EmptyClass(c, f"source corpus has no instances of class {c}")
    features = source.feature_matrix()
    ce_cfg = replace(train_cfg.loss, objective="ce_only")
    rng = make_rng(seed, "source-shuffle")
    flat = flatten_params(params)
    state = OptimState.zeros(flat.shape[0])
    trajectory = []
    n = len(source)
    for epoch in range(1, train_cfg.source_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        current = unflatten_params(flat, model_cfg)
        for chunk in _batch_chunks(order, train_cfg.batch_size):
            batch = FeatureBatch.single_language(features[chunk], labels[chunk])
            loss, grad = loss_and_grad(batch, current, model_cfg, ce_cfg)
            flat, state = adamw_step(flat, grad, state, train_cfg.optim)
            current = unflatten_params(flat, model_cfg)
            epoch_loss += loss
        trajectory.append((epoch, float(epoch_loss / n)))
    return unflatten_params(flat, model_cfg), trajectory


def _episode_arrays(episode: Episode) -> tuple:
    t_feats = np.stack([inst.features for inst in episode.target_instances])
    t_labels = np.array([inst.label for inst in episode.target_instances], dtype=np.int64)
    s_feats = np.stack([inst.features for inst in episode.source_instances])
    s_labels = np.array([inst.label for inst in episode.source_instances], dtype=np.int64)
    return t_feats, t_labels, s_feats, s_labels


def _slot_batches(
    episode: Episode,
    t_labels: np.ndarray,
    s_labels: np.ndarray,
    rng: np.random.Generator,
    slots_per_batch: int,
) -> list:
    """One epoch's batches as (target indices, source indices) pairs.

    Paired episodes shuffle pair slots directly. Unpaired episodes match
    targets to sources within each label (seeded shuffles) so every batch
    gives the class loss at least one same-label source per target; any
    label-count mismatch is paired off positionally at the end.
    """
    k = episode.K
    if episode.paired:
        order = rng.permutation(k)
        return [(chunk, chunk) for chunk in _batch_chunks(order, slots_per_batch)]
    slot_t = []
    slot_s = []
    leftover_t = []
    leftover_s = []
    for label in sorted(set(t_labels.tolist()) | set(s_labels.tolist())):
        t_idx = np.nonzero(t_labels == label)[0]
        s_idx = np.nonzero(s_labels == label)[0]
        t_idx = t_idx[rng.permutation(len(t_idx))]
        s_idx = s_idx[rng.permutation(len(s_idx))]
        matched = min(len(t_idx), len(s_idx))
        slot_t.extend(t_idx[:matched])
        slot_s.extend(s_idx[:matched])
        leftover_t.extend(t_idx[matched:])
        leftover_s.extend(s_idx[matched:])
    slot_t.extend(leftover_t)
    slot_s.extend(leftover_s)
    slot_t = np.array(slot_t, dtype=np.int64)
    slot_s = np.array(slot_s, dtype=np.int64)
    order = rng.permutation(k)
    return [
        (slot_t[chunk], slot_s[chunk])
        for chunk in _batch_chunks(order, slots_per_batch)
    ]


def adapt_fewshot(
    params: ModelParams,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    episode: Episode,
    seed: int,
) -> tuple[ModelParams, list]:
    """Few-shot adaptation on one episode, fixed epochs, both languages.

    The batch budget counts instances, so each batch holds at most
    batch_size // 2 target/source slots. Returns the adapted parameters and
    the per-epoch mean batch loss trajectory.
    """
    if train_cfg.method == "colap_xrcl" and not episode.paired:
        raise MethodEpisodeMismatch(
            "method colap_xrcl trains on translation pairs and needs a "
            "paired episode"
        )
    loss_cfg = effective_loss_config(train_cfg)
    t_feats, t_labels, s_feats, s_labels = _episode_arrays(episode)
    slots_per_batch = max(1, train_cfg.batch_size // 2)
    rng = make_rng(seed, "adapt-shuffle")
    flat = flatten_params(params)
    state = OptimState.zeros(flat.shape[0])
    checkpoints = []
    trajectory = []
    current = params
    for epoch in range(1, train_cfg.adapt_epochs + 1):
        batches = _slot_batches(episode, t_labels, s_labels, rng, slots_per_batch)
        epoch_loss = 0.0
        for t_idx, s_idx in batches:
            pairing = np.arange(len(t_idx)) if episode.paired else None
            batch = FeatureBatch(
                target_features=t_feats[t_idx],
                target_labels=t_labels[t_idx],
                source_features=s_feats[s_idx],
                source_labels=s_labels[s_idx],
                pairing=pairing,
            )
            loss, grad = loss_and_grad(batch, current, model_cfg, loss_cfg)
            flat, state = adamw_step(flat, grad, state, train_cfg.optim)
            current = unflatten_params(flat, model_cfg)
            epoch_loss += loss
        trajectory.append((epoch, float(epoch_loss / len(batches))))
        if train_cfg.method == "ca":
            checkpoints.append(current)
    if train_cfg.method == "ca" and checkpoints:
        current = average_checkpoints(checkpoints)
    return current, trajectory


def evaluate(params: ModelParams, model_cfg: ModelConfig, test: Corpus) -> float:
    """Accuracy on a test corpus; argmax ties go to the lowest label."""
    if len(test) == 0:
        raise EmptyCorpus("evaluate needs a non-empty test corpus")
    cache = forward_batch(params, model_cfg, test.feature_matrix())
    predictions = np.argmax(cache["logits"], axis=1)
    return float(np.mean(predictions == test.label_array()))


def alignment_report(
    params: ModelParams, model_cfg: ModelConfig, pairs: Sequence
) -> float:
    """Mean tap-layer cosine over (target, source) instance pairs."""
    if not pairs:
        raise EmptyInput("alignment_report needs at least one pair")
    t_feats = np.stack([t.features for t, _ in pairs])
    s_feats = np.stack([s.features for _, s in pairs])
    tap_t = forward_batch(params, model_cfg, t_feats)["tapped"]
    tap_s = forward_batch(params, model_cfg, s_feats)["tapped"]
    values = [cosine(tap_t[i], tap_s[i]) for i in range(len(pairs))]
    return float(np.mean(values))


def _twin_pairs(episode: Episode, source: Corpus) -> Optional[list]:
    """(target, source twin) pairs for alignment measurement, or None when
    any episode target lacks a twin."""
    index = source.by_id()
    pairs = []
    for inst in episode.target_instances:
        twin = index.get(inst.parallel_id) if inst.parallel_id else None
        if twin is None:
            return None
        pairs.append((inst, twin))
    return pairs


def build_selected_episode(
    source: Corpus,
    target_train: Corpus,
    k: int,
    selection: str,
    params_src: ModelParams,
    model_cfg: ModelConfig,
    seed: int,
) -> Episode:
    """Episode from prototype-scored source exemplars plus their twins.

    Scores come from tap-layer representations under the source-fine-tuned
    parameters; the selected source instances are joined by their target
    translations, so the episode is paired by construction.
    """
    reps = forward_batch(params_src, model_cfg, source.feature_matrix())["tapped"]
    labels = source.label_array()
    prototypes = class_prototypes(reps, labels, source.num_labels)
    scores = exemplar_scores(reps, labels, prototypes)
    ids = select_exemplars(scores, source, k, selection, seed)
    source_index = source.by_id()
    twin_by_source = {}
    for inst in target_train.instances:
        if inst.parallel_id is not None:
            twin_by_source[inst.parallel_id] = inst
    sources = []
    targets = []
    for ident in ids:
        src_inst = source_index[ident]
        twin = twin_by_source.get(ident)
        if twin is None:
            raise MissingParallelTwin(
                f"selected source instance {ident!r} has no target translation"
            )
        sources.append(src_inst)
        targets.append(twin)
    return Episode(tuple(targets), tuple(sources), k, paired=True)


@dataclass(frozen=True)
class SeedResult:
    seed: int
    accuracy: float
    zero_shot_accuracy: float
    alignment_before: Optional[float]
    alignment_after: Optional[float]
    selected_exemplar_ids: tuple
    source_trajectory: tuple
    adapt_trajectory: tuple

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "accuracy": self.accuracy,
            "zero_shot_accuracy": self.zero_shot_accuracy,
            "alignment_before": self.alignment_before,
            "alignment_after": self.alignment_after,
            "selected_exemplar_ids": list(self.selected_exemplar_ids),
            "loss_trajectory": {
                "source": [[e, v] for e, v in self.source_trajectory],
                "adapt": [[e, v] for e, v in self.adapt_trajectory],
            },
        }


@dataclass(frozen=True)
class RunReport:
    config: dict
    results: tuple

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "results": [
                {
                    "K": k,
                    "seeds": [r.to_dict() for r in seed_results],
                    "aggregate": aggregate,
                }
                for k, seed_results, aggregate in self.results
            ],
        }


def run_seed(
    corpora: tuple,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    episode_cfg: EpisodeConfig,
    k: int,
    seed: int,
) -> SeedResult:
    """One (K, seed) pipeline: init, source training, episode, adaptation,
    evaluation, alignment. Streams depend only on the seed and the stage, so
    methods share everything up to the adaptation objective."""
    source, target_train, target_test = corpora
    params0 = init_params(model_cfg, derive_seed(seed, "init"))
    params_src, source_traj = train_source(
        params0, model_cfg, train_cfg, source, seed
    )
    zero_shot = evaluate(params_src, model_cfg, target_test)
    if episode_cfg.selection == "random":
        episode = sample_episode(
            target_train, source, k, episode_cfg.paired, derive_seed(seed, "episode")
        )
    else:
        episode = build_selected_episode(
            source,
            target_train,
            k,
            episode_cfg.selection,
            params_src,
            model_cfg,
            derive_seed(seed, "select"),
        )
    pairs = _twin_pairs(episode, source)
    alignment_before = (
        alignment_report(params_src, model_cfg, pairs) if pairs else None
    )
    adapted, adapt_traj = adapt_fewshot(
        params_src, model_cfg, train_cfg, episode, seed
    )
    accuracy = evaluate(adapted, model_cfg, target_test)
    alignment_after = (
        alignment_report(adapted, model_cfg, pairs) if pairs else None
    )
    return SeedResult(
        seed=seed,
        accuracy=accuracy,
        zero_shot_accuracy=zero_shot,
        alignment_before=alignment_before,
        alignment_after=alignment_after,
        selected_exemplar_ids=tuple(i.id for i in episode.source_instances),
        source_trajectory=tuple(source_traj),
        adapt_trajectory=tuple(adapt_traj),
    )


def load_corpora(cfg: ExperimentConfig) -> tuple[Corpus, Corpus, Corpus]:
    """Generate from the synthetic spec or read the three corpus files."""
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    paths = cfg.corpus_paths
    source = read_corpus(paths["source"], num_labels=cfg.model.num_labels)
    target_train = read_corpus(paths["target_train"], num_labels=cfg.model.num_labels)
    target_test = read_corpus(paths["target_test"], num_labels=cfg.model.num_labels)
    for name, corpus in (
        ("source", source),
        ("target_train", target_train),
        ("target_test", target_test),
    ):
        if corpus.dim != cfg.model.input_dim:
            raise ConfigError(
                f"corpus {name} has feature dim {corpus.dim}, model expects "
                f"{cfg.model.input_dim}"
            )
    return source, target_train, target_test


def _seed_task(args) -> SeedResult:
    return run_seed(*args)


def _aggregate(seed_results: Sequence[SeedResult]) -> dict:
    accuracies = np.array([r.accuracy for r in seed_results])
    zero_shots = np.array([r.zero_shot_accuracy for r in seed_results])
    befores = [r.alignment_before for r in seed_results]
    afters = [r.alignment_after for r in seed_results]
    return {
        "mean_accuracy": float(np.mean(accuracies)),
        "std_accuracy": float(np.std(accuracies)),
        "mean_zero_shot_accuracy": float(np.mean(zero_shots)),
        "mean_alignment_before": (
            float(np.mean(befores)) if None not in befores else None
        ),
        "mean_alignment_after": (
            float(np.mean(afters)) if None not in afters else None
        ),
    }


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunReport:
    """Full experiment: every (K, seed) pipeline, aggregated per K.

    Corpora are produced once and shared by every seed. Seeds are
    independent and may run in parallel; results merge in task order either
    way, so the report is identical for any job count.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {jobs}")
    corpora = load_corpora(cfg)
    tasks = [
        (corpora, cfg.model, cfg.train, cfg.episode, k, seed)
        for k in cfg.episode.k_values
        for seed in cfg.train.seeds
    ]
    if jobs == 1 or len(tasks) == 1:
        outcomes = [_seed_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_seed_task, tasks))
    results = []
    per_k = len(cfg.train.seeds)
    for i, k in enumerate(cfg.episode.k_values):
        seed_results = tuple(outcomes[i * per_k : (i + 1) * per_k])
        results.append((k, seed_results, _aggregate(seed_results)))
    return RunReport(config=cfg.to_dict(), results=tuple(results))
