"""Few-shot cross-lingual transfer on embedding corpora.

A source-language classifier is fine-tuned with cross-entropy, then adapted
to a target language from K labeled examples. Adaptation can add a
contrastive term at an intermediate encoder layer that pulls target
representations toward their source translations (pair loss) or toward
same-label source instances (class loss). Synthetic corpora with a known
rotation between the language spaces make every claim checkable at desk
scale.
"""

from .data import (
    Corpus,
    Episode,
    Instance,
    SyntheticSpec,
    class_prototypes,
    exemplar_scores,
    generate_synthetic,
    per_class_counts,
    read_corpus,
    sample_episode,
    select_exemplars,
    write_corpus,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyClass,
    EmptyCorpus,
    EmptyInput,
    EmptyList,
    InsufficientInstances,
    InvalidSpec,
    LabelOutOfRange,
    LangAlignError,
    LayerOutOfRange,
    MethodEpisodeMismatch,
    MissingPairing,
    MissingParallelTwin,
    NonFiniteEvaluation,
    NoPositiveAvailable,
    ShapeMismatch,
    ZeroNormVector,
)
from .harness import (
    EpisodeConfig,
    ExperimentConfig,
    RunReport,
    SeedResult,
    TrainConfig,
    adapt_fewshot,
    alignment_report,
    build_selected_episode,
    evaluate,
    run_experiment,
    train_source,
)
from .losses import (
    ContrastiveBatch,
    FeatureBatch,
    LossConfig,
    cross_entropy,
    cross_entropy_sum,
    loss_and_grad,
    total_loss,
    total_loss_from_features,
    xccl_loss,
    xrcl_loss,
)
from .model import (
    ModelConfig,
    ModelParams,
    average_checkpoints,
    encode,
    flatten_params,
    forward_batch,
    init_params,
    load_checkpoint,
    num_params,
    save_checkpoint,
    score_labels,
    unflatten_params,
)
from .numerics import (
    OptimHyper,
    OptimState,
    adamw_step,
    cosine,
    finite_diff_grad,
    set_similarity,
)
from .seeding import derive_seed, make_rng

__version__ = "0.1.0"

__all__ = [
    "ContrastiveBatch",
    "ConfigError",
    "Corpus",
    "DimensionMismatch",
    "EmptyClass",
    "EmptyCorpus",
    "EmptyInput",
    "EmptyList",
    "Episode",
    "EpisodeConfig",
    "ExperimentConfig",
    "FeatureBatch",
    "InsufficientInstances",
    "Instance",
    "InvalidSpec",
    "LabelOutOfRange",
    "LangAlignError",
    "LayerOutOfRange",
    "LossConfig",
    "MethodEpisodeMismatch",
    "MissingPairing",
    "MissingParallelTwin",
    "ModelConfig",
    "ModelParams",
    "NonFiniteEvaluation",
    "NoPositiveAvailable",
    "OptimHyper",
    "OptimState",
    "RunReport",
    "SeedResult",
    "ShapeMismatch",
    "SyntheticSpec",
    "TrainConfig",
    "ZeroNormVector",
    "adamw_step",
    "adapt_fewshot",
    "alignment_report",
    "average_checkpoints",
    "build_selected_episode",
    "class_prototypes",
    "cosine",
    "cross_entropy",
    "cross_entropy_sum",
    "derive_seed",
    "encode",
    "evaluate",
    "exemplar_scores",
    "finite_diff_grad",
    "flatten_params",
    "forward_batch",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "make_rng",
    "num_params",
    "per_class_counts",
    "read_corpus",
    "run_experiment",
    "sample_episode",
    "save_checkpoint",
    "score_labels",
    "select_exemplars",
    "set_similarity",
    "total_loss",
    "total_loss_from_features",
    "train_source",
    "unflatten_params",
    "write_corpus",
    "xccl_loss",
    "xrcl_loss",
]
