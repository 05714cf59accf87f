"""Corpora, synthetic generation, episode sampling, and exemplar selection.

The synthetic setup stands in for a multilingual embedding dataset: class
clusters live on the unit sphere, the source language samples around them,
and the target language is the source pushed through a seeded orthogonal map
(the cross-language representation gap) plus its own noise. Each target
training instance keeps a link to the exact source instance it was derived
from, giving a parallel corpus; test instances are fresh draws with no twins.

Episodes are K-shot adaptation sets: per-class counts are K/N_Y rounded down,
with the remainder spread over seeded-randomly chosen classes. Exemplar
selection scores instances by closeness to their own class prototype and
distance from the others, then picks the best, worst, or a random per-class
balanced subset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyClass,
    EmptyCorpus,
    InsufficientInstances,
    InvalidSpec,
    MissingParallelTwin,
)
from .numerics import cosine_matrix
from .seeding import make_rng

SELECTION_MODES = ("high", "low", "random")

CORPUS_FIELDS = ("id", "language", "label", "features", "parallel_id")


@dataclass(frozen=True)
class Instance:
    id: str
    language: str
    label: int
    features: np.ndarray
    parallel_id: Optional[str] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1:
            raise DimensionMismatch(
                f"instance {self.id!r} features must be 1-D, got shape {f.shape}"
            )
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class Corpus:
    instances: tuple
    language: str
    num_labels: int

    def __post_init__(self):
        instances = tuple(self.instances)
        if not instances:
            raise EmptyCorpus(f"corpus {self.language!r} has no instances")
        ids = [inst.id for inst in instances]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"corpus {self.language!r} has duplicate instance ids")
        dims = {inst.features.shape[0] for inst in instances}
        if len(dims) != 1:
            raise DimensionMismatch(
                f"corpus {self.language!r} mixes feature dims {sorted(dims)}"
            )
        for inst in instances:
            if not (0 <= inst.label < self.num_labels):
                raise ConfigError(
                    f"instance {inst.id!r} label {inst.label} outside "
                    f"[0, {self.num_labels})"
                )
            if inst.language != self.language:
                raise ConfigError(
                    f"instance {inst.id!r} language {inst.language!r} does not "
                    f"match corpus language {self.language!r}"
                )
        object.__setattr__(self, "instances", instances)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def dim(self) -> int:
        return self.instances[0].features.shape[0]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([inst.features for inst in self.instances])

    def label_array(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    def by_id(self) -> dict:
        return {inst.id: inst for inst in self.instances}


@dataclass(frozen=True)
class Episode:
    """K target instances plus K source instances for adaptation.

    When paired, source_instances[i] is the parallel twin of
    target_instances[i], so the pairing is the identity by construction.
    """

    target_instances: tuple
    source_instances: tuple
    K: int
    paired: bool

    def __post_init__(self):
        t = tuple(self.target_instances)
        s = tuple(self.source_instances)
        if len(t) != self.K or len(s) != self.K:
            raise ConfigError(
                f"episode sides must both hold K={self.K} instances, "
                f"got {len(t)} targets and {len(s)} sources"
            )
        object.__setattr__(self, "target_instances", t)
        object.__setattr__(self, "source_instances", s)


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int
    num_labels: int
    train_size: int
    test_size: int
    source_noise: float
    target_noise: float
    rotation_angle: float
    seed: int

    def __post_init__(self):
        if not isinstance(self.dim, int) or self.dim < 1:
            raise InvalidSpec(f"dim must be a positive integer, got {self.dim!r}")
        if not isinstance(self.num_labels, int) or self.num_labels < 2:
            raise InvalidSpec(f"num_labels must be an integer >= 2, got {self.num_labels!r}")
        for name in ("train_size", "test_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {value!r}")
        if self.train_size < self.num_labels:
            raise InvalidSpec(
                f"train_size {self.train_size} cannot cover {self.num_labels} classes"
            )
        for name in ("source_noise", "target_noise"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value >= 0):
                raise InvalidSpec(f"{name} must be a nonnegative real, got {value!r}")
        if not (0.0 <= self.rotation_angle <= math.pi):
            raise InvalidSpec(
                f"rotation_angle must lie in [0, pi], got {self.rotation_angle!r}"
            )
        if not isinstance(self.seed, int):
            raise InvalidSpec(f"seed must be an integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_labels": self.num_labels,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "source_noise": self.source_noise,
            "target_noise": self.target_noise,
            "rotation_angle": self.rotation_angle,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        missing = known - set(d)
        if missing:
            raise ConfigError(f"synthetic spec missing keys: {sorted(missing)}")
        d = dict(d)
        for name in ("source_noise", "target_noise", "rotation_angle"):
            d[name] = float(d[name])
        return cls(**d)


def _unit_class_means(rng: np.random.Generator, num_labels: int, dim: int) -> np.ndarray:
    means = rng.normal(size=(num_labels, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    # Distinctness holds almost surely; redraw defensively on collision.
    while len({tuple(row) for row in means}) < num_labels:
        means = rng.normal(size=(num_labels, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means


def rotation_map(dim: int, angle: float, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Seeded orthogonal map deviating from identity by ``angle``.

    Plane rotations by the angle in a random orthonormal basis: B G B^T with
    G block-diagonal over floor(dim/2) two-dimensional rotations (odd trailing
    coordinate fixed). Angle zero returns None, meaning an exact identity:
    target twins must equal their source twins bitwise when noise is zero.
    """
    if angle == 0.0:
        return None
    basis, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    basis = basis * np.sign(np.diag(r))
    blocks = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(dim // 2):
        i = 2 * k
        blocks[i, i] = c
        blocks[i, i + 1] = -s
        blocks[i + 1, i] = s
        blocks[i + 1, i + 1] = c
    return basis @ blocks @ basis.T


def _apply_map(q: Optional[np.ndarray], features: np.ndarray) -> np.ndarray:
    if q is None:
        return features.copy()
    return features @ q.T


def _add_noise(base: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    # The zero-noise path must preserve features bitwise, so skip the add.
    if sigma == 0.0:
        return base.copy()
    return base + sigma * rng.normal(size=base.shape)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Corpus, Corpus, Corpus]:
    """(source, target_train, target_test) corpora, deterministic per spec.

    Labels cycle round-robin so every class is covered and near-balanced.
    Target training features are the rotated source twin plus target noise;
    test features repeat the same process on fresh draws, so no test
    instance has a twin anywhere.
    """
    rng_means = make_rng(spec.seed, "class-means")
    rng_basis = make_rng(spec.seed, "rotation-basis")
    rng_source = make_rng(spec.seed, "source-noise")
    rng_target = make_rng(spec.seed, "target-noise")
    rng_test = make_rng(spec.seed, "test-draws")

    means = _unit_class_means(rng_means, spec.num_labels, spec.dim)
    q = rotation_map(spec.dim, spec.rotation_angle, rng_basis)

    train_labels = np.arange(spec.train_size) % spec.num_labels
    source_feats = _add_noise(means[train_labels], spec.source_noise, rng_source)
    target_feats = _add_noise(_apply_map(q, source_feats), spec.target_noise, rng_target)

    test_labels = np.arange(spec.test_size) % spec.num_labels
    test_base = _add_noise(means[test_labels], spec.source_noise, rng_test)
    test_feats = _add_noise(_apply_map(q, test_base), spec.target_noise, rng_test)

    source_instances = []
    target_instances = []
    for i in range(spec.train_size):
        sid = f"src-{i:06d}"
        tid = f"tgt-{i:06d}"
        label = int(train_labels[i])
        source_instances.append(
            Instance(id=sid, language="source", label=label,
                     features=source_feats[i], parallel_id=tid)
        )
        target_instances.append(
            Instance(id=tid, language="target", label=label,
                     features=target_feats[i], parallel_id=sid)
        )
    test_instances = [
        Instance(id=f"tst-{i:06d}", language="target", label=int(test_labels[i]),
                 features=test_feats[i], parallel_id=None)
        for i in range(spec.test_size)
    ]
    source = Corpus(tuple(source_instances), "source", spec.num_labels)
    target_train = Corpus(tuple(target_instances), "target", spec.num_labels)
    target_test = Corpus(tuple(test_instances), "target", spec.num_labels)
    return source, target_train, target_test


def per_class_counts(k: int, num_labels: int, rng: np.random.Generator) -> np.ndarray:
    """floor(K/N_Y) per class, with the K mod N_Y surplus spread over
    seeded-randomly chosen classes."""
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    counts = np.full(num_labels, k // num_labels, dtype=np.int64)
    surplus = k % num_labels
    if surplus:
        bumped = rng.choice(num_labels, size=surplus, replace=False)
        counts[bumped] += 1
    return counts


def _sample_per_class(
    corpus: Corpus, counts: np.ndarray, rng: np.random.Generator
) -> list:
    members_by_class = {c: [] for c in range(corpus.num_labels)}
    for inst in corpus.instances:
        members_by_class[inst.label].append(inst)
    chosen = []
    for c in range(corpus.num_labels):
        need = int(counts[c])
        if need == 0:
            continue
        members = members_by_class[c]
        if len(members) < need:
            raise InsufficientInstances(
                c, f"class {c} has {len(members)} instances, episode needs {need}"
            )
        picks = rng.choice(len(members), size=need, replace=False)
        chosen.extend(members[int(j)] for j in picks)
    return chosen


def sample_episode(
    target: Corpus, source: Corpus, k: int, paired: bool, seed: int
) -> Episode:
    """K-shot episode: per-class-balanced targets, plus their parallel twins
    (paired) or an independent per-class source sample of the same label
    counts (unpaired)."""
    if target.num_labels != source.num_labels:
        raise ConfigError(
            f"corpora disagree on num_labels: {target.num_labels} vs {source.num_labels}"
        )
    rng = np.random.default_rng(seed)
    counts = per_class_counts(k, target.num_labels, rng)
    targets = _sample_per_class(target, counts, rng)
    if paired:
        source_index = source.by_id()
        sources = []
        for inst in targets:
            twin = source_index.get(inst.parallel_id) if inst.parallel_id else None
            if twin is None:
                raise MissingParallelTwin(
                    f"target instance {inst.id!r} has no parallel twin in the "
                    f"source corpus"
                )
            if twin.label != inst.label:
                raise ConfigError(
                    f"parallel pair {inst.id!r}/{twin.id!r} labels differ: "
                    f"{inst.label} vs {twin.label}"
                )
            sources.append(twin)
    else:
        sources = _sample_per_class(source, counts, rng)
    return Episode(tuple(targets), tuple(sources), k, paired)


def class_prototypes(
    reprs: np.ndarray, labels: Sequence, num_labels: Optional[int] = None
) -> np.ndarray:
    """Per-class mean representation, one row per class."""
    reprs = np.asarray(reprs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if reprs.ndim != 2 or labels.ndim != 1 or reprs.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"reprs {reprs.shape} and labels {labels.shape} do not align"
        )
    if num_labels is None:
        num_labels = int(labels.max()) + 1 if labels.size else 0
    prototypes = np.zeros((num_labels, reprs.shape[1]), dtype=np.float64)
    for c in range(num_labels):
        members = reprs[labels == c]
        if members.shape[0] == 0:
            raise EmptyClass(c)
        prototypes[c] = members.mean(axis=0)
    return prototypes


def exemplar_scores(
    reprs: np.ndarray, labels: Sequence, prototypes: np.ndarray
) -> np.ndarray:
    """Typicality score per instance.

    s_i = cos(r_i, own prototype) + N_Y - sum of cosines to the other
    prototypes: high scorers sit inside their own class and away from the
    rest.
    """
    reprs = np.asarray(reprs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    num_labels = prototypes.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= num_labels):
        raise ConfigError(
            f"labels must lie in [0, {num_labels}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    cosines = cosine_matrix(reprs, prototypes)
    own = cosines[np.arange(reprs.shape[0]), labels]
    others = cosines.sum(axis=1) - own
    return own + num_labels - others


def select_exemplars(
    scores: Sequence, corpus: Corpus, k: int, mode: str, seed: int
) -> list[str]:
    """Instance ids of a per-class-balanced K-subset.

    high takes the top scorers per class, low the bottom, random a seeded
    uniform sample; ties break toward the lexically smaller instance id.
    """
    if mode not in SELECTION_MODES:
        raise ConfigError(f"mode must be one of {SELECTION_MODES}, got {mode!r}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(corpus),):
        raise DimensionMismatch(
            f"got {scores.shape} scores for a corpus of {len(corpus)} instances"
        )
    if k > len(corpus):
        raise InsufficientInstances(
            -1, f"K={k} exceeds corpus size {len(corpus)}"
        )
    rng = np.random.default_rng(seed)
    counts = per_class_counts(k, corpus.num_labels, rng)
    by_class = {c: [] for c in range(corpus.num_labels)}
    for idx, inst in enumerate(corpus.instances):
        by_class[inst.label].append((inst.id, float(scores[idx])))
    chosen: list[str] = []
    for c in range(corpus.num_labels):
        need = int(counts[c])
        if need == 0:
            continue
        members = by_class[c]
        if len(members) < need:
            raise InsufficientInstances(
                c, f"class {c} has {len(members)} instances, selection needs {need}"
            )
        if mode == "random":
            picks = rng.choice(len(members), size=need, replace=False)
            chosen.extend(members[int(j)][0] for j in picks)
        elif mode == "high":
            ranked = sorted(members, key=lambda pair: (-pair[1], pair[0]))
            chosen.extend(ident for ident, _ in ranked[:need])
        else:
            ranked = sorted(members, key=lambda pair: (pair[1], pair[0]))
            chosen.extend(ident for ident, _ in ranked[:need])
    return chosen


def write_corpus(corpus: Corpus, path) -> None:
    """One JSON object per line, fixed key order, full float precision."""
    lines = []
    for inst in corpus.instances:
        lines.append(
            json.dumps(
                {
                    "id": inst.id,
                    "language": inst.language,
                    "label": inst.label,
                    "features": [float(v) for v in inst.features],
                    "parallel_id": inst.parallel_id,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path, num_labels: Optional[int] = None) -> Corpus:
    """Parse a JSON-Lines corpus; unknown or missing fields are hard errors."""
    text = Path(path).read_text(encoding="utf-8")
    instances = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(record, dict) or set(record) != set(CORPUS_FIELDS):
            raise ConfigError(
                f"{path}:{lineno}: corpus records need exactly the fields "
                f"{list(CORPUS_FIELDS)}"
            )
        instances.append(
            Instance(
                id=record["id"],
                language=record["language"],
                label=record["label"],
                features=np.asarray(record["features"], dtype=np.float64),
                parallel_id=record["parallel_id"],
            )
        )
    if not instances:
        raise EmptyCorpus(f"{path} holds no instances")
    languages = {inst.language for inst in instances}
    if len(languages) != 1:
        raise ConfigError(f"{path} mixes languages {sorted(languages)}")
    if num_labels is None:
        num_labels = max(inst.label for inst in instances) + 1
    return Corpus(tuple(instances), instances[0].language, num_labels)
