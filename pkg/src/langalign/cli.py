"""Command-line entry point: generate, run, select, ablate-layer.

Experiment files are single JSON documents validated strictly: an unknown
key anywhere is a hard error, because there is no validation set downstream
to catch a silently ignored setting. Floats are written with full
round-trip precision, so rerunning a command over the same inputs and
output paths reproduces every artifact byte for byte (figures aside).
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    SELECTION_MODES,
    SyntheticSpec,
    class_prototypes,
    exemplar_scores,
    generate_synthetic,
    read_corpus,
    select_exemplars,
    write_corpus,
)
from .errors import ConfigError, LangAlignError, LayerOutOfRange, ShapeMismatch
from .figures import render_ablation_figure, render_run_figures
from .harness import (
    EpisodeConfig,
    ExperimentConfig,
    TrainConfig,
    load_corpora,
    run_experiment,
    train_source,
)
from .losses import LossConfig
from .model import (
    ModelConfig,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import OptimHyper
from .seeding import derive_seed

TOP_KEYS = {"synthetic", "model", "train", "episode", "output_dir"}
TRAIN_KEYS = {
    "batch_size",
    "source_epochs",
    "adapt_epochs",
    "method",
    "seeds",
    "optim",
    "loss",
}
OPTIM_KEYS = {"learning_rate", "beta1", "beta2", "epsilon", "weight_decay"}
LOSS_KEYS = {"temperature", "phi_mode", "denominator_mode"}
EPISODE_KEYS = {"K", "paired", "selection"}
CORPUS_PATH_KEYS = {"source", "target_train", "target_test"}

REPORT_CSV_HEADER = "seed,method,K,tap_layer,accuracy,alignment_before,alignment_after"


class StageFailure(Exception):
    """A command failed; the message names the stage that broke."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"error in {stage} stage: {message}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except (LangAlignError, ValueError, OSError) as exc:
        raise StageFailure(name, str(exc)) from exc


def _format_float(value) -> str:
    # repr of a Python float is the shortest string that parses back to the
    # same bits, never more than 17 significant digits.
    if value is None:
        return "nan"
    return repr(float(value))


def _require_dict(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(value).__name__}")
    return value


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def parse_experiment_file(raw) -> tuple[ExperimentConfig, str | None]:
    """Strictly validate an experiment document into a resolved config.

    Returns the config plus the optional output_dir named in the file. The
    training objective is never a file field; the method decides it.
    """
    _require_dict(raw, "experiment file")
    _check_keys(raw, TOP_KEYS, "experiment file")
    for required in ("synthetic", "model", "train"):
        if required not in raw:
            raise ConfigError(f"experiment file missing required key {required!r}")

    synthetic_block = _require_dict(raw["synthetic"], "synthetic block")
    spec = None
    paths = None
    if set(synthetic_block) == CORPUS_PATH_KEYS:
        paths = {k: str(v) for k, v in synthetic_block.items()}
    else:
        spec = SyntheticSpec.from_dict(synthetic_block)

    model = ModelConfig.from_dict(_require_dict(raw["model"], "model block"))

    train_block = _require_dict(raw["train"], "train block")
    _check_keys(train_block, TRAIN_KEYS, "train")
    if "method" not in train_block:
        raise ConfigError("train block missing required key 'method'")
    optim_block = _require_dict(train_block.get("optim", {}), "optim block")
    _check_keys(optim_block, OPTIM_KEYS, "optim")
    loss_block = _require_dict(train_block.get("loss", {}), "loss block")
    if "objective" in loss_block:
        raise ConfigError(
            "loss block does not take an 'objective' key; the train method "
            "determines the objective"
        )
    _check_keys(loss_block, LOSS_KEYS, "loss")
    train_kwargs = {
        k: train_block[k]
        for k in ("batch_size", "source_epochs", "adapt_epochs", "method", "seeds")
        if k in train_block
    }
    train = TrainConfig(
        optim=OptimHyper(**{k: float(v) for k, v in optim_block.items()}),
        loss=LossConfig(**loss_block),
        **train_kwargs,
    )

    episode_block = _require_dict(raw.get("episode", {}), "episode block")
    _check_keys(episode_block, EPISODE_KEYS, "episode")
    episode_kwargs = {}
    if "K" in episode_block:
        k = episode_block["K"]
        episode_kwargs["k_values"] = tuple(k) if isinstance(k, list) else (k,)
    if "paired" in episode_block:
        if not isinstance(episode_block["paired"], bool):
            raise ConfigError(
                f"episode key 'paired' must be true or false, got {episode_block['paired']!r}"
            )
        episode_kwargs["paired"] = episode_block["paired"]
    if "selection" in episode_block:
        episode_kwargs["selection"] = episode_block["selection"]
    episode = EpisodeConfig(**episode_kwargs)

    cfg = ExperimentConfig(
        model=model,
        train=train,
        episode=episode,
        synthetic=spec,
        corpus_paths=paths,
    )
    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError(f"output_dir must be a string path, got {output_dir!r}")
    return cfg, output_dir


def _apply_seed_override(cfg: ExperimentConfig, text) -> ExperimentConfig:
    if text is None:
        return cfg
    try:
        seeds = tuple(int(part) for part in str(text).split(",") if part.strip() != "")
    except ValueError:
        raise ConfigError(f"--seed-override expects comma-separated integers, got {text!r}")
    if not seeds:
        raise ConfigError("--seed-override got an empty seed list")
    return replace(cfg, train=replace(cfg.train, seeds=seeds))


def _resolve_out(cli_out, file_out) -> Path:
    if cli_out:
        return Path(cli_out)
    if file_out:
        return Path(file_out)
    raise ConfigError(
        "no output directory: set output_dir in the experiment file or pass --out"
    )


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def _report_csv(report) -> str:
    method = report.config["train"]["method"]
    tap = report.config["model"]["tap_layer"]
    lines = [REPORT_CSV_HEADER]
    for k, seed_results, _ in report.results:
        for r in seed_results:
            lines.append(
                ",".join(
                    [
                        str(r.seed),
                        method,
                        str(k),
                        str(tap),
                        _format_float(r.accuracy),
                        _format_float(r.alignment_before),
                        _format_float(r.alignment_after),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def cmd_generate(args) -> int:
    with _stage("configuration"):
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = SyntheticSpec.from_dict(_require_dict(raw, "synthetic spec file"))
        if not args.out:
            raise ConfigError("generate needs --out to know where to write corpora")
        out = Path(args.out)
    with _stage("generation"):
        source, target_train, target_test = generate_synthetic(spec)
    with _stage("reporting"):
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "source": "source.jsonl",
            "target_train": "target_train.jsonl",
            "target_test": "target_test.jsonl",
        }
        write_corpus(source, out / files["source"])
        write_corpus(target_train, out / files["target_train"])
        write_corpus(target_test, out / files["target_test"])
        for name in files.values():
            print(f"wrote {out / name}")
        manifest = {"seed": spec.seed, "spec": spec.to_dict(), "files": files}
        _write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return 0


def cmd_run(args) -> int:
    with _stage("configuration"):
        raw = json.loads(Path(args.experiment).read_text(encoding="utf-8"))
        cfg, file_out = parse_experiment_file(raw)
        cfg = _apply_seed_override(cfg, args.seed_override)
        out = _resolve_out(args.out, file_out)
    with _stage("data loading"):
        if cfg.corpus_paths is not None:
            for name, path in sorted(cfg.corpus_paths.items()):
                if not Path(path).is_file():
                    raise ConfigError(f"corpus file for {name!r} not found: {path}")
    with _stage("training"):
        report = run_experiment(cfg, jobs=args.jobs)
        checkpoints = None
        if args.save_checkpoints:
            source = load_corpora(cfg)[0]
            checkpoints = []
            for seed in cfg.train.seeds:
                params = init_params(cfg.model, derive_seed(seed, "init"))
                params, _ = train_source(params, cfg.model, cfg.train, source, seed)
                checkpoints.append((seed, params))
    with _stage("reporting"):
        _write_text(out / "report.json", json.dumps(report.to_dict(), indent=2) + "\n")
        _write_text(out / "report.csv", _report_csv(report))
        for path in render_run_figures(report, out):
            print(f"wrote {path}")
        if checkpoints is not None:
            for seed, params in checkpoints:
                path = out / "checkpoints" / f"source_seed{seed}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, params, cfg.model)
                print(f"wrote {path}")
    return 0


def cmd_select(args) -> int:
    with _stage("configuration"):
        if args.k < 1:
            raise ConfigError(f"--k must be a positive integer, got {args.k}")
        if not args.out:
            raise ConfigError("select needs --out to know where to write the id list")
        out = Path(args.out)
    with _stage("data loading"):
        params, model_cfg = load_checkpoint(args.checkpoint)
        corpus = read_corpus(args.corpus, num_labels=model_cfg.num_labels)
        if corpus.dim != model_cfg.input_dim:
            raise ShapeMismatch(
                f"corpus features have dim {corpus.dim}, checkpoint expects "
                f"{model_cfg.input_dim}"
            )
    with _stage("selection"):
        reps = forward_batch(params, model_cfg, corpus.feature_matrix())["tapped"]
        labels = corpus.label_array()
        prototypes = class_prototypes(reps, labels, corpus.num_labels)
        scores = exemplar_scores(reps, labels, prototypes)
        ids = select_exemplars(scores, corpus, args.k, args.mode, args.seed)
    with _stage("reporting"):
        score_by_id = {
            inst.id: scores[i] for i, inst in enumerate(corpus.instances)
        }
        by_id = corpus.by_id()
        lines = ["id,label,score"]
        for ident in ids:
            lines.append(
                f"{ident},{by_id[ident].label},{_format_float(score_by_id[ident])}"
            )
        _write_text(out / "exemplars.csv", "\n".join(lines) + "\n")
    return 0


def cmd_ablate_layer(args) -> int:
    with _stage("configuration"):
        raw = json.loads(Path(args.experiment).read_text(encoding="utf-8"))
        cfg, file_out = parse_experiment_file(raw)
        cfg = _apply_seed_override(cfg, args.seed_override)
        out = _resolve_out(args.out, file_out)
        try:
            layers = [int(part) for part in str(args.layers).split(",") if part.strip()]
        except ValueError:
            raise ConfigError(f"--layers expects comma-separated integers, got {args.layers!r}")
        if not layers:
            raise ConfigError("--layers got an empty layer list")
        for layer in layers:
            if not (1 <= layer <= cfg.model.num_layers):
                raise LayerOutOfRange(
                    f"tap layer {layer} outside [1, {cfg.model.num_layers}]"
                )
    with _stage("training"):
        rows = []
        for layer in layers:
            layer_cfg = replace(cfg, model=cfg.model.with_tap_layer(layer))
            report = run_experiment(layer_cfg, jobs=args.jobs)
            accuracies = [
                r.accuracy for _, seed_results, _ in report.results for r in seed_results
            ]
            rows.append((layer, float(np.mean(accuracies))))
    with _stage("reporting"):
        lines = ["tap_layer,mean_accuracy"]
        for layer, acc in rows:
            lines.append(f"{layer},{_format_float(acc)}")
        _write_text(out / "layer_ablation.csv", "\n".join(lines) + "\n")
        print(f"wrote {render_ablation_figure(rows, out)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="langalign",
        description="Few-shot cross-lingual transfer experiments on embedding corpora.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    common.add_argument(
        "--seed-override",
        default=None,
        help="comma-separated seeds replacing the configured list",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "generate", parents=[common], help="write synthetic corpora from a spec file"
    )
    p.add_argument("--spec", required=True, help="JSON file of synthetic spec fields")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser(
        "run", parents=[common], help="run an experiment and write its reports"
    )
    p.add_argument("--experiment", required=True, help="experiment JSON file")
    p.add_argument(
        "--save-checkpoints",
        action="store_true",
        help="also write the per-seed source-tuned checkpoints",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser(
        "select", parents=[common], help="score and select source exemplars"
    )
    p.add_argument("--corpus", required=True, help="source corpus JSONL file")
    p.add_argument("--checkpoint", required=True, help="source-tuned checkpoint JSON")
    p.add_argument("--k", type=int, required=True, help="number of exemplars")
    p.add_argument("--mode", required=True, choices=list(SELECTION_MODES))
    p.add_argument("--seed", type=int, default=0, help="seed for mode random")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser(
        "ablate-layer",
        parents=[common],
        help="rerun an experiment across contrastive tap layers",
    )
    p.add_argument("--experiment", required=True, help="experiment JSON file")
    p.add_argument("--layers", required=True, help="comma-separated layer indices")
    p.set_defaults(func=cmd_ablate_layer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as failure:
        print(failure, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
