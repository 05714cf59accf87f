"""Two-phase protocol tests: source training, adaptation methods, evaluation,
alignment, and the experiment runner."""

import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from langalign.data import Corpus, Episode, Instance, SyntheticSpec, generate_synthetic, sample_episode
from langalign.errors import (
    ConfigError,
    EmptyClass,
    EmptyInput,
    MethodEpisodeMismatch,
)
from langalign.harness import (
    EpisodeConfig,
    ExperimentConfig,
    TrainConfig,
    adapt_fewshot,
    alignment_report,
    build_selected_episode,
    effective_loss_config,
    evaluate,
    run_experiment,
    run_seed,
    train_source,
)
from langalign.losses import LossConfig
from langalign.model import ModelConfig, flatten_params, init_params
from langalign.numerics import OptimHyper
from langalign.seeding import derive_seed


@lru_cache(maxsize=None)
def small_corpora():
    spec = SyntheticSpec(
        dim=8,
        num_labels=3,
        train_size=60,
        test_size=30,
        source_noise=0.2,
        target_noise=0.2,
        rotation_angle=math.pi / 4,
        seed=7,
    )
    return generate_synthetic(spec)


@lru_cache(maxsize=None)
def model_cfg():
    return ModelConfig(input_dim=8, hidden_dim=8, num_layers=2, num_labels=3)


def trainable(lr=0.01, **kw):
    kw.setdefault("batch_size", 16)
    kw.setdefault("source_epochs", 3)
    kw.setdefault("adapt_epochs", 3)
    return TrainConfig(optim=OptimHyper(learning_rate=lr), **kw)


def fresh_params(seed=0):
    return init_params(model_cfg(), derive_seed(seed, "init"))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 64
        assert cfg.source_epochs == 5
        assert cfg.adapt_epochs == 10
        assert cfg.method == "ft"
        assert cfg.seeds == (0, 1, 2, 3, 4)

    def test_zero_adapt_epochs_allowed(self):
        assert TrainConfig(adapt_epochs=0).adapt_epochs == 0

    def test_negative_adapt_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(adapt_epochs=-1)

    def test_zero_source_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(source_epochs=0)

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            TrainConfig(method="distill")

    def test_seeds_coerced_to_int_tuple(self):
        assert TrainConfig(seeds=[3, 1]).seeds == (3, 1)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(seeds=[])

    def test_to_dict_shape(self):
        d = TrainConfig().to_dict()
        assert set(d) == {
            "batch_size",
            "source_epochs",
            "adapt_epochs",
            "method",
            "seeds",
            "optim",
            "loss",
        }
        assert "objective" not in d["loss"]

    def test_method_picks_objective(self):
        for method, objective in [
            ("ft", "ce_only"),
            ("ca", "ce_only"),
            ("colap_xrcl", "ce_plus_xrcl"),
            ("colap_xccl", "ce_plus_xccl"),
        ]:
            cfg = TrainConfig(method=method, loss=LossConfig(temperature=0.3))
            eff = effective_loss_config(cfg)
            assert eff.objective == objective
            assert eff.temperature == 0.3


class TestEpisodeConfig:
    def test_defaults(self):
        cfg = EpisodeConfig()
        assert cfg.k_values == (10,)
        assert cfg.paired is True
        assert cfg.selection == "random"

    def test_k_list(self):
        assert EpisodeConfig(k_values=(5, 10, 50)).k_values == (5, 10, 50)

    def test_nonpositive_k_rejected(self):
        with pytest.raises(ConfigError):
            EpisodeConfig(k_values=(5, 0))

    def test_unknown_selection(self):
        with pytest.raises(ConfigError):
            EpisodeConfig(selection="greedy")

    def test_scored_selection_requires_pairing(self):
        with pytest.raises(ConfigError):
            EpisodeConfig(selection="high", paired=False)

    def test_to_dict_scalar_and_list(self):
        assert EpisodeConfig(k_values=(10,)).to_dict()["K"] == 10
        assert EpisodeConfig(k_values=(5, 10)).to_dict()["K"] == [5, 10]


class TestExperimentConfig:
    def synthetic(self):
        return SyntheticSpec(
            dim=8,
            num_labels=3,
            train_size=30,
            test_size=12,
            source_noise=0.1,
            target_noise=0.1,
            rotation_angle=0.5,
            seed=1,
        )

    def test_requires_exactly_one_data_source(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(
                model=model_cfg(), train=TrainConfig(), episode=EpisodeConfig()
            )
        with pytest.raises(ConfigError):
            ExperimentConfig(
                model=model_cfg(),
                train=TrainConfig(),
                episode=EpisodeConfig(),
                synthetic=self.synthetic(),
                corpus_paths={"source": "a", "target_train": "b", "target_test": "c"},
            )

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(
                model=ModelConfig(input_dim=16, hidden_dim=8, num_layers=2, num_labels=3),
                train=TrainConfig(),
                episode=EpisodeConfig(),
                synthetic=self.synthetic(),
            )

    def test_label_count_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(
                model=ModelConfig(input_dim=8, hidden_dim=8, num_layers=2, num_labels=4),
                train=TrainConfig(),
                episode=EpisodeConfig(),
                synthetic=self.synthetic(),
            )

    def test_path_keys_checked(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(
                model=model_cfg(),
                train=TrainConfig(),
                episode=EpisodeConfig(),
                corpus_paths={"source": "a", "target_train": "b"},
            )

    def test_to_dict_echo(self):
        cfg = ExperimentConfig(
            model=model_cfg(),
            train=TrainConfig(),
            episode=EpisodeConfig(),
            synthetic=self.synthetic(),
        )
        d = cfg.to_dict()
        assert set(d) == {"synthetic", "model", "train", "episode"}
        assert d["synthetic"]["dim"] == 8


class TestTrainSource:
    def test_zero_learning_rate_is_identity(self):
        source, _, _ = small_corpora()
        params = fresh_params()
        cfg = TrainConfig(
            batch_size=16,
            source_epochs=2,
            optim=OptimHyper(learning_rate=0.0, weight_decay=0.0),
        )
        trained, _ = train_source(params, model_cfg(), cfg, source, seed=0)
        assert np.array_equal(flatten_params(trained), flatten_params(params))

    def test_mean_ce_decreases(self):
        spec = SyntheticSpec(
            dim=8,
            num_labels=3,
            train_size=300,
            test_size=30,
            source_noise=0.2,
            target_noise=0.2,
            rotation_angle=math.pi / 4,
            seed=7,
        )
        source, _, _ = generate_synthetic(spec)
        params = fresh_params()
        cfg = TrainConfig(
            batch_size=32, source_epochs=5, optim=OptimHyper(learning_rate=0.01)
        )
        _, trajectory = train_source(params, model_cfg(), cfg, source, seed=0)
        assert len(trajectory) == 5
        assert trajectory[0][0] == 1 and trajectory[-1][0] == 5
        assert trajectory[-1][1] < trajectory[0][1]

    def test_deterministic(self):
        source, _, _ = small_corpora()
        params = fresh_params()
        cfg = trainable()
        a, traj_a = train_source(params, model_cfg(), cfg, source, seed=3)
        b, traj_b = train_source(params, model_cfg(), cfg, source, seed=3)
        assert np.array_equal(flatten_params(a), flatten_params(b))
        assert traj_a == traj_b

    def test_seed_changes_shuffling(self):
        source, _, _ = small_corpora()
        params = fresh_params()
        cfg = trainable()
        a, _ = train_source(params, model_cfg(), cfg, source, seed=0)
        b, _ = train_source(params, model_cfg(), cfg, source, seed=1)
        assert not np.array_equal(flatten_params(a), flatten_params(b))

    def test_missing_class_rejected(self):
        insts = [
            Instance(id=f"s{i:02d}", language="src", features=np.ones(4) * (i + 1), label=i % 2)
            for i in range(6)
        ]
        corpus = Corpus(instances=tuple(insts), language="src", num_labels=3)
        cfg = ModelConfig(input_dim=4, hidden_dim=4, num_layers=1, num_labels=3)
        params = init_params(cfg, 0)
        with pytest.raises(EmptyClass) as err:
            train_source(params, cfg, TrainConfig(), corpus, seed=0)
        assert err.value.label == 2


def paired_episode(k=6, seed=11):
    source, target_train, _ = small_corpora()
    return sample_episode(target_train, source, k, True, seed)


def unpaired_episode(k=6, seed=11):
    source, target_train, _ = small_corpora()
    return sample_episode(target_train, source, k, False, seed)


class TestAdaptFewshot:
    def test_zero_epochs_returns_params_unchanged(self):
        params = fresh_params()
        cfg = trainable(adapt_epochs=0)
        adapted, trajectory = adapt_fewshot(
            params, model_cfg(), cfg, paired_episode(), seed=0
        )
        assert trajectory == []
        assert np.array_equal(flatten_params(adapted), flatten_params(params))

    def test_xrcl_requires_paired(self):
        cfg = trainable(method="colap_xrcl")
        with pytest.raises(MethodEpisodeMismatch):
            adapt_fewshot(fresh_params(), model_cfg(), cfg, unpaired_episode(), seed=0)

    def test_xccl_accepts_unpaired(self):
        cfg = trainable(method="colap_xccl")
        adapted, trajectory = adapt_fewshot(
            fresh_params(), model_cfg(), cfg, unpaired_episode(), seed=0
        )
        assert len(trajectory) == 3
        assert all(np.isfinite(v) for _, v in trajectory)

    def test_checkpoint_averaging_with_zero_lr_is_identity(self):
        params = fresh_params()
        cfg = TrainConfig(
            batch_size=16,
            adapt_epochs=4,
            method="ca",
            optim=OptimHyper(learning_rate=0.0, weight_decay=0.0),
        )
        adapted, _ = adapt_fewshot(params, model_cfg(), cfg, paired_episode(), seed=0)
        assert np.array_equal(flatten_params(adapted), flatten_params(params))

    def test_ft_and_ca_share_the_gradient_sequence(self):
        params = fresh_params()
        ft, traj_ft = adapt_fewshot(
            params, model_cfg(), trainable(method="ft"), paired_episode(), seed=2
        )
        ca, traj_ca = adapt_fewshot(
            params, model_cfg(), trainable(method="ca"), paired_episode(), seed=2
        )
        assert traj_ft == traj_ca
        assert not np.array_equal(flatten_params(ft), flatten_params(ca))

    def test_ca_single_epoch_equals_ft(self):
        params = fresh_params()
        ft, _ = adapt_fewshot(
            params,
            model_cfg(),
            trainable(method="ft", adapt_epochs=1),
            paired_episode(),
            seed=2,
        )
        ca, _ = adapt_fewshot(
            params,
            model_cfg(),
            trainable(method="ca", adapt_epochs=1),
            paired_episode(),
            seed=2,
        )
        assert np.array_equal(flatten_params(ft), flatten_params(ca))

    def test_singleton_classes_make_xccl_match_xrcl(self):
        # One pair per class: the class-positive set collapses to the
        # translation twin, so both contrastive terms see identical masks.
        episode = paired_episode(k=3, seed=5)
        assert sorted(i.label for i in episode.target_instances) == [0, 1, 2]
        params = fresh_params()
        xrcl, traj_r = adapt_fewshot(
            params, model_cfg(), trainable(method="colap_xrcl"), episode, seed=4
        )
        xccl, traj_c = adapt_fewshot(
            params, model_cfg(), trainable(method="colap_xccl"), episode, seed=4
        )
        assert traj_r == traj_c
        assert np.array_equal(flatten_params(xrcl), flatten_params(xccl))

    def test_small_batches_split_pair_slots(self):
        # batch_size 4 leaves two pair slots per batch; six pairs make three
        # batches per epoch and the loop must keep the short tail.
        params = fresh_params()
        cfg = trainable(method="colap_xrcl")
        cfg = replace(cfg, batch_size=4)
        adapted, trajectory = adapt_fewshot(
            params, model_cfg(), cfg, paired_episode(k=5), seed=0
        )
        assert len(trajectory) == 3
        assert not np.array_equal(flatten_params(adapted), flatten_params(params))

    def test_deterministic(self):
        params = fresh_params()
        cfg = trainable(method="colap_xccl")
        a, traj_a = adapt_fewshot(params, model_cfg(), cfg, paired_episode(), seed=9)
        b, traj_b = adapt_fewshot(params, model_cfg(), cfg, paired_episode(), seed=9)
        assert np.array_equal(flatten_params(a), flatten_params(b))
        assert traj_a == traj_b


class TestEvaluate:
    def test_untrained_model_sits_near_chance(self):
        _, _, target_test = small_corpora()
        acc = evaluate(fresh_params(seed=123), model_cfg(), target_test)
        assert 0.23 <= acc <= 0.43

    def test_ties_break_toward_lowest_label(self):
        _, _, target_test = small_corpora()
        params = fresh_params()
        zeroed = params.__class__(
            layer_weights=tuple(np.zeros_like(w) for w in params.layer_weights),
            layer_biases=tuple(np.zeros_like(b) for b in params.layer_biases),
            head_weights=np.zeros_like(params.head_weights),
            head_bias=np.zeros_like(params.head_bias),
        )
        # All logits are zero, every row ties, and the balanced test corpus
        # has a third of its labels at zero.
        acc = evaluate(zeroed, model_cfg(), target_test)
        assert acc == pytest.approx(1.0 / 3.0)

    def test_accuracy_is_a_fraction(self):
        _, _, target_test = small_corpora()
        acc = evaluate(fresh_params(), model_cfg(), target_test)
        assert 0.0 <= acc <= 1.0
        assert acc * len(target_test) == pytest.approx(round(acc * len(target_test)))


class TestAlignmentReport:
    def test_identical_pairs_score_one(self):
        _, target_train, _ = small_corpora()
        pairs = [(inst, inst) for inst in target_train.instances[:10]]
        value = alignment_report(fresh_params(), model_cfg(), pairs)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_empty_pairs_rejected(self):
        with pytest.raises(EmptyInput):
            alignment_report(fresh_params(), model_cfg(), [])

    def test_order_invariant(self):
        source, target_train, _ = small_corpora()
        by_id = source.by_id()
        pairs = [(t, by_id[t.parallel_id]) for t in target_train.instances[:12]]
        forward = alignment_report(fresh_params(), model_cfg(), pairs)
        backward = alignment_report(fresh_params(), model_cfg(), pairs[::-1])
        assert forward == pytest.approx(backward, rel=1e-12)

    def test_small_rotation_aligns_better_than_orthogonal(self):
        def corpora_at(angle):
            return generate_synthetic(
                SyntheticSpec(
                    dim=8,
                    num_labels=3,
                    train_size=60,
                    test_size=12,
                    source_noise=0.1,
                    target_noise=0.1,
                    rotation_angle=angle,
                    seed=21,
                )
            )

        params = fresh_params(seed=2)

        def report(angle):
            source, target_train, _ = corpora_at(angle)
            by_id = source.by_id()
            pairs = [(t, by_id[t.parallel_id]) for t in target_train.instances]
            return alignment_report(params, model_cfg(), pairs)

        assert report(0.0) > report(math.pi / 2)


def experiment_config(method="ft", selection="random", k_values=(4,), **train_kw):
    spec = SyntheticSpec(
        dim=8,
        num_labels=3,
        train_size=36,
        test_size=18,
        source_noise=0.2,
        target_noise=0.2,
        rotation_angle=math.pi / 4,
        seed=13,
    )
    train = TrainConfig(
        batch_size=16,
        source_epochs=2,
        adapt_epochs=train_kw.pop("adapt_epochs", 2),
        optim=OptimHyper(learning_rate=0.01),
        method=method,
        seeds=train_kw.pop("seeds", (0, 1)),
        **train_kw,
    )
    return ExperimentConfig(
        model=model_cfg(),
        train=train,
        episode=EpisodeConfig(k_values=k_values, selection=selection),
        synthetic=spec,
    )


class TestRunSeedAndExperiment:
    def test_zero_adapt_epochs_reproduces_zero_shot(self):
        cfg = experiment_config(adapt_epochs=0, seeds=(0,))
        report = run_experiment(cfg)
        result = report.results[0][1][0]
        assert result.accuracy == result.zero_shot_accuracy

    def test_report_shape(self):
        cfg = experiment_config(k_values=(3, 6), seeds=(0, 1))
        report = run_experiment(cfg)
        d = report.to_dict()
        assert set(d) == {"config", "results"}
        assert [entry["K"] for entry in d["results"]] == [3, 6]
        for entry in d["results"]:
            assert [s["seed"] for s in entry["seeds"]] == [0, 1]
            agg = entry["aggregate"]
            accs = [s["accuracy"] for s in entry["seeds"]]
            assert agg["mean_accuracy"] == pytest.approx(float(np.mean(accs)))
            assert agg["std_accuracy"] == pytest.approx(float(np.std(accs)))

    def test_deterministic_report(self):
        cfg = experiment_config(method="colap_xrcl")
        assert run_experiment(cfg).to_dict() == run_experiment(cfg).to_dict()

    def test_parallel_jobs_change_nothing(self):
        cfg = experiment_config(seeds=(0, 1, 2))
        assert run_experiment(cfg, jobs=1).to_dict() == run_experiment(cfg, jobs=2).to_dict()

    def test_methods_share_episode_and_source_phase(self):
        ft = run_experiment(experiment_config(method="ft")).results[0][1][0]
        xrcl = run_experiment(experiment_config(method="colap_xrcl")).results[0][1][0]
        assert ft.selected_exemplar_ids == xrcl.selected_exemplar_ids
        assert ft.zero_shot_accuracy == xrcl.zero_shot_accuracy
        assert ft.alignment_before == xrcl.alignment_before

    def test_alignment_fields_populated_for_paired_runs(self):
        report = run_experiment(experiment_config(method="colap_xrcl"))
        for result in report.results[0][1]:
            assert result.alignment_before is not None
            assert result.alignment_after is not None

    def test_scored_selection_runs_paired(self):
        report = run_experiment(experiment_config(method="colap_xrcl", selection="high"))
        result = report.results[0][1][0]
        assert len(result.selected_exemplar_ids) == 4
        assert all(i.startswith("src-") for i in result.selected_exemplar_ids)

    def test_selection_modes_pick_different_exemplars(self):
        high = run_experiment(experiment_config(selection="high")).results[0][1][0]
        low = run_experiment(experiment_config(selection="low")).results[0][1][0]
        assert set(high.selected_exemplar_ids) != set(low.selected_exemplar_ids)

    def test_bad_jobs_rejected(self):
        with pytest.raises(ConfigError):
            run_experiment(experiment_config(), jobs=0)


class TestBuildSelectedEpisode:
    def test_selected_episode_is_paired_with_twins(self):
        source, target_train, _ = small_corpora()
        params = fresh_params()
        episode = build_selected_episode(
            source, target_train, 6, "high", params, model_cfg(), seed=3
        )
        assert episode.paired and episode.K == 6
        for t, s in zip(episode.target_instances, episode.source_instances):
            assert t.parallel_id == s.id
            assert t.label == s.label

    def test_class_balanced(self):
        source, target_train, _ = small_corpora()
        episode = build_selected_episode(
            source, target_train, 6, "low", fresh_params(), model_cfg(), seed=3
        )
        labels = [s.label for s in episode.source_instances]
        assert sorted(labels) == [0, 0, 1, 1, 2, 2]

    def test_run_seed_direct_call(self):
        cfg = experiment_config(method="colap_xccl")
        corpora = generate_synthetic(cfg.synthetic)
        result = run_seed(corpora, cfg.model, cfg.train, cfg.episode, 4, 0)
        assert result.seed == 0
        assert len(result.source_trajectory) == 2
        assert len(result.adapt_trajectory) == 2
