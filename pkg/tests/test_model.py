"""Encoder, head, flattening, and checkpoint-averaging tests."""

import numpy as np
import pytest

from langalign.errors import ConfigError, DimensionMismatch, EmptyList, ShapeMismatch
from langalign.model import (
    ModelConfig,
    ModelParams,
    average_checkpoints,
    default_tap_layer,
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


def small_config(**overrides):
    base = dict(input_dim=4, hidden_dim=4, num_layers=2, num_labels=3)
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    def test_default_tap_is_four_fifths_up(self):
        assert default_tap_layer(12) == 10
        assert default_tap_layer(1) == 1
        assert default_tap_layer(2) == 2
        assert default_tap_layer(5) == 4
        assert ModelConfig(4, 4, 12, 2).tap_layer == 10

    def test_explicit_tap_respected(self):
        assert small_config(tap_layer=1).tap_layer == 1

    def test_tap_bounds_enforced(self):
        with pytest.raises(ConfigError):
            small_config(tap_layer=0)
        with pytest.raises(ConfigError):
            small_config(tap_layer=3)

    def test_num_labels_floor(self):
        with pytest.raises(ConfigError):
            small_config(num_labels=1)

    def test_activation_enum(self):
        with pytest.raises(ConfigError):
            small_config(activation="gelu")

    def test_dict_round_trip(self):
        cfg = small_config(tap_layer=1, activation="relu")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**small_config().to_dict(), "dropout": 0.1})

    def test_missing_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"input_dim": 4})


class TestInit:
    def test_deterministic(self):
        cfg = small_config()
        a = init_params(cfg, seed=11)
        b = init_params(cfg, seed=11)
        np.testing.assert_array_equal(flatten_params(a), flatten_params(b))

    def test_seed_changes_params(self):
        cfg = small_config()
        a = init_params(cfg, seed=11)
        b = init_params(cfg, seed=12)
        assert not np.array_equal(flatten_params(a), flatten_params(b))

    def test_parameter_count(self):
        # (4*4+4) + (4*4+4) + (3*4+3) = 55
        cfg = small_config()
        assert num_params(cfg) == 55
        assert init_params(cfg, 0).num_params() == 55

    def test_biases_start_at_zero(self):
        params = init_params(small_config(), seed=5)
        for b in params.layer_biases:
            np.testing.assert_array_equal(b, np.zeros_like(b))
        np.testing.assert_array_equal(params.head_bias, np.zeros(3))

    def test_weight_bounds(self):
        cfg = ModelConfig(input_dim=16, hidden_dim=9, num_layers=2, num_labels=2)
        params = init_params(cfg, seed=3)
        assert np.max(np.abs(params.layer_weights[0])) <= 1 / 4
        assert np.max(np.abs(params.layer_weights[1])) <= 1 / 3
        assert np.max(np.abs(params.head_weights)) <= 1 / 3


class TestFlatten:
    def test_round_trip_bit_exact(self):
        cfg = small_config()
        params = init_params(cfg, seed=2)
        again = unflatten_params(flatten_params(params), cfg)
        for a, b in zip(params.layer_weights, again.layer_weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(params.layer_biases, again.layer_biases):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(params.head_weights, again.head_weights)
        np.testing.assert_array_equal(params.head_bias, again.head_bias)

    def test_wrong_length_rejected(self):
        cfg = small_config()
        with pytest.raises(ShapeMismatch):
            unflatten_params(np.zeros(54), cfg)


class TestEncode:
    def test_tap_at_top_equals_final(self):
        cfg = small_config(tap_layer=2)
        params = init_params(cfg, seed=4)
        final, tapped = encode(params, cfg, np.array([0.1, -0.2, 0.3, 0.4]))
        np.testing.assert_array_equal(final, tapped)

    def test_tanh_zero_input_zero_output(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=2, num_layers=1, num_labels=2)
        eye = np.eye(2)
        params = ModelParams(
            layer_weights=(eye,),
            layer_biases=(np.zeros(2),),
            head_weights=np.zeros((2, 2)),
            head_bias=np.zeros(2),
        )
        final, _ = encode(params, cfg, np.zeros(2))
        np.testing.assert_array_equal(final, np.zeros(2))

    def test_relu_hand_computed(self):
        # relu(W x + b) with W = I, b = (1, -1), x = (2, 0) -> (3, 0)
        cfg = ModelConfig(
            input_dim=2, hidden_dim=2, num_layers=1, num_labels=2, activation="relu"
        )
        params = ModelParams(
            layer_weights=(np.eye(2),),
            layer_biases=(np.array([1.0, -1.0]),),
            head_weights=np.zeros((2, 2)),
            head_bias=np.zeros(2),
        )
        final, _ = encode(params, cfg, np.array([2.0, 0.0]))
        np.testing.assert_array_equal(final, np.array([3.0, 0.0]))

    def test_dimension_mismatch(self):
        cfg = small_config()
        params = init_params(cfg, seed=1)
        with pytest.raises(DimensionMismatch):
            encode(params, cfg, np.zeros(5))

    def test_deterministic(self):
        cfg = small_config()
        params = init_params(cfg, seed=1)
        x = np.array([0.3, 0.1, -0.5, 0.2])
        f1, t1 = encode(params, cfg, x)
        f2, t2 = encode(params, cfg, x)
        np.testing.assert_array_equal(f1, f2)
        np.testing.assert_array_equal(t1, t2)

    def test_batch_matches_single(self):
        # Batched and single-row matmuls may take different BLAS paths, so
        # agreement is to rounding, not bitwise.
        cfg = small_config(tap_layer=1)
        params = init_params(cfg, seed=9)
        xs = np.random.default_rng(0).normal(size=(5, 4))
        cache = forward_batch(params, cfg, xs)
        for i in range(5):
            final, tapped = encode(params, cfg, xs[i])
            np.testing.assert_allclose(cache["final"][i], final, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(cache["tapped"][i], tapped, rtol=1e-12, atol=1e-15)


class TestScoreLabels:
    def test_zero_weights_leave_bias(self):
        params = ModelParams(
            layer_weights=(np.eye(2),),
            layer_biases=(np.zeros(2),),
            head_weights=np.zeros((3, 2)),
            head_bias=np.array([0.1, 0.2, 0.3]),
        )
        np.testing.assert_array_equal(
            score_labels(params, np.array([5.0, -5.0])), [0.1, 0.2, 0.3]
        )

    def test_hand_computed_dots(self):
        params = ModelParams(
            layer_weights=(np.eye(2),),
            layer_biases=(np.zeros(2),),
            head_weights=np.array([[1.0, 0.0], [0.0, 1.0]]),
            head_bias=np.zeros(2),
        )
        np.testing.assert_array_equal(
            score_labels(params, np.array([0.5, -0.5])), [0.5, -0.5]
        )

    def test_argmax_scale_invariant_with_zero_bias(self):
        rng = np.random.default_rng(3)
        params = ModelParams(
            layer_weights=(np.eye(4),),
            layer_biases=(np.zeros(4),),
            head_weights=rng.normal(size=(3, 4)),
            head_bias=np.zeros(3),
        )
        r = rng.normal(size=4)
        base = int(np.argmax(score_labels(params, r)))
        for alpha in (0.1, 2.0, 50.0):
            assert int(np.argmax(score_labels(params, alpha * r))) == base

    def test_dimension_mismatch(self):
        params = init_params(small_config(), seed=0)
        with pytest.raises(DimensionMismatch):
            score_labels(params, np.zeros(5))


class TestAverageCheckpoints:
    def test_singleton_identity(self):
        params = init_params(small_config(), seed=7)
        mean = average_checkpoints([params])
        np.testing.assert_array_equal(flatten_params(mean), flatten_params(params))

    def test_identical_inputs_bit_exact(self):
        params = init_params(small_config(), seed=7)
        mean = average_checkpoints([params, params, params])
        np.testing.assert_array_equal(flatten_params(mean), flatten_params(params))

    def test_two_point_mean(self):
        cfg = small_config()
        a = unflatten_params(np.full(num_params(cfg), 0.2), cfg)
        b = unflatten_params(np.full(num_params(cfg), 0.4), cfg)
        mean = average_checkpoints([a, b])
        np.testing.assert_allclose(
            flatten_params(mean), np.full(num_params(cfg), 0.3), atol=1e-15
        )

    def test_commutes_with_flatten(self):
        cfg = small_config()
        ckpts = [init_params(cfg, seed=s) for s in range(4)]
        mean = average_checkpoints(ckpts)
        direct = np.mean(np.stack([flatten_params(p) for p in ckpts]), axis=0)
        np.testing.assert_allclose(flatten_params(mean), direct, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyList):
            average_checkpoints([])

    def test_shape_mismatch_rejected(self):
        a = init_params(small_config(), seed=0)
        b = init_params(small_config(hidden_dim=5), seed=0)
        with pytest.raises(ShapeMismatch):
            average_checkpoints([a, b])


class TestCheckpointFile:
    def test_save_load_bit_exact(self, tmp_path):
        cfg = small_config(tap_layer=1, activation="relu")
        params = init_params(cfg, seed=21)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, cfg)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        np.testing.assert_array_equal(flatten_params(loaded), flatten_params(params))

    def test_rewrite_is_byte_identical(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, seed=3)
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_checkpoint(p1, params, cfg)
        save_checkpoint(p2, params, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"params": []}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)
