"""Network assembly, forward/backward, and checkpoint round-trip tests."""

import numpy as np
import pytest

from flamesift.errors import ConfigError, ParseError, ShapeError
from flamesift.network import (
    NetworkConfig,
    backward,
    build,
    config_descriptor,
    conv,
    deconv,
    dense,
    desk_config,
    flatten,
    forward,
    load_checkpoint,
    paperlike_config,
    parse_descriptor,
    pool,
    reshape,
    save_checkpoint,
    shape_chain,
    unpool,
    validate,
)
from flamesift.training import mse_grad, mse_loss

from oracles import finite_difference, relative_error


def tiny_config(seed=0):
    """Smallest chain with every layer kind, 1x8x8 in and out."""
    return NetworkConfig(
        input_shape=(1, 8, 8),
        layers=[
            conv(2, 3, "relu"),       # 2x6x6
            pool(2),                  # 2x3x3
            flatten(),                # 18
            dense(8, "relu"),
            dense(18, "relu"),
            reshape(2, 3, 3),
            unpool(2),                # 2x6x6
            deconv(1, 3, "identity"),  # 1x8x8
        ],
        seed=seed,
    )


def analytic_count(config):
    """Closed-form parameter count: conv z_o*(z_i*c^2+1), dense out*(in+1)."""
    shapes = shape_chain(config)
    total = 0
    for in_shape, layer in zip(shapes, config.layers):
        if layer.kind in ("conv", "deconv"):
            total += layer.out_maps * (in_shape[0] * layer.size**2 + 1)
        elif layer.kind == "dense":
            total += layer.units * (in_shape[0] + 1)
    return total


class TestConfigValidation:
    def test_desk_config_shape_chain(self):
        config = desk_config(64, 64)
        shapes = shape_chain(config)
        assert shapes[0] == (1, 64, 64)
        assert shapes[-1] == (1, 64, 64)
        # encoder loses 2 per conv, halves per pool: 64->62->60->30->28->14->12
        assert (16, 12, 12) in shapes

    def test_non_dividing_pool_rejected(self):
        config = NetworkConfig(
            input_shape=(1, 9, 9),
            layers=[conv(2, 3), pool(2), flatten(), dense(8), dense(18),
                    reshape(2, 3, 3), unpool(2), deconv(1, 3)],
        )
        with pytest.raises(ConfigError, match="layer 1 .*pool"):
            validate(config)

    def test_open_output_shape_rejected(self):
        config = tiny_config()
        config.layers[-1] = deconv(1, 2)  # 6 + 1 = 7 != 8
        with pytest.raises(ConfigError, match="autoencoder"):
            validate(config)

    def test_missing_required_kind_rejected(self):
        # closes shapes but has no unpool layer
        config = NetworkConfig(
            input_shape=(1, 8, 8),
            layers=[conv(2, 3), pool(2), flatten(), dense(8), dense(72),
                    reshape(2, 6, 6), deconv(1, 3)],
        )
        with pytest.raises(ConfigError, match="unpool"):
            validate(config)

    def test_terminal_deconv_required(self):
        config = tiny_config()
        config.layers.insert(0, deconv(1, 1))
        with pytest.raises(ConfigError, match="deconv"):
            validate(config)

    def test_bad_reshape_product(self):
        config = tiny_config()
        config.layers[5] = reshape(2, 3, 4)
        with pytest.raises(ConfigError, match="reshape"):
            validate(config)

    def test_preset_rejects_dims_not_multiple_of_four(self):
        with pytest.raises(ConfigError, match="divisible by 4"):
            desk_config(63, 64)


class TestBuild:
    def test_tiny_parameter_count_matches_analytic(self):
        config = tiny_config()
        model = build(config)
        # conv 2*(9+1)=20, dense 8*19=152, dense 18*9=162, deconv 1*19=19
        assert analytic_count(config) == 20 + 152 + 162 + 19
        assert model.parameter_count() == analytic_count(config)

    def test_desk_parameter_count_matches_analytic(self):
        config = desk_config(64, 64)
        model = build(config)
        assert model.parameter_count() == analytic_count(config)

    def test_paperlike_parameter_count_matches_analytic(self):
        config = paperlike_config(64, 64)
        assert build(config).parameter_count() == analytic_count(config)

    def test_build_is_deterministic(self):
        a = build(tiny_config(seed=5))
        b = build(tiny_config(seed=5))
        for x, y in zip(a.parameter_arrays(), b.parameter_arrays()):
            assert np.array_equal(x, y)

    def test_biases_start_at_zero(self):
        model = build(tiny_config())
        for p in model.params:
            if p is not None:
                assert not p.bias.any()


class TestForward:
    def test_zero_weight_model_outputs_zero(self):
        model = build(tiny_config())
        for p in model.params:
            if p is not None:
                p.weights[...] = 0.0
                p.bias[...] = 0.0
        out, _ = forward(model, np.random.default_rng(0).normal(size=(1, 8, 8)))
        assert not out.any()

    def test_batch_independence(self):
        model = build(tiny_config(seed=1))
        rng = np.random.default_rng(2)
        frame = rng.normal(size=(1, 8, 8))
        batch = np.stack([frame] + [rng.normal(size=(1, 8, 8)) for _ in range(7)])
        single, _ = forward(model, frame)
        batched, _ = forward(model, batch)
        assert np.array_equal(batched[0], single)

    def test_output_shape_closes(self):
        model = build(tiny_config(seed=3))
        out, _ = forward(model, np.zeros((4, 1, 8, 8)))
        assert out.shape == (4, 1, 8, 8)

    def test_matches_kernel_composition_oracle(self):
        from flamesift import kernels

        model = build(tiny_config(seed=4))
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 8, 8))
        out, _ = forward(model, x)

        k_conv, _, _, d1, d2, _, _, k_dec = model.params
        h = kernels.conv_forward(x, k_conv, activation="relu")
        h, _ = kernels.maxpool_forward(h, 2)
        h = h.reshape(-1)
        h = kernels.dense_forward(h, d1.weights, d1.bias, activation="relu")
        h = kernels.dense_forward(h, d2.weights, d2.bias, activation="relu")
        h = h.reshape(2, 3, 3)
        h = kernels.unpool(h, 2)
        h = kernels.deconv_forward(h, k_dec, activation="identity")
        assert np.max(np.abs(out - h)) < 1e-12

    def test_shape_mismatch_raises(self):
        model = build(tiny_config())
        with pytest.raises(ShapeError, match="input"):
            forward(model, np.zeros((1, 9, 9)))


class TestBackward:
    def test_zero_grad_output(self):
        model = build(tiny_config(seed=6))
        x = np.random.default_rng(7).normal(size=(2, 1, 8, 8))
        _, cache = forward(model, x)
        grads = backward(model, cache, np.zeros((2, 1, 8, 8)))
        for g in grads:
            if g is not None:
                assert not g.weights.any() and not g.bias.any()

    def test_missing_cache_rejected(self):
        model = build(tiny_config())
        with pytest.raises(ValueError, match="cache"):
            backward(model, None, np.zeros((1, 1, 8, 8)))

    def test_final_bias_gradient_is_grad_sum(self):
        model = build(tiny_config(seed=8))
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 1, 8, 8))
        g = rng.normal(size=(3, 1, 8, 8))
        _, cache = forward(model, x)
        grads = backward(model, cache, g)
        assert grads[-1].bias[0] == pytest.approx(g.sum(), rel=1e-12)

    def test_end_to_end_matches_finite_differences(self):
        model = build(tiny_config(seed=10))
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 1, 8, 8))
        target = rng.normal(size=(2, 1, 8, 8))

        def loss():
            out, _ = forward(model, x)
            return mse_loss(out, target)

        out, cache = forward(model, x)
        grads = backward(model, cache, mse_grad(out, target))
        flat = []
        for g in grads:
            if g is not None:
                flat.extend([g.weights, g.bias])
        fd = finite_difference(loss, model.parameter_arrays())
        worst = max(relative_error(a, n) for a, n in zip(flat, fd))
        assert worst < 1e-5


class TestCheckpoint:
    def test_descriptor_round_trip(self):
        config = tiny_config(seed=12)
        text = config_descriptor(config, epoch=7, best_valid=0.125)
        parsed, epoch, best = parse_descriptor(text)
        assert parsed.input_shape == config.input_shape
        assert parsed.seed == 12
        assert epoch == 7 and best == 0.125
        assert [l.kind for l in parsed.layers] == [l.kind for l in config.layers]

    def test_save_load_preserves_forward_outputs(self, tmp_path):
        model = build(tiny_config(seed=13))
        path = tmp_path / "model.fsck"
        save_checkpoint(model, path, epoch=3, best_valid=0.5)
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == 3 and ckpt.best_valid == 0.5

        probe = np.random.default_rng(14).normal(size=(2, 1, 8, 8))
        # stored precision is float32: a second round trip is bit-identical
        out1, _ = forward(ckpt.model, probe)
        path2 = tmp_path / "model2.fsck"
        save_checkpoint(ckpt.model, path2)
        out2, _ = forward(load_checkpoint(path2).model, probe)
        assert np.array_equal(out1, out2)

    def test_round_trip_parameter_count(self, tmp_path):
        config = desk_config(64, 64, seed=15)
        model = build(config)
        path = tmp_path / "desk.fsck"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path).model
        assert loaded.parameter_count() == model.parameter_count()

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "model.fsck"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ParseError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "model.fsck"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(ParseError, match="version"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "model.fsck"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_flipped_payload_bit_fails_crc(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "model.fsck"
        save_checkpoint(model, path)
        data = bytearray(path.read_bytes())
        data[-20] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(ParseError, match="checksum|corrupt"):
            load_checkpoint(path)

    def test_identical_builds_give_identical_bytes(self, tmp_path):
        a = tmp_path / "a.fsck"
        b = tmp_path / "b.fsck"
        save_checkpoint(build(tiny_config(seed=16)), a)
        save_checkpoint(build(tiny_config(seed=16)), b)
        assert a.read_bytes() == b.read_bytes()
