"""Model construction, forward shapes, and checkpoint serialization."""

import numpy as np
import pytest

from dfdeblur import autodiff as ad
from dfdeblur import network


def tiny_config(**kw):
    kw.setdefault("width_scale", 0.0625)
    return network.ModelConfig(**kw)


def rand_input(shape=(1, 3, 32, 32), seed=70):
    return ad.Tensor(np.random.default_rng(seed).random(shape, dtype=np.float32))


class TestConfig:
    def test_default_channel_schedule(self):
        cfg = network.ModelConfig()
        assert cfg.input_channels == 3
        assert cfg.base_channels == (64, 128, 256, 512, 1024)
        assert cfg.scaled_channels() == (64, 128, 256, 512, 1024)

    def test_width_scale_rounds(self):
        cfg = network.ModelConfig(width_scale=0.125)
        assert cfg.scaled_channels() == (8, 16, 32, 64, 128)

    def test_dict_roundtrip(self):
        cfg = tiny_config(dense_block_layers=1, use_skips=False)
        assert network.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            network.ModelConfig(width_scale=0.0)
        with pytest.raises(ValueError):
            network.ModelConfig(base_channels=(8, 16, 32))


class TestForward:
    def test_output_shapes_and_heads(self):
        model = network.build_model(tiny_config())
        out = network.forward(model, rand_input(), training=False)
        assert set(out) == {"depth", "aif"}
        assert out["depth"].data.shape == (1, 1, 32, 32)
        assert out["aif"].data.shape == (1, 3, 32, 32)

    def test_batched_training_input(self):
        model = network.build_model(tiny_config())
        out = network.forward(model, rand_input((2, 3, 32, 32)), training=True)
        assert out["depth"].data.shape == (2, 1, 32, 32)

    def test_head_subset(self):
        model = network.build_model(tiny_config())
        out = network.forward(model, rand_input(), training=False, heads=("depth",))
        assert set(out) == {"depth"}

    def test_single_head_model_has_no_other_params(self):
        model = network.build_model(tiny_config(), heads=("depth",))
        assert not any(name.startswith("aif") for name in model.params)
        out = network.forward(model, rand_input(), training=False)
        assert set(out) == {"depth"}

    def test_input_extent_must_be_multiple_of_32(self):
        model = network.build_model(tiny_config())
        with pytest.raises(ad.ShapeMismatchError):
            network.forward(model, rand_input((1, 3, 48, 48)), training=False)

    def test_seed_determinism(self):
        cfg = tiny_config()
        a = network.build_model(cfg, seed=5)
        b = network.build_model(cfg, seed=5)
        c = network.build_model(cfg, seed=6)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        assert any(np.any(a.params[n].data != c.params[n].data) for n in a.params)

    def test_forward_is_pure_in_eval_mode(self):
        model = network.build_model(tiny_config())
        x = rand_input()
        first = network.forward(model, x, training=False)["depth"].data.copy()
        second = network.forward(model, x, training=False)["depth"].data
        np.testing.assert_array_equal(first, second)

    def test_training_mode_updates_norm_buffers(self):
        # Batch of two: the 1x1 bottleneck needs more than one value per
        # channel to estimate a batch variance.
        model = network.build_model(tiny_config())
        before = {k: v.mean.copy() for k, v in model.norm_stats.items()}
        network.forward(model, rand_input((2, 3, 32, 32)), training=True)
        assert any(np.any(model.norm_stats[k].mean != before[k]) for k in before)

    def test_single_sample_training_batch_rejected(self):
        model = network.build_model(tiny_config())
        with pytest.raises(ad.DegenerateBatchError):
            network.forward(model, rand_input(), training=True)

    def test_gradients_reach_every_parameter(self):
        model = network.build_model(tiny_config())
        out = network.forward(model, rand_input((2, 3, 32, 32)), training=True)
        loss = ad.add(ad.reduce_mean(ad.square(out["depth"])),
                      ad.reduce_mean(ad.square(out["aif"])))
        ad.backward(loss)
        missing = [n for n, p in model.params.items() if p.grad is None]
        assert missing == []


class TestIntrospection:
    def test_encoder_stage_channels_visible_in_weights(self):
        model = network.build_model(network.ModelConfig(width_scale=0.0625))
        chans = model.config.scaled_channels()
        for i, c in enumerate(chans, start=1):
            w = model.params[f"encoder.stage{i}.down.conv.weight"]
            assert w.data.shape[0] == c

    def test_param_count_scales_with_width(self):
        small = network.build_model(tiny_config())
        big = network.build_model(network.ModelConfig(width_scale=0.125))
        assert network.count_params(big) > network.count_params(small)


class TestCheckpoint:
    def test_roundtrip_preserves_forward(self, tmp_path):
        cfg = tiny_config()
        model = network.build_model(cfg, seed=1)
        network.forward(model, rand_input((2, 3, 32, 32), seed=71), training=True)
        x = rand_input(seed=72)
        want = network.forward(model, x, training=False)["depth"].data.copy()
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)

        fresh = network.build_model(cfg, seed=99)
        network.load_checkpoint(fresh, path)
        got = network.forward(fresh, x, training=False)["depth"].data
        np.testing.assert_array_equal(got, want)

    def test_file_starts_with_magic(self, tmp_path):
        model = network.build_model(tiny_config())
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        assert path.read_bytes()[:4] == network.CHECKPOINT_MAGIC

    def test_corrupt_magic_rejected(self, tmp_path):
        model = network.build_model(tiny_config())
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(network.BadCheckpointError):
            network.read_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = network.build_model(tiny_config())
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(network.BadCheckpointError):
            network.read_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(network.build_model(tiny_config()), path)
        other = network.build_model(tiny_config(dense_block_layers=1))
        with pytest.raises(network.BadCheckpointError):
            network.load_checkpoint(other, path)

    def test_missing_entry_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(network.build_model(tiny_config(), heads=("depth",)), path)
        both = network.build_model(tiny_config())
        with pytest.raises(network.BadCheckpointError):
            network.load_checkpoint(both, path)
