"""Tests for batch-norm statistics adaptation."""

import pytest
import torch


def _stats(*pairs):
    from gradual_tta.models import BNStatistics, LayerStatistics

    return BNStatistics(
        [
            LayerStatistics(
                torch.tensor(mean, dtype=torch.float64), torch.tensor(std, dtype=torch.float64)
            )
            for mean, std in pairs
        ]
    )


class TestInterpolateStats:
    """Tests for source/test statistics interpolation."""

    def test_alpha_zero_returns_source_bit_for_bit(self):
        """alpha = 0 reproduces the source statistics exactly."""
        from gradual_tta.bn_adapt import interpolate_stats

        source = _stats(([0.3, -1.2], [0.7, 1.9]))
        test = _stats(([5.0, 2.0], [3.0, 0.1]))
        out = interpolate_stats(source, test, 0.0)
        assert torch.equal(out.layers[0].mean, source.layers[0].mean)
        assert torch.equal(out.layers[0].std, source.layers[0].std)

    def test_alpha_one_returns_test_bit_for_bit(self):
        """alpha = 1 reproduces the test statistics exactly."""
        from gradual_tta.bn_adapt import interpolate_stats

        source = _stats(([0.3, -1.2], [0.7, 1.9]))
        test = _stats(([5.0, 2.0], [3.0, 0.1]))
        out = interpolate_stats(source, test, 1.0)
        assert torch.equal(out.layers[0].mean, test.layers[0].mean)
        assert torch.equal(out.layers[0].std, test.layers[0].std)

    def test_tenth_of_the_way(self):
        """Source mean 0 and test mean 10 at alpha 0.1 give mean 1."""
        from gradual_tta.bn_adapt import interpolate_stats

        out = interpolate_stats(_stats(([0.0], [1.0])), _stats(([10.0], [1.0])), 0.1)
        assert out.layers[0].mean.item() == pytest.approx(1.0, abs=1e-12)
        assert out.layers[0].std.item() == pytest.approx(1.0, abs=1e-12)

    def test_stds_combine_linearly_and_are_floored(self):
        """Stds are blended directly, never below the floor."""
        from gradual_tta.bn_adapt import interpolate_stats
        from gradual_tta.constants import STD_FLOOR

        out = interpolate_stats(_stats(([0.0], [1.0])), _stats(([0.0], [4.0])), 0.5)
        assert out.layers[0].std.item() == pytest.approx(2.5)

        tiny = interpolate_stats(_stats(([0.0], [1e-7])), _stats(([0.0], [1e-7])), 0.5)
        assert tiny.layers[0].std.item() == pytest.approx(STD_FLOOR)

    def test_inputs_not_modified(self):
        """Interpolation returns new tensors."""
        from gradual_tta.bn_adapt import interpolate_stats

        source = _stats(([1.0], [1.0]))
        out = interpolate_stats(source, _stats(([3.0], [2.0])), 0.0)
        out.layers[0].mean.add_(5.0)
        assert source.layers[0].mean.item() == 1.0

    def test_structure_mismatch_raises(self):
        """Different layer or channel counts are rejected."""
        from gradual_tta.bn_adapt import interpolate_stats
        from gradual_tta.errors import ParameterError

        with pytest.raises(ParameterError):
            interpolate_stats(_stats(([0.0], [1.0])), _stats(([0.0, 1.0], [1.0, 1.0])), 0.5)
        with pytest.raises(ParameterError):
            interpolate_stats(
                _stats(([0.0], [1.0])), _stats(([0.0], [1.0]), ([0.0], [1.0])), 0.5
            )

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_out_of_range_raises(self, alpha):
        """alpha outside [0, 1] is rejected."""
        from gradual_tta.bn_adapt import interpolate_stats
        from gradual_tta.errors import ParameterError

        with pytest.raises(ParameterError):
            interpolate_stats(_stats(([0.0], [1.0])), _stats(([1.0], [1.0])), alpha)


class TestEmaUpdate:
    """Tests for the moving average over test statistics."""

    def test_constant_stream_converges_geometrically(self):
        """|mu_t - v| equals (1 - alpha)^t |mu_0 - v| for a constant stream."""
        from gradual_tta.bn_adapt import ema_update_stats

        running = _stats(([0.0, 2.0], [1.0, 0.5]))
        target = _stats(([3.0, -1.0], [2.0, 4.0]))
        for t in range(1, 51):
            running = ema_update_stats(running, target, 0.1)
            expected_mean = torch.tensor([3.0, -1.0], dtype=torch.float64) - 0.9**t * torch.tensor(
                [3.0, -3.0], dtype=torch.float64
            )
            expected_std = torch.tensor([2.0, 4.0], dtype=torch.float64) - 0.9**t * torch.tensor(
                [1.0, 3.5], dtype=torch.float64
            )
            assert torch.allclose(running.layers[0].mean, expected_mean, atol=1e-10, rtol=0)
            assert torch.allclose(running.layers[0].std, expected_std, atol=1e-10, rtol=0)

    def test_alpha_zero_freezes(self):
        """alpha = 0 keeps the running statistics."""
        from gradual_tta.bn_adapt import ema_update_stats

        running = _stats(([0.5], [1.5]))
        out = ema_update_stats(running, _stats(([9.0], [9.0])), 0.0)
        assert torch.equal(out.layers[0].mean, running.layers[0].mean)

    def test_two_steps_from_source(self):
        """Two steps of 0.1 towards 1 from 0 reach 0.19."""
        from gradual_tta.bn_adapt import ema_update_stats

        running = _stats(([0.0], [1.0]))
        for _ in range(2):
            running = ema_update_stats(running, _stats(([1.0], [1.0])), 0.1)
        assert running.layers[0].mean.item() == pytest.approx(0.19, abs=1e-12)

    def test_fixed_point(self):
        """Statistics equal to the running value stay put."""
        from gradual_tta.bn_adapt import ema_update_stats

        running = _stats(([0.4], [1.3]))
        out = ema_update_stats(running, running.clone(), 0.1)
        assert out.layers[0].mean.item() == pytest.approx(0.4, abs=1e-12)
        assert out.layers[0].std.item() == pytest.approx(1.3, abs=1e-12)


class TestExtractBatchStats:
    """Tests for reading batch moments from a model."""

    def test_source_data_matches_stored_statistics(self, tiny_model, tiny_data):
        """The full source set reproduces the calibrated source statistics."""
        from gradual_tta.bn_adapt import extract_batch_stats

        batch = extract_batch_stats(tiny_model, tiny_data.images)
        stored = tiny_model.source_statistics()
        for got, want in zip(batch.layers, stored.layers):
            assert torch.allclose(got.mean, want.mean, atol=1e-4)
            assert torch.allclose(got.std, want.std, atol=1e-4)

    def test_source_subset_is_close_to_stored(self, tiny_model, tiny_data):
        """A large source batch lands within 10% of the stored statistics."""
        from gradual_tta.bn_adapt import extract_batch_stats

        batch = extract_batch_stats(tiny_model, tiny_data.images[:64])
        for got, want in zip(batch.layers, tiny_model.source_statistics().layers):
            scale = want.mean.abs() + want.std
            assert ((got.mean - want.mean).abs() <= 0.1 * scale + 1e-3).all()
            assert ((got.std - want.std).abs() <= 0.1 * scale + 1e-3).all()

    def test_disjoint_batches_differ(self, tiny_model, tiny_data):
        """Two different batches give different statistics."""
        from gradual_tta.bn_adapt import extract_batch_stats

        a = extract_batch_stats(tiny_model, tiny_data.images[:16])
        b = extract_batch_stats(tiny_model, tiny_data.images[16:32])
        assert not torch.equal(a.layers[0].mean, b.layers[0].mean)

    def test_model_left_unchanged(self, tiny_model, test_batch):
        """Extraction changes no parameter, buffer, BN mode or train flag."""
        from gradual_tta.bn_adapt import extract_batch_stats
        from gradual_tta.networks import BNMode, parameter_checksum

        before = parameter_checksum(tiny_model)
        stats = extract_batch_stats(tiny_model, test_batch)
        assert len(stats) == 3
        assert parameter_checksum(tiny_model) == before
        assert tiny_model.bn_mode is BNMode.EVAL_STATS
        assert not tiny_model.training

    def test_constant_input_floors_std(self, tiny_model):
        """A constant batch yields the floor std at the first layer."""
        from gradual_tta.bn_adapt import extract_batch_stats
        from gradual_tta.constants import STD_FLOOR

        stats = extract_batch_stats(tiny_model, torch.zeros(4, 3, 16, 16))
        assert torch.allclose(stats.layers[0].std, torch.full_like(stats.layers[0].std, STD_FLOOR))

    def test_single_value_per_channel_raises(self, tiny_model):
        """A 1x1 single-sample batch is degenerate."""
        from gradual_tta.bn_adapt import extract_batch_stats
        from gradual_tta.errors import ParameterError

        with pytest.raises(ParameterError, match="degenerate std"):
            extract_batch_stats(tiny_model, torch.rand(1, 3, 1, 1))


class TestConfigureModel:
    """Tests for selecting a BN baseline."""

    @pytest.mark.parametrize(
        "variant,mode,alpha",
        [
            ("bn0", "eval_stats", 0.0),
            ("bn1", "train_stats", 1.0),
            ("bn0_1", "interpolated", 0.1),
            ("bn_ema", "ema", 0.1),
        ],
    )
    def test_variant_selects_mode(self, tiny_model, variant, mode, alpha):
        """Each variant maps to its BN mode and alpha."""
        from gradual_tta.bn_adapt import BNAdaptConfig, configure_model

        configure_model(tiny_model, BNAdaptConfig(variant=variant))
        assert tiny_model.bn_mode.value == mode
        assert all(layer.alpha == alpha for layer in tiny_model.bn_layers())

    def test_bn0_predictions_ignore_batch(self, tiny_model, test_batch):
        """Under bn0 a sample's prediction does not depend on its batch."""
        from gradual_tta.bn_adapt import BNAdaptConfig, configure_model
        from gradual_tta.networks import forward

        configure_model(tiny_model, BNAdaptConfig(variant="bn0"))
        with torch.no_grad():
            full = forward(tiny_model, test_batch)
            half = forward(tiny_model, test_batch[:8])
        assert torch.allclose(full[:8], half, atol=1e-6)

    def test_bn_ema_starts_from_source_and_moves(self, tiny_model, test_batch):
        """The EMA state begins at the source statistics and follows committed batches."""
        from gradual_tta.bn_adapt import BNAdaptConfig, configure_model
        from gradual_tta.networks import committing_ema, forward

        configure_model(tiny_model, BNAdaptConfig(variant="bn_ema", alpha=0.2))
        source = tiny_model.source_statistics()
        assert torch.equal(tiny_model.ema_statistics().layers[0].mean, source.layers[0].mean)

        with torch.no_grad():
            forward(tiny_model, test_batch)
        assert torch.equal(tiny_model.ema_statistics().layers[0].mean, source.layers[0].mean)

        with torch.no_grad(), committing_ema(tiny_model):
            forward(tiny_model, test_batch)
        assert not torch.equal(tiny_model.ema_statistics().layers[0].mean, source.layers[0].mean)

    def test_bn_ema_first_layer_follows_recursion(self, tiny_model, test_batch):
        """The committed first-layer EMA equals one interpolation step towards the batch."""
        from gradual_tta.bn_adapt import (
            BNAdaptConfig,
            configure_model,
            extract_batch_stats,
            interpolate_stats,
        )
        from gradual_tta.models import BNStatistics
        from gradual_tta.networks import committing_ema, forward

        configure_model(tiny_model, BNAdaptConfig(variant="bn_ema", alpha=0.2))
        batch = extract_batch_stats(tiny_model, test_batch)
        expected = interpolate_stats(
            BNStatistics(tiny_model.source_statistics().layers[:1]),
            BNStatistics(batch.layers[:1]),
            0.2,
        )
        with torch.no_grad(), committing_ema(tiny_model):
            forward(tiny_model, test_batch)
        got = tiny_model.ema_statistics().layers[0]
        assert torch.allclose(got.mean, expected.layers[0].mean, atol=1e-6)
        assert torch.allclose(got.std, expected.layers[0].std, atol=1e-6)


class TestBNAdaptConfig:
    """Tests for BN baseline configuration."""

    def test_unknown_variant_raises(self):
        """An unknown variant name is a configuration error."""
        from gradual_tta.bn_adapt import BNAdaptConfig
        from gradual_tta.errors import ConfigurationError

        with pytest.raises(ConfigurationError, match="Unknown BN variant"):
            BNAdaptConfig(variant="bn2").validate()

    def test_contradicting_alpha_raises(self):
        """A fixed-alpha variant refuses another alpha."""
        from gradual_tta.bn_adapt import BNAdaptConfig
        from gradual_tta.errors import ConfigurationError

        with pytest.raises(ConfigurationError, match="contradicts"):
            BNAdaptConfig(variant="bn1", alpha=0.5).validate()

    def test_ema_alpha_range(self):
        """bn_ema accepts any alpha in [0, 1] and nothing else."""
        from gradual_tta.bn_adapt import BNAdaptConfig
        from gradual_tta.errors import ConfigurationError

        BNAdaptConfig(variant="bn_ema", alpha=0.05).validate()
        assert BNAdaptConfig(variant="bn_ema").effective_alpha == 0.1
        with pytest.raises(ConfigurationError):
            BNAdaptConfig(variant="bn_ema", alpha=1.5).validate()
