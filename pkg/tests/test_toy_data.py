"""Tests for the synthetic corruption benchmark."""

import pytest
import torch


class TestGenerateDataset:
    """Tests for procedural dataset generation."""

    def test_every_class_appears_once_when_samples_equal_classes(self):
        """Four samples of four classes hold each class exactly once."""
        from gradual_tta.toy_data import generate_dataset

        data = generate_dataset(seed=0, class_count=4, samples=4, side=32)
        assert sorted(data.labels.tolist()) == [0, 1, 2, 3]
        assert data.images.shape == (4, 3, 32, 32)

    def test_values_in_unit_range(self):
        """Generated pixels lie in [0, 1]."""
        from gradual_tta.toy_data import generate_dataset

        data = generate_dataset(seed=1, class_count=6, samples=60, side=16)
        assert data.images.min() >= 0.0
        assert data.images.max() <= 1.0

    def test_same_seed_is_bit_identical(self):
        """Generation is a pure function of its arguments."""
        from gradual_tta.toy_data import generate_dataset

        a = generate_dataset(seed=7, class_count=3, samples=30, side=16)
        b = generate_dataset(seed=7, class_count=3, samples=30, side=16)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        """Different seeds give different images."""
        from gradual_tta.toy_data import generate_dataset

        a = generate_dataset(seed=0, class_count=3, samples=30, side=16)
        b = generate_dataset(seed=1, class_count=3, samples=30, side=16)
        assert not torch.equal(a.images, b.images)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"class_count": 1, "samples": 10, "side": 32},
            {"class_count": 4, "samples": 3, "side": 32},
            {"class_count": 4, "samples": 8, "side": 8},
        ],
    )
    def test_out_of_range_sizes_raise(self, kwargs):
        """Class count below 2, fewer samples than classes and tiny sides are rejected."""
        from gradual_tta.errors import ParameterError
        from gradual_tta.toy_data import generate_dataset

        with pytest.raises(ParameterError):
            generate_dataset(seed=0, **kwargs)


class TestApplyCorruption:
    """Tests for the corruption operators."""

    @pytest.fixture
    def clean(self):
        from gradual_tta.toy_data import generate_dataset

        return generate_dataset(seed=0, class_count=4, samples=8, side=32).images

    @pytest.mark.parametrize(
        "kind", ["gaussian_noise", "blur", "contrast", "brightness", "pixelate"]
    )
    def test_distortion_non_decreasing_in_severity(self, clean, kind):
        """Mean absolute pixel change grows with severity for a fixed seed."""
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        changes = [
            (apply_corruption(clean, CorruptionSpec(kind, level), seed=5) - clean)
            .abs()
            .mean()
            .item()
            for level in range(1, 6)
        ]
        for weaker, stronger in zip(changes, changes[1:]):
            assert stronger >= weaker - 1e-6
        assert changes[-1] > 0

    @pytest.mark.parametrize(
        "kind", ["gaussian_noise", "blur", "contrast", "brightness", "pixelate"]
    )
    def test_per_image_distortion_non_decreasing(self, kind):
        """Every single image is changed at least as much at each higher severity."""
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption, generate_dataset

        clean = generate_dataset(seed=3, class_count=6, samples=120, side=32).images
        changes = torch.stack(
            [
                (apply_corruption(clean, CorruptionSpec(kind, level), seed=5) - clean)
                .abs()
                .mean(dim=(1, 2, 3))
                for level in range(1, 6)
            ]
        )
        steps = changes[1:] - changes[:-1]
        assert steps.min().item() >= -1e-6

    def test_pixelate_is_a_blend_toward_the_coarse_grid(self):
        """Pixelate changes scale with the tabulated weights."""
        from gradual_tta.constants import PIXELATE_WEIGHT
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        ramp = torch.linspace(0.1, 0.9, 32 * 32).reshape(1, 1, 32, 32)
        full = apply_corruption(ramp, CorruptionSpec("pixelate", 5)) - ramp
        mild = apply_corruption(ramp, CorruptionSpec("pixelate", 1)) - ramp
        assert torch.allclose(mild, PIXELATE_WEIGHT[0] * full, atol=1e-6)

    def test_brightness_on_flat_image_is_exact_shift(self):
        """Brightness adds the tabulated shift to an unclipped flat image."""
        from gradual_tta.constants import BRIGHTNESS_SHIFT
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        flat = torch.full((2, 3, 16, 16), 0.5)
        out = apply_corruption(flat, CorruptionSpec("brightness", 3))
        assert torch.allclose(out, flat + BRIGHTNESS_SHIFT[2])

    def test_output_is_clipped(self, clean):
        """Strong noise still yields pixels in [0, 1]."""
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        out = apply_corruption(clean, CorruptionSpec("gaussian_noise", 5), seed=0)
        assert out.min() >= 0.0
        assert out.max() <= 1.0

    def test_noise_is_replayable_by_seed(self, clean):
        """The same seed draws the same noise, another seed draws different noise."""
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        spec = CorruptionSpec("gaussian_noise", 2)
        a = apply_corruption(clean, spec, seed=11)
        b = apply_corruption(clean, spec, seed=11)
        c = apply_corruption(clean, spec, seed=12)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_contrast_keeps_image_mean(self):
        """Contrast reduction pulls pixels toward the per-image mean."""
        from gradual_tta.models import CorruptionSpec
        from gradual_tta.toy_data import apply_corruption

        ramp = torch.linspace(0.2, 0.8, 16 * 16).reshape(1, 1, 16, 16)
        out = apply_corruption(ramp, CorruptionSpec("contrast", 4))
        assert out.mean().item() == pytest.approx(ramp.mean().item(), abs=1e-6)
        assert out.std().item() < ramp.std().item()

    @pytest.mark.parametrize("severity", [0, 6, 2.5, True])
    def test_invalid_severity_raises(self, severity):
        """Severities outside the integers 1..5 are rejected."""
        from gradual_tta.errors import ParameterError
        from gradual_tta.models import CorruptionSpec

        with pytest.raises(ParameterError):
            CorruptionSpec("blur", severity)

    def test_unknown_kind_raises(self):
        """An unknown corruption name is rejected."""
        from gradual_tta.errors import ParameterError
        from gradual_tta.models import CorruptionSpec

        with pytest.raises(ParameterError, match="Unknown corruption kind"):
            CorruptionSpec("fog", 3)

    def test_non_spec_argument_raises(self, clean):
        """A bare tuple is not accepted as a corruption."""
        from gradual_tta.errors import ParameterError
        from gradual_tta.toy_data import apply_corruption

        with pytest.raises(ParameterError):
            apply_corruption(clean, ("blur", 3))


class TestBuildSchedule:
    """Tests for continual and gradual schedules."""

    def test_continual_visits_each_kind_at_level_five(self):
        """A continual schedule has one level-5 domain per kind."""
        from gradual_tta.toy_data import build_schedule

        schedule = build_schedule("continual", ["blur", "contrast", "pixelate"])
        assert len(schedule) == 3
        assert schedule.severities == [5, 5, 5]
        assert [e.spec.kind.value for e in schedule.entries] == ["blur", "contrast", "pixelate"]

    def test_gradual_single_kind_cycles_severities(self):
        """A gradual schedule runs the 1..5..1 cycle."""
        from gradual_tta.toy_data import build_schedule

        schedule = build_schedule("gradual", ["blur"])
        assert schedule.severities == [1, 2, 3, 4, 5, 4, 3, 2, 1]

    def test_gradual_two_kinds_switch_after_cycle(self):
        """The tenth domain of a two-kind gradual schedule is the second kind at level 1."""
        from gradual_tta.toy_data import build_schedule

        schedule = build_schedule("gradual", ["blur", "contrast"])
        assert len(schedule) == 18
        assert str(schedule.entries[9].spec) == "contrast@1"

    def test_batches_per_domain_sets_total(self):
        """Every domain lasts the requested number of batches."""
        from gradual_tta.toy_data import build_schedule

        schedule = build_schedule("continual", ["blur", "contrast"], batches_per_domain=3)
        assert schedule.total_batches == 6

    @pytest.mark.parametrize(
        "mode,kinds",
        [("stepwise", ["blur"]), ("continual", []), ("gradual", ["blur", "blur"])],
    )
    def test_invalid_layouts_raise(self, mode, kinds):
        """Unknown modes, empty kind lists and repeated kinds are rejected."""
        from gradual_tta.errors import ParameterError
        from gradual_tta.toy_data import build_schedule

        with pytest.raises(ParameterError):
            build_schedule(mode, kinds)


class TestTestStream:
    """Tests for iterating a schedule over a test set."""

    def test_batch_count_and_domains(self, tiny_data):
        """The stream yields total_batches batches in domain order."""
        from gradual_tta.toy_data import build_schedule, iter_test_stream

        schedule = build_schedule("continual", ["blur", "brightness"], batches_per_domain=2)
        batches = list(iter_test_stream(schedule, tiny_data, batch_size=10, seed=0))
        assert len(batches) == 4
        assert [b.domain_index for b in batches] == [0, 0, 1, 1]
        assert [b.batch_index for b in batches] == [0, 1, 2, 3]
        assert all(b.images.shape[0] == 10 for b in batches)

    def test_stream_is_replayable(self, tiny_data):
        """Two iterations with the same seed are identical."""
        from gradual_tta.toy_data import build_schedule, iter_test_stream

        schedule = build_schedule("continual", ["gaussian_noise"], batches_per_domain=2)
        first = list(iter_test_stream(schedule, tiny_data, batch_size=8, seed=4))
        second = list(iter_test_stream(schedule, tiny_data, batch_size=8, seed=4))
        for a, b in zip(first, second):
            assert torch.equal(a.images, b.images)
            assert torch.equal(a.labels, b.labels)

    def test_stream_wraps_small_test_set(self, tiny_data):
        """A domain needing more samples than the set holds reuses samples."""
        from gradual_tta.toy_data import build_schedule, iter_test_stream

        small = tiny_data.subset(torch.arange(5))
        schedule = build_schedule("continual", ["blur"], batches_per_domain=3)
        batches = list(iter_test_stream(schedule, small, batch_size=4, seed=0))
        assert sum(b.images.shape[0] for b in batches) == 12


class TestDatasetExport:
    """Tests for the flat binary export."""

    def test_export_and_import(self, tmp_path, tiny_data):
        """An exported dataset imports back bit-identical."""
        from gradual_tta.toy_data import load_dataset, save_dataset

        sidecar = save_dataset(tiny_data, tmp_path / "data" / "toy")
        assert sidecar.suffix == ".json"
        assert sidecar.with_suffix(".bin").exists()

        loaded = load_dataset(tmp_path / "data" / "toy")
        assert torch.equal(loaded.images, tiny_data.images)
        assert torch.equal(loaded.labels, tiny_data.labels)
        assert loaded.class_count == tiny_data.class_count

    def test_missing_files_raise(self, tmp_path):
        """Importing a missing dataset raises FileNotFoundError."""
        from gradual_tta.toy_data import load_dataset

        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nothing")

    def test_constants_version_mismatch_raises(self, tmp_path, tiny_data):
        """Datasets written with other constants are refused."""
        import json

        from gradual_tta.errors import ParameterError
        from gradual_tta.toy_data import load_dataset, save_dataset

        sidecar = save_dataset(tiny_data, tmp_path / "toy")
        meta = json.loads(sidecar.read_text())
        meta["constants_version"] = "0"
        sidecar.write_text(json.dumps(meta))

        with pytest.raises(ParameterError, match="constants version"):
            load_dataset(tmp_path / "toy")


class TestStreamSeed:
    """Tests for derived seeds."""

    def test_pure_function_of_keys(self):
        """Equal keys give equal seeds, different keys different seeds."""
        from gradual_tta.toy_data import stream_seed

        assert stream_seed(1, 2, 3) == stream_seed(1, 2, 3)
        assert stream_seed(1, 2, 3) != stream_seed(1, 3, 2)
