"""Tests for the package's public surface."""


class TestPackageExports:
    """Tests for names exported from gradual_tta."""

    def test_version(self):
        """The package exposes a dotted version string."""
        from gradual_tta import __version__

        assert __version__.count(".") == 2

    def test_all_names_resolve(self):
        """Every name in __all__ is importable from the package."""
        import gradual_tta

        for name in gradual_tta.__all__:
            assert hasattr(gradual_tta, name), name

    def test_errors_are_value_or_runtime_errors(self):
        """Library errors subclass the matching builtin families."""
        from gradual_tta import (
            ConfigurationError,
            EmptyMemoryError,
            ParameterError,
            TrainingError,
            UpdateRejectedError,
        )

        assert issubclass(ParameterError, ValueError)
        assert issubclass(ConfigurationError, ValueError)
        assert issubclass(TrainingError, RuntimeError)
        assert issubclass(UpdateRejectedError, RuntimeError)
        assert issubclass(EmptyMemoryError, LookupError)
