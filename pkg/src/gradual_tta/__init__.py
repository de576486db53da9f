"""
Gradual Test-Time Adaptation

Adapt a source-trained classifier online to a stream of shifting test domains by
training on intermediate domains (mixup or style transfer of stored source data)
and on confidence-filtered pseudo-labels, with batch-norm statistics baselines and
a built-in synthetic corruption benchmark.
"""

__version__ = "0.1.0"

from gradual_tta.errors import (  # noqa: E402
    ConfigurationError,
    EmptyMemoryError,
    ParameterError,
    TrainingError,
    UpdateRejectedError,
)
from gradual_tta.models import (  # noqa: E402
    BNStatistics,
    CorruptionSpec,
    DomainSchedule,
    LabeledImageSet,
    SequenceReport,
    StyleMoments,
    ThresholdState,
)

__all__ = [
    "BNStatistics",
    "ConfigurationError",
    "CorruptionSpec",
    "DomainSchedule",
    "EmptyMemoryError",
    "LabeledImageSet",
    "ParameterError",
    "SequenceReport",
    "StyleMoments",
    "ThresholdState",
    "TrainingError",
    "UpdateRejectedError",
    "__version__",
]
