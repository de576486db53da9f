"""
Data models for the gradual-tta toolkit.

This module defines the core data structures shared by the data, adaptation and
reporting layers. Images are ``(batch, channel, height, width)`` float tensors in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import torch

from gradual_tta.constants import SEVERITY_LEVELS
from gradual_tta.errors import ParameterError

ImageBatch = torch.Tensor


class CorruptionKind(str, Enum):
    """Corruption families of the synthetic benchmark."""

    GAUSSIAN_NOISE = "gaussian_noise"
    BLUR = "blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    PIXELATE = "pixelate"

    @classmethod
    def parse(cls, value: str | CorruptionKind) -> CorruptionKind:
        """Convert a string to a CorruptionKind, raising ParameterError for unknown names."""
        try:
            return cls(value)
        except ValueError as e:
            known = ", ".join(k.value for k in cls)
            raise ParameterError(f"Unknown corruption kind '{value}' (known: {known})") from e


class ScheduleMode(str, Enum):
    """Test stream layouts."""

    CONTINUAL = "continual"
    GRADUAL = "gradual"


@dataclass
class LabeledImageSet:
    """
    A labeled set of images.

    Attributes:
        images: Float tensor of shape (N, C, H, W) with values in [0, 1]
        labels: Integer tensor of shape (N,) with values in [0, class_count)
        class_count: Number of classes
        seed: Seed the set was generated from
    """

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ParameterError(f"images must be rank 4, got shape {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ParameterError(
                f"labels shape {tuple(self.labels.shape)} does not match "
                f"{self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices: torch.Tensor) -> LabeledImageSet:
        """Return the samples at the given indices (duplicates allowed)."""
        return LabeledImageSet(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            seed=self.seed,
        )

    def split(self, first: int) -> tuple[LabeledImageSet, LabeledImageSet]:
        """Split into the first ``first`` samples and the rest."""
        if not 0 < first < len(self):
            raise ParameterError(f"split point {first} outside (0, {len(self)})")
        head = torch.arange(first)
        tail = torch.arange(first, len(self))
        return self.subset(head), self.subset(tail)


@dataclass(frozen=True)
class CorruptionSpec:
    """
    A corruption kind at a severity level.

    Attributes:
        kind: Corruption family
        severity: Integer severity in [1, 5], strictly ordered by distortion strength
    """

    kind: CorruptionKind
    severity: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CorruptionKind.parse(self.kind))
        if isinstance(self.severity, bool) or not isinstance(self.severity, int):
            raise ParameterError(f"severity must be an integer, got {self.severity!r}")
        if self.severity not in SEVERITY_LEVELS:
            raise ParameterError(f"severity must be in [1, 5], got {self.severity}")

    def __str__(self) -> str:
        return f"{self.kind.value}@{self.severity}"


@dataclass(frozen=True)
class ScheduleEntry:
    """One test domain of a schedule: a corruption and how many batches it lasts."""

    spec: CorruptionSpec
    batch_count: int


@dataclass
class DomainSchedule:
    """
    Ordered sequence of test domains.

    Attributes:
        entries: Domains in stream order
        mode: Whether the schedule is continual or gradual
    """

    entries: list[ScheduleEntry]
    mode: ScheduleMode

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total_batches(self) -> int:
        return sum(entry.batch_count for entry in self.entries)

    @property
    def severities(self) -> list[int]:
        return [entry.spec.severity for entry in self.entries]


@dataclass
class LayerStatistics:
    """Per-channel mean and standard deviation of one BN layer."""

    mean: torch.Tensor
    std: torch.Tensor


@dataclass
class BNStatistics:
    """
    Normalization statistics of every BN layer of a model, in forward order.

    Attributes:
        layers: One LayerStatistics per BN layer
    """

    layers: list[LayerStatistics] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def clone(self) -> BNStatistics:
        return BNStatistics(
            [LayerStatistics(layer.mean.clone(), layer.std.clone()) for layer in self.layers]
        )

    def check_compatible(self, other: BNStatistics) -> None:
        """
        Verify both statistics describe the same layer and channel structure.

        Raises:
            ParameterError: If the layer count or any channel count differs
        """
        if len(self.layers) != len(other.layers):
            raise ParameterError(
                f"BN statistics have {len(self.layers)} vs {len(other.layers)} layers"
            )
        for index, (a, b) in enumerate(zip(self.layers, other.layers)):
            if a.mean.shape != b.mean.shape or a.std.shape != b.std.shape:
                raise ParameterError(
                    f"BN layer {index}: channel shapes {tuple(a.mean.shape)} "
                    f"and {tuple(b.mean.shape)} differ"
                )


@dataclass
class StyleMoments:
    """
    Channel-wise style moments taken at the encoder tap layers.

    Each tensor is either ``(C_l,)`` for a single style or ``(N, C_l)`` for one
    style per image.

    Attributes:
        means: One mean tensor per tap layer
        stds: One std tensor per tap layer
        class_id: Class the moments belong to, for class-conditional moments
    """

    means: list[torch.Tensor]
    stds: list[torch.Tensor]
    class_id: int | None = None

    def __post_init__(self) -> None:
        if len(self.means) != len(self.stds):
            raise ParameterError("StyleMoments needs as many std tensors as mean tensors")

    @property
    def num_layers(self) -> int:
        return len(self.means)

    @property
    def batch_size(self) -> int | None:
        """Number of per-image styles, or None for a single shared style."""
        top = self.means[-1]
        return int(top.shape[0]) if top.ndim == 2 else None

    def select(self, indices: torch.Tensor) -> StyleMoments:
        """Pick per-image styles by index (only for batched moments)."""
        if self.batch_size is None:
            return self
        return StyleMoments(
            [m[indices] for m in self.means], [s[indices] for s in self.stds], self.class_id
        )

    def detach(self) -> StyleMoments:
        return StyleMoments(
            [m.detach() for m in self.means], [s.detach() for s in self.stds], self.class_id
        )


@dataclass(frozen=True)
class ThresholdState:
    """
    Adaptive confidence threshold.

    Attributes:
        gamma: Current threshold in [0, 1]
        alpha_th: Momentum of the exponential moving average
        initialized: Whether gamma has been set from a first batch
    """

    gamma: float = 0.0
    alpha_th: float = 0.1
    initialized: bool = False


@dataclass
class PseudoLabelBatch:
    """
    Pseudo-labels for a batch of test predictions.

    Attributes:
        labels: Argmax class per sample
        confidences: Maximum softmax probability per sample
        keep_mask: Boolean mask of samples passing the confidence filter, or None if unset
    """

    labels: torch.Tensor
    confidences: torch.Tensor
    keep_mask: torch.Tensor | None = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def kept_count(self) -> int:
        if self.keep_mask is None:
            return len(self)
        return int(self.keep_mask.sum().item())

    @property
    def kept_fraction(self) -> float:
        return self.kept_count / len(self) if len(self) else 0.0


@dataclass
class UpdateReport:
    """Losses of one optimizer update inside an adaptation step."""

    source_loss: float | None = None
    test_loss: float | None = None
    decoder_loss: float | None = None
    kept_fraction: float | None = None
    gamma: float | None = None
    test_loss_skipped: bool = False
    rejected: bool = False


@dataclass
class StepReport:
    """
    Result of adapting to one test batch.

    Attributes:
        step: Index of the adaptation step within the run
        updates: One entry per optimizer update (``updates_per_batch`` of them)
    """

    step: int
    updates: list[UpdateReport] = field(default_factory=list)

    @property
    def adapted(self) -> bool:
        return bool(self.updates)

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "updates": [vars(update).copy() for update in self.updates],
        }


@dataclass
class DomainReport:
    """Error rate of one scheduled test domain."""

    index: int
    kind: str
    severity: int
    samples: int
    error: float

    def to_dict(self) -> dict[str, Any]:
        return vars(self).copy()


@dataclass
class SequenceReport:
    """
    Result of running an adaptation method over a test stream.

    Attributes:
        label: Method label of the run
        seed: Seed of the run
        domains: Per-domain error rates in stream order
        steps: Step reports of every model update
        partial_buffer_predictions: Predictions made from a partially filled sliding buffer
        stream_shorter_than_buffer: Set when the whole stream never filled the buffer
    """

    label: str
    seed: int
    domains: list[DomainReport] = field(default_factory=list)
    steps: list[StepReport] = field(default_factory=list)
    partial_buffer_predictions: int = 0
    stream_shorter_than_buffer: bool = False

    @property
    def mean_error(self) -> float | None:
        if not self.domains:
            return None
        return sum(d.error for d in self.domains) / len(self.domains)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "seed": self.seed,
            "mean_error": self.mean_error,
            "domains": [d.to_dict() for d in self.domains],
            "steps": [s.to_dict() for s in self.steps],
            "partial_buffer_predictions": self.partial_buffer_predictions,
            "stream_shorter_than_buffer": self.stream_shorter_than_buffer,
        }
