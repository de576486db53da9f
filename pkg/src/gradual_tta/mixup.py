"""
Intermediate domains by label-free mixup.

Every source image is blended with the test image whose softmax output is most
similar to its own; the mixed image keeps the source label.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from gradual_tta.errors import ConfigurationError, ParameterError
from gradual_tta.models import ImageBatch
from gradual_tta.networks import Classifier, forward

DEFAULT_LAMBDA_MIX = 1.0 / 3.0


@dataclass
class MixupConfig:
    """
    Attributes:
        enabled: Whether source batches are mixed with test images
        lambda_mix: Weight of the test image, in [0, 1]
    """

    enabled: bool = True
    lambda_mix: float = DEFAULT_LAMBDA_MIX

    def validate(self) -> None:
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ConfigurationError(f"mixup.lambda must be in [0, 1], got {self.lambda_mix}")


def select_partner(source_softmax: torch.Tensor, test_softmax_batch: torch.Tensor) -> int:
    """
    Index of the test row with the largest dot product with ``source_softmax``.

    Ties resolve to the lowest index.

    Raises:
        ParameterError: If the test batch is empty or the class counts differ

    Example:
        >>> select_partner(torch.tensor([0.0, 1.0]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        1
    """
    if source_softmax.ndim != 1:
        raise ParameterError(f"source softmax must be a vector, got {tuple(source_softmax.shape)}")
    return int(select_partners(source_softmax[None], test_softmax_batch)[0].item())


def select_partners(source_softmax: torch.Tensor, test_softmax_batch: torch.Tensor) -> torch.Tensor:
    """Vectorized select_partner: one partner index per source row."""
    if test_softmax_batch.ndim != 2 or test_softmax_batch.shape[0] == 0:
        raise ParameterError("test softmax batch must be a non-empty (N, C) matrix")
    if source_softmax.shape[-1] != test_softmax_batch.shape[1]:
        raise ParameterError(
            f"class count mismatch: {source_softmax.shape[-1]} vs {test_softmax_batch.shape[1]}"
        )
    similarity = source_softmax @ test_softmax_batch.T
    return similarity.argmax(dim=1)


def mix_images(x_source: ImageBatch, x_test: ImageBatch, lambda_mix: float) -> ImageBatch:
    """
    Pixel-wise ``(1 - lambda_mix) * x_source + lambda_mix * x_test``.

    The endpoints return copies of the respective input.

    Raises:
        ParameterError: If the shapes differ or lambda_mix is outside [0, 1]
    """
    if x_source.shape != x_test.shape:
        raise ParameterError(
            f"cannot mix images of shapes {tuple(x_source.shape)} and {tuple(x_test.shape)}"
        )
    if not 0.0 <= lambda_mix <= 1.0:
        raise ParameterError(f"lambda_mix must be in [0, 1], got {lambda_mix}")
    if lambda_mix == 0.0:
        return x_source.clone()
    if lambda_mix == 1.0:
        return x_test.clone()
    return ((1.0 - lambda_mix) * x_source + lambda_mix * x_test).clamp(0.0, 1.0)


@torch.no_grad()
def build_mixed_batch(
    source_images: ImageBatch,
    source_labels: torch.Tensor,
    test_batch: ImageBatch,
    model: Classifier,
    config: MixupConfig,
    test_softmax: torch.Tensor | None = None,
) -> tuple[ImageBatch, torch.Tensor]:
    """
    Mix every source image with its most similar test image.

    Softmax outputs for partner selection are computed by ``model`` under its
    current BN mode. Labels are returned untouched.

    Args:
        source_images: Source images, (M, C, H, W)
        source_labels: Source labels, (M,)
        test_batch: Test images, (N, C, H, W)
        model: Current classifier
        config: Mixup settings
        test_softmax: Precomputed test softmax, reused when given

    Returns:
        Tuple of (mixed images, source labels)
    """
    if source_images.shape[0] == 0 or test_batch.shape[0] == 0:
        raise ParameterError("source and test batches must be non-empty")
    if not config.enabled:
        return source_images.clone(), source_labels.clone()

    source_softmax = forward(model, source_images)
    if test_softmax is None:
        test_softmax = forward(model, test_batch)
    partners = select_partners(source_softmax, test_softmax.detach())
    mixed = mix_images(source_images, test_batch[partners], config.lambda_mix)
    return mixed, source_labels.clone()
