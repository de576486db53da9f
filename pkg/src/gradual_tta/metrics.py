"""Error metrics."""

from __future__ import annotations

import torch

from gradual_tta.errors import ParameterError


def error_rate(predictions: torch.Tensor, labels: torch.Tensor) -> float:
    """
    Classification error in percent, ``100 * (1 - accuracy)``.

    Raises:
        ParameterError: If the inputs are empty or differ in length

    Example:
        >>> error_rate(torch.tensor([0, 1, 2, 3]), torch.tensor([0, 1, 2, 0]))
        25.0
    """
    if predictions.shape != labels.shape:
        raise ParameterError(
            f"predictions {tuple(predictions.shape)} and labels {tuple(labels.shape)} differ"
        )
    if predictions.numel() == 0:
        raise ParameterError("cannot compute an error rate without predictions")
    wrong = int((predictions != labels).sum().item())
    return 100.0 * wrong / predictions.numel()
