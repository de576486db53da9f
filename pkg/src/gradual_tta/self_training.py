"""
Self-training on test pseudo-labels.

Pseudo-labels are the argmax of the test softmax. An adaptive confidence threshold,
an exponential moving average of the square-rooted mean maximum probability, filters
unreliable ones before the cross-entropy on the kept samples is taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from gradual_tta.constants import LOG_CLAMP
from gradual_tta.errors import ConfigurationError, ParameterError
from gradual_tta.models import PseudoLabelBatch, ThresholdState


@dataclass
class SelfTrainingConfig:
    """
    Attributes:
        enabled: Whether the test cross-entropy is used at all
        filtering: Whether pseudo-labels are filtered by the adaptive threshold
        alpha_th: Momentum of the threshold
    """

    enabled: bool = True
    filtering: bool = True
    alpha_th: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.alpha_th <= 1.0:
            raise ConfigurationError(f"st.alpha_th must be in [0, 1], got {self.alpha_th}")


def _check_softmax(softmax_batch: torch.Tensor) -> None:
    if softmax_batch.ndim != 2:
        raise ParameterError(
            f"softmax batch must be (N, C), got shape {tuple(softmax_batch.shape)}"
        )


def pseudo_labels(softmax_batch: torch.Tensor) -> PseudoLabelBatch:
    """
    Argmax class and maximum probability of every row.

    Ties resolve to the lowest class index.

    Example:
        >>> pseudo_labels(torch.full((1, 4), 0.25)).labels.tolist()
        [0]
    """
    _check_softmax(softmax_batch)
    probabilities = softmax_batch.detach()
    # argmax returns the first maximal index
    labels = probabilities.argmax(dim=1)
    confidences = probabilities.gather(1, labels[:, None]).squeeze(1)
    return PseudoLabelBatch(labels=labels, confidences=confidences)


def update_threshold(state: ThresholdState, softmax_batch: torch.Tensor) -> ThresholdState:
    """
    Advance the adaptive threshold by one batch.

    ``gamma = (1 - alpha_th) * gamma + alpha_th * sqrt(mean_i max_c p_ic)`` over all
    samples of the batch. The first batch sets gamma to the square-root term.

    Args:
        state: Current threshold
        softmax_batch: Test softmax outputs, (N, C)

    Returns:
        New ThresholdState

    Raises:
        ParameterError: If the batch is empty
    """
    _check_softmax(softmax_batch)
    if softmax_batch.shape[0] == 0:
        raise ParameterError("cannot update the threshold on an empty batch")

    statistic = math.sqrt(float(softmax_batch.detach().max(dim=1).values.mean().item()))
    if not state.initialized:
        return replace(state, gamma=statistic, initialized=True)
    gamma = (1.0 - state.alpha_th) * state.gamma + state.alpha_th * statistic
    return replace(state, gamma=gamma)


def filter_by_confidence(batch: PseudoLabelBatch, gamma: float) -> PseudoLabelBatch:
    """Mark the samples whose confidence is at least ``gamma``."""
    return PseudoLabelBatch(
        labels=batch.labels,
        confidences=batch.confidences,
        keep_mask=batch.confidences >= gamma,
    )


def _nll(labels: torch.Tensor, softmax_batch: torch.Tensor) -> torch.Tensor:
    picked = softmax_batch.gather(1, labels[:, None].to(torch.long)).squeeze(1)
    return -picked.clamp_min(LOG_CLAMP).log()


def ce_loss_test(pseudo: PseudoLabelBatch, softmax_batch: torch.Tensor) -> torch.Tensor | None:
    """
    Cross-entropy of the test softmax against its pseudo-labels.

    The mean runs over the kept samples only; with no mask set every sample counts.

    Returns:
        Scalar loss, or None when no sample was kept (the caller skips the term)
    """
    _check_softmax(softmax_batch)
    losses = _nll(pseudo.labels, softmax_batch)
    if pseudo.keep_mask is not None:
        losses = losses[pseudo.keep_mask]
    if losses.numel() == 0:
        return None
    return losses.mean()


def ce_loss_source(labels: torch.Tensor, softmax_batch: torch.Tensor) -> torch.Tensor:
    """
    Supervised cross-entropy on (transformed) source samples.

    Raises:
        ParameterError: If the batch is empty or labels do not match its length
    """
    _check_softmax(softmax_batch)
    if softmax_batch.shape[0] == 0:
        raise ParameterError("source batch is empty")
    if labels.shape != (softmax_batch.shape[0],):
        raise ParameterError(
            f"labels shape {tuple(labels.shape)} does not match {softmax_batch.shape[0]} rows"
        )
    return _nll(labels, softmax_batch).mean()
