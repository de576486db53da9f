"""
Batch-norm statistics adaptation.

The four baselines (BN-0, BN-0.1, BN-1, BN-EMA) share one rule: normalize with
``(1 - alpha) * reference + alpha * batch`` where the reference is either the
stored source statistics or an exponential moving average of past batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from gradual_tta.errors import ConfigurationError, ParameterError
from gradual_tta.models import BNStatistics, ImageBatch, LayerStatistics
from gradual_tta.networks import BNMode, Classifier, blend_moments, capturing_batch_stats


class BNVariant(str, Enum):
    """Batch-norm statistics baselines."""

    BN0 = "bn0"  # source statistics only
    BN0_1 = "bn0_1"  # 0.1 interpolation towards the test batch
    BN1 = "bn1"  # test batch statistics only
    BN_EMA = "bn_ema"  # exponential moving average over test batches


# Fixed interpolation weights; BN_EMA takes its alpha from the config.
VARIANT_ALPHA = {
    BNVariant.BN0: 0.0,
    BNVariant.BN0_1: 0.1,
    BNVariant.BN1: 1.0,
}


@dataclass
class BNAdaptConfig:
    """
    Selected BN baseline.

    Attributes:
        variant: One of bn0, bn0_1, bn1, bn_ema
        alpha: Interpolation weight; must agree with the fixed value of bn0, bn0_1
            and bn1, free in [0, 1] for bn_ema. None selects the variant default.
    """

    variant: str = "bn1"
    alpha: float | None = None

    @property
    def parsed_variant(self) -> BNVariant:
        try:
            return BNVariant(self.variant)
        except ValueError as e:
            known = ", ".join(v.value for v in BNVariant)
            raise ConfigurationError(f"Unknown BN variant '{self.variant}' (known: {known})") from e

    @property
    def effective_alpha(self) -> float:
        """Alpha actually used by the variant (0.1 for bn_ema when unset)."""
        variant = self.parsed_variant
        if variant is BNVariant.BN_EMA:
            return 0.1 if self.alpha is None else float(self.alpha)
        return VARIANT_ALPHA[variant]

    def validate(self) -> None:
        """
        Check the variant name and its alpha.

        Raises:
            ConfigurationError: For an unknown variant, an alpha outside [0, 1], or an
                alpha that contradicts a fixed-alpha variant
        """
        variant = self.parsed_variant
        if self.alpha is None:
            return
        if not 0.0 <= float(self.alpha) <= 1.0:
            raise ConfigurationError(f"bn.alpha must be in [0, 1], got {self.alpha}")
        if variant in VARIANT_ALPHA and float(self.alpha) != VARIANT_ALPHA[variant]:
            raise ConfigurationError(
                f"bn.alpha={self.alpha} contradicts variant {variant.value} "
                f"(alpha {VARIANT_ALPHA[variant]})"
            )


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")


def interpolate_stats(source: BNStatistics, test: BNStatistics, alpha: float) -> BNStatistics:
    """
    Interpolate source and test-batch statistics layer by layer.

    Means and stds are each combined as ``(1 - alpha) * source + alpha * test``; stds
    are floored at 1e-5 afterwards. alpha=0 returns the source statistics and
    alpha=1 the test statistics, bit for bit.

    Args:
        source: Stored source statistics
        test: Statistics of the current test batch
        alpha: Interpolation weight in [0, 1]

    Returns:
        New BNStatistics; the inputs are not modified

    Raises:
        ParameterError: If layer or channel structure differs, or alpha is out of range

    Example:
        >>> src = BNStatistics([LayerStatistics(torch.zeros(1), torch.ones(1))])
        >>> tst = BNStatistics([LayerStatistics(torch.full((1,), 10.0), torch.ones(1))])
        >>> interpolate_stats(src, tst, 0.1).layers[0].mean.item()
        1.0
    """
    source.check_compatible(test)
    _check_alpha(alpha)
    layers = []
    for s, t in zip(source.layers, test.layers):
        mean, std = blend_moments(s.mean, s.std, t.mean, t.std, alpha)
        layers.append(LayerStatistics(mean.clone(), std.clone()))
    return BNStatistics(layers)


def ema_update_stats(running: BNStatistics, test: BNStatistics, alpha: float) -> BNStatistics:
    """
    One step of the exponential moving average over test-batch statistics.

    ``new = (1 - alpha) * running + alpha * test`` for means and stds. The recursion
    is meant to start from the source statistics.

    Raises:
        ParameterError: If layer or channel structure differs, or alpha is out of range
    """
    return interpolate_stats(running, test, alpha)


@torch.no_grad()
def extract_batch_stats(model: Classifier, batch: ImageBatch) -> BNStatistics:
    """
    Channel moments of the pre-normalization activations of every BN layer.

    One forward pass is made with every layer normalizing by the batch's own
    statistics. Neither parameters nor stored statistics change.

    Raises:
        ParameterError: If some layer sees fewer than two values per channel
    """
    previous_mode = model.bn_mode
    was_training = model.training
    model.eval()
    model.set_bn_mode(BNMode.TRAIN_STATS)
    try:
        with capturing_batch_stats(model) as captured:
            model(batch)
    finally:
        model.set_bn_mode(previous_mode)
        model.train(was_training)
    return BNStatistics([layer_captures[0] for layer_captures in captured])


def configure_model(model: Classifier, config: BNAdaptConfig) -> None:
    """
    Put a model into the BN mode of a baseline variant.

    bn0 uses the stored source statistics, bn1 the test batch, bn0_1 the fixed
    interpolation and bn_ema the moving average, whose state is reset to the
    source statistics.
    """
    config.validate()
    variant = config.parsed_variant
    if variant is BNVariant.BN0:
        model.set_bn_mode(BNMode.EVAL_STATS, alpha=0.0)
    elif variant is BNVariant.BN1:
        model.set_bn_mode(BNMode.TRAIN_STATS, alpha=1.0)
    elif variant is BNVariant.BN0_1:
        model.set_bn_mode(BNMode.INTERPOLATED, alpha=config.effective_alpha)
    else:
        model.reset_ema()
        model.set_bn_mode(BNMode.EMA, alpha=config.effective_alpha)
