"""
Online adaptation loop.

Every test batch is first predicted, then used to adapt. An adaptation step trains
on labeled source samples moved towards the test domain (mixup or style transfer)
and self-trains on confidence-filtered test pseudo-labels, with one optimizer step
on the summed losses. The model is never reset between domains.
"""

from __future__ import annotations

import copy
import math
import warnings
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from gradual_tta.bn_adapt import BNAdaptConfig, BNVariant, configure_model
from gradual_tta.errors import ConfigurationError, ParameterError, UpdateRejectedError
from gradual_tta.metrics import error_rate
from gradual_tta.mixup import MixupConfig, build_mixed_batch
from gradual_tta.models import (
    DomainReport,
    DomainSchedule,
    ImageBatch,
    LabeledImageSet,
    SequenceReport,
    StepReport,
    StyleMoments,
    ThresholdState,
    UpdateReport,
)
from gradual_tta.networks import (
    BNMode,
    Classifier,
    apply_update,
    committing_ema,
    forward,
    make_optimizer,
)
from gradual_tta.self_training import (
    SelfTrainingConfig,
    ce_loss_source,
    ce_loss_test,
    filter_by_confidence,
    pseudo_labels,
    update_threshold,
)
from gradual_tta.style_transfer import (
    StyleConfig,
    StyleMemory,
    StyleNetwork,
    memory_push,
    memory_sample,
    style_of,
    stylize,
    train_decoder_step,
)
from gradual_tta.toy_data import iter_test_stream, stream_seed

ProgressCallback = Callable[[str], None]


class AdaptMethod(str, Enum):
    """Adaptation methods, from pure evaluation to full intermediate-domain training."""

    SOURCE = "source"
    BN_VARIANT = "bn_variant"
    SELF_TRAINING_ONLY = "self_training_only"
    SOURCE_REPLAY = "source_replay"
    GTTA_MIX = "gtta_mix"
    GTTA_ST = "gtta_st"

    @property
    def trains(self) -> bool:
        return self not in (AdaptMethod.SOURCE, AdaptMethod.BN_VARIANT)

    @property
    def uses_source(self) -> bool:
        return self in (AdaptMethod.SOURCE_REPLAY, AdaptMethod.GTTA_MIX, AdaptMethod.GTTA_ST)


@dataclass
class AdaptConfig:
    """
    Settings of one adaptation run.

    Attributes:
        method: Adaptation method
        updates_per_batch: Optimizer updates per test batch; each repeat resamples source
        lr: Adam learning rate of the classifier
        batch_size_test: Test batch size
        batch_size_source: Source batch size per update
        source_fraction: Fraction of the source set kept in the reservoir
        source_loss_weight: Weight of the source cross-entropy
        test_loss_weight: Weight of the test cross-entropy
        adapt_with_batch_stats: Use batch statistics in the adaptation forward passes
        buffer_size: Sliding-window size for single-sample streams (None for batch mode)
        bn: BN baseline used for predictions
        mixup: Mixup settings
        style: Style network settings
        st: Self-training settings
    """

    method: str = "gtta_mix"
    updates_per_batch: int = 1
    lr: float = 1e-5
    batch_size_test: int = 64
    batch_size_source: int = 32
    source_fraction: float = 1.0
    source_loss_weight: float = 1.0
    test_loss_weight: float = 1.0
    adapt_with_batch_stats: bool = True
    buffer_size: int | None = None
    bn: BNAdaptConfig = field(default_factory=BNAdaptConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    st: SelfTrainingConfig = field(default_factory=SelfTrainingConfig)

    @property
    def parsed_method(self) -> AdaptMethod:
        try:
            return AdaptMethod(self.method)
        except ValueError as e:
            known = ", ".join(m.value for m in AdaptMethod)
            raise ConfigurationError(f"Unknown method '{self.method}' (known: {known})") from e

    def validate(self) -> None:
        """
        Check value ranges and that the sub-configs fit the method.

        Raises:
            ConfigurationError: On the first problem found
        """
        method = self.parsed_method
        self.bn.validate()
        self.mixup.validate()
        self.style.validate()
        self.st.validate()
        if self.updates_per_batch < 1:
            raise ConfigurationError(
                f"updates_per_batch must be >= 1, got {self.updates_per_batch}"
            )
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size_test < 1 or self.batch_size_source < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not 0.0 < self.source_fraction <= 1.0:
            raise ConfigurationError(
                f"source_fraction must be in (0, 1], got {self.source_fraction}"
            )
        if self.buffer_size is not None and self.buffer_size < 2:
            raise ConfigurationError(f"buffer_size must be >= 2, got {self.buffer_size}")
        if method is AdaptMethod.SELF_TRAINING_ONLY and not self.st.enabled:
            raise ConfigurationError("self_training_only needs st.enabled")
        if method is AdaptMethod.GTTA_MIX and not self.mixup.enabled:
            raise ConfigurationError("gtta_mix needs mixup.enabled (use source_replay instead)")
        if method is AdaptMethod.SOURCE and self.bn.parsed_variant is not BNVariant.BN0:
            raise ConfigurationError("method 'source' predicts with source statistics (bn0)")

    def prediction_bn(self) -> BNAdaptConfig:
        if self.parsed_method is AdaptMethod.SOURCE:
            return BNAdaptConfig(variant=BNVariant.BN0.value)
        return self.bn


@dataclass
class SourceReservoir:
    """
    Labeled source samples retained for replay.

    Attributes:
        images: Retained source images
        labels: Their labels
        fraction: Share of the full source set that was kept
        seed: Seed that selected the subset
    """

    images: torch.Tensor
    labels: torch.Tensor
    fraction: float = 1.0
    seed: int = 0

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @classmethod
    def from_dataset(cls, data: LabeledImageSet, fraction: float, seed: int) -> SourceReservoir:
        """
        Keep ``round(fraction * len(data))`` samples (at least one).

        fraction=1.0 keeps the whole set in its original order.
        """
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"source fraction must be in (0, 1], got {fraction}")
        total = len(data)
        size = min(total, max(1, math.floor(fraction * total + 0.5))) if total else 0
        if size == total:
            indices = torch.arange(total)
        else:
            order = np.random.default_rng(stream_seed(seed, total)).permutation(total)[:size]
            indices = torch.from_numpy(np.sort(order))
        return cls(data.images[indices], data.labels[indices], fraction, seed)


def sample_source(
    reservoir: SourceReservoir, n: int, step_seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Draw ``n`` samples uniformly with replacement.

    Args:
        reservoir: Retained source samples
        n: Number of samples
        step_seed: Seed of this draw, derived from (run seed, step)

    Returns:
        Tuple of (images, labels)

    Raises:
        ConfigurationError: If the reservoir is empty
    """
    if len(reservoir) == 0:
        raise ConfigurationError("source reservoir is empty")
    indices = np.random.default_rng(step_seed).integers(0, len(reservoir), size=n)
    index = torch.from_numpy(indices)
    return reservoir.images[index], reservoir.labels[index]


@dataclass
class SlidingBuffer:
    """
    The last ``capacity`` test samples of a single-sample stream.

    Attributes:
        capacity: Window size b (>= 2)
        items: Samples in arrival order, oldest first
        since_update: Samples pushed since the last update fired
    """

    capacity: int
    items: deque[torch.Tensor] = field(default_factory=deque)
    since_update: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 2:
            raise ParameterError(f"buffer capacity must be >= 2, got {self.capacity}")
        self.items = deque(self.items, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def partial(self) -> bool:
        return len(self.items) < self.capacity

    def push(self, sample: torch.Tensor) -> bool:
        """Add a sample; return True when an update is due."""
        self.items.append(sample)
        self.since_update += 1
        if self.since_update == self.capacity:
            self.since_update = 0
            return True
        return False

    def window(self) -> ImageBatch:
        """Buffered samples, padded by repetition to capacity; the newest comes last."""
        if not self.items:
            raise ParameterError("buffer is empty")
        samples = list(self.items)
        padding = [samples[i % len(samples)] for i in range(self.capacity - len(samples))]
        return torch.stack(padding + samples)


@dataclass
class AdaptationState:
    """All mutable state of one adaptation run."""

    model: Classifier
    config: AdaptConfig
    seed: int
    optimizer: torch.optim.Optimizer | None = None
    threshold: ThresholdState = field(default_factory=ThresholdState)
    reservoir: SourceReservoir | None = None
    style: StyleNetwork | None = None
    memory: StyleMemory | None = None
    step: int = 0


def create_state(
    model: Classifier,
    config: AdaptConfig,
    seed: int,
    source: LabeledImageSet | None = None,
    style_network: StyleNetwork | None = None,
    copy_model: bool = True,
) -> AdaptationState:
    """
    Prepare the state of a run.

    Args:
        model: Source-trained classifier
        config: Run settings
        seed: Run seed
        source: Source set the reservoir is drawn from (methods with source replay)
        style_network: Pre-trained style network (gtta_st)
        copy_model: Work on copies of the model and style network

    Raises:
        ConfigurationError: If the config is invalid or a needed input is missing
    """
    config.validate()
    method = config.parsed_method
    if copy_model:
        model = copy.deepcopy(model)
        style_network = copy.deepcopy(style_network)
    model.eval()
    configure_model(model, config.prediction_bn())

    state = AdaptationState(
        model=model,
        config=config,
        seed=seed,
        threshold=ThresholdState(alpha_th=config.st.alpha_th),
    )
    if method.trains:
        state.optimizer = make_optimizer(model.parameters(), config.lr)
    if method.uses_source:
        if source is None:
            raise ConfigurationError(f"method {method.value} needs source data")
        state.reservoir = SourceReservoir.from_dataset(source, config.source_fraction, seed)
    if method is AdaptMethod.GTTA_ST:
        if style_network is None:
            raise ConfigurationError("method gtta_st needs a pre-trained style network")
        state.style = style_network
        state.memory = StyleMemory(capacity=config.style.capacity)
    return state


def _repeat_rows(style: StyleMoments, count: int) -> StyleMoments:
    if style.batch_size is None:
        return style
    return style.select(torch.arange(count) % style.batch_size)


def _style_transfer_batch(
    state: AdaptationState,
    source_images: ImageBatch,
    test_batch: ImageBatch,
    repeat: int,
) -> tuple[ImageBatch, float | None, bool]:
    """Stylize half the source batch to the current style and half to a remembered one."""
    assert state.style is not None and state.memory is not None
    network = state.style
    current = style_of(network.encoder, test_batch)
    count = source_images.shape[0]

    # decoder first, so the transfer below uses the adapted decoder
    rejected = False
    decoder_loss: float | None = None
    try:
        decoder_loss = train_decoder_step(
            network,
            source_images,
            _repeat_rows(current, count),
            lr=state.config.style.online_lr,
        )
    except UpdateRejectedError:
        rejected = True

    previous = (
        memory_sample(state.memory, stream_seed(state.seed, state.step, repeat, 1))
        if len(state.memory)
        else current
    )
    half = math.ceil(count / 2)
    first = stylize(
        source_images[:half], _repeat_rows(current, half), network.encoder, network.decoder
    )
    parts = [first]
    if count > half:
        parts.append(
            stylize(
                source_images[half:],
                _repeat_rows(previous, count - half),
                network.encoder,
                network.decoder,
            )
        )
    if repeat == 0:
        memory_push(state.memory, current)
    return torch.cat(parts), decoder_loss, rejected


def adapt_step(state: AdaptationState, test_batch: ImageBatch, config: AdaptConfig) -> StepReport:
    """
    Adapt the model to one test batch.

    Runs ``updates_per_batch`` updates. Each builds an intermediate source batch for
    the method (plain replay, mixup or style transfer) and takes its supervised
    loss, then advances the threshold, filters pseudo-labels and takes the test loss,
    and finally applies one Adam step on the weighted sum. A batch whose pseudo-labels
    are all filtered trains on the source loss alone.

    Args:
        state: Run state, updated in place
        test_batch: Current test images
        config: Run settings

    Returns:
        StepReport with one UpdateReport per update (none for non-training methods)

    Raises:
        ParameterError: If the test batch is empty
        ConfigurationError: If the state lacks what the method needs
    """
    if test_batch.shape[0] == 0:
        raise ParameterError("test batch is empty")
    method = config.parsed_method
    report = StepReport(step=state.step)
    if not method.trains:
        state.step += 1
        return report
    if state.optimizer is None or (method.uses_source and state.reservoir is None):
        raise ConfigurationError(f"state was not created for method {method.value}")

    model = state.model
    previous_mode, previous_alpha = model.bn_mode, model.bn_layers()[0].alpha
    if config.adapt_with_batch_stats:
        model.set_bn_mode(BNMode.TRAIN_STATS)

    try:
        for repeat in range(config.updates_per_batch):
            update = UpdateReport()
            test_softmax = forward(model, test_batch)
            loss: torch.Tensor | None = None

            if method.uses_source:
                assert state.reservoir is not None
                images, labels = sample_source(
                    state.reservoir,
                    config.batch_size_source,
                    stream_seed(state.seed, state.step, repeat, 0),
                )
                if method is AdaptMethod.GTTA_MIX:
                    images, labels = build_mixed_batch(
                        images, labels, test_batch, model, config.mixup, test_softmax.detach()
                    )
                elif method is AdaptMethod.GTTA_ST:
                    images, update.decoder_loss, rejected = _style_transfer_batch(
                        state, images, test_batch, repeat
                    )
                    update.rejected = rejected
                source_loss = ce_loss_source(labels, forward(model, images))
                update.source_loss = float(source_loss.item())
                loss = config.source_loss_weight * source_loss

            if config.st.enabled:
                state.threshold = update_threshold(state.threshold, test_softmax)
                pseudo = pseudo_labels(test_softmax)
                if config.st.filtering:
                    pseudo = filter_by_confidence(pseudo, state.threshold.gamma)
                test_loss = ce_loss_test(pseudo, test_softmax)
                update.gamma = state.threshold.gamma
                update.kept_fraction = pseudo.kept_fraction
                update.test_loss_skipped = test_loss is None
                if test_loss is not None:
                    update.test_loss = float(test_loss.item())
                    weighted = config.test_loss_weight * test_loss
                    loss = weighted if loss is None else loss + weighted

            if loss is not None:
                try:
                    apply_update(state.optimizer, loss, config.lr)
                except UpdateRejectedError:
                    update.rejected = True
            report.updates.append(update)
    finally:
        model.set_bn_mode(previous_mode, alpha=previous_alpha)

    state.step += 1
    return report


@torch.no_grad()
def _predict(model: Classifier, images: ImageBatch) -> torch.Tensor:
    with committing_ema(model):
        return forward(model, images).argmax(dim=1)


def _domain_report(
    index: int,
    schedule: DomainSchedule,
    predictions: list[torch.Tensor],
    labels: list[torch.Tensor],
) -> DomainReport:
    spec = schedule.entries[index].spec
    preds = torch.cat(predictions)
    return DomainReport(
        index=index,
        kind=spec.kind.value,
        severity=spec.severity,
        samples=int(preds.numel()),
        error=error_rate(preds, torch.cat(labels)),
    )


def run_sequence(
    model: Classifier,
    schedule: DomainSchedule,
    test_set: LabeledImageSet,
    config: AdaptConfig,
    seed: int,
    source: LabeledImageSet | None = None,
    style_network: StyleNetwork | None = None,
    progress: ProgressCallback | None = None,
    label: str | None = None,
    copy_model: bool = True,
) -> SequenceReport:
    """
    Predict and adapt over a scheduled test stream.

    Every batch is predicted with the model state left by the previous batches
    (plus this batch's own BN statistics), then used for adaptation. The model is
    never reset between domains.

    Args:
        model: Source-trained classifier
        schedule: Domains to visit
        test_set: Clean test images the stream is drawn from
        config: Run settings
        seed: Run seed (stream, corruption noise and source sampling)
        source: Source set for replay-based methods
        style_network: Pre-trained style network for gtta_st
        progress: Callback receiving one line per finished domain
        label: Name of the run in reports and progress lines
        copy_model: Adapt copies instead of the given networks

    Returns:
        SequenceReport with per-domain errors and every step report
    """
    label = label or config.method
    report = SequenceReport(label=label, seed=seed)
    if len(schedule) == 0:
        return report

    state = create_state(model, config, seed, source, style_network, copy_model)
    predictions: list[torch.Tensor] = []
    labels: list[torch.Tensor] = []
    current = 0

    for batch in iter_test_stream(schedule, test_set, config.batch_size_test, seed):
        if batch.domain_index != current:
            report.domains.append(_domain_report(current, schedule, predictions, labels))
            _emit(progress, label, report.domains[-1])
            predictions, labels, current = [], [], batch.domain_index

        predictions.append(_predict(state.model, batch.images))
        labels.append(batch.labels)
        step = adapt_step(state, batch.images, config)
        if step.adapted:
            report.steps.append(step)

    report.domains.append(_domain_report(current, schedule, predictions, labels))
    _emit(progress, label, report.domains[-1])
    return report


def _emit(progress: ProgressCallback | None, label: str, domain: DomainReport) -> None:
    if progress:
        progress(
            f"[{label}] domain {domain.index} {domain.kind}@{domain.severity}: "
            f"error {domain.error:.2f}%"
        )


def sliding_window_adapt(
    model: Classifier,
    schedule: DomainSchedule,
    test_set: LabeledImageSet,
    config: AdaptConfig,
    seed: int,
    buffer_size: int | None = None,
    source: LabeledImageSet | None = None,
    style_network: StyleNetwork | None = None,
    progress: ProgressCallback | None = None,
    label: str | None = None,
    copy_model: bool = True,
) -> SequenceReport:
    """
    Single-sample adaptation with a sliding window over the last b samples.

    Each arriving sample enters the buffer, the whole buffer is forwarded and the
    prediction of the newest sample is recorded. Every b samples a full adaptation
    step runs on the buffer. Until the buffer first fills, it is padded by repetition
    and the predictions are counted as partial.

    Args:
        buffer_size: Window size b; defaults to ``config.buffer_size``

    Returns:
        SequenceReport; ``stream_shorter_than_buffer`` is set (with a warning) when
        the stream never fills the buffer
    """
    capacity = buffer_size if buffer_size is not None else config.buffer_size
    if capacity is None:
        raise ConfigurationError("sliding-window adaptation needs a buffer size")
    buffer = SlidingBuffer(capacity=capacity)
    label = label or f"{config.method}-b{capacity}"
    report = SequenceReport(label=label, seed=seed)
    if len(schedule) == 0:
        return report

    total = schedule.total_batches * config.batch_size_test
    if total < capacity:
        report.stream_shorter_than_buffer = True
        warnings.warn(
            f"stream of {total} samples is shorter than the buffer ({capacity}); "
            "predictions come from a partially filled buffer",
            UserWarning,
            stacklevel=2,
        )

    state = create_state(model, config, seed, source, style_network, copy_model)
    predictions: list[torch.Tensor] = []
    labels: list[torch.Tensor] = []
    current = 0

    for batch in iter_test_stream(schedule, test_set, config.batch_size_test, seed):
        if batch.domain_index != current:
            report.domains.append(_domain_report(current, schedule, predictions, labels))
            _emit(progress, label, report.domains[-1])
            predictions, labels, current = [], [], batch.domain_index

        for image, target in zip(batch.images, batch.labels):
            due = buffer.push(image)
            if buffer.partial:
                report.partial_buffer_predictions += 1
            window = buffer.window()
            predictions.append(_predict(state.model, window)[-1:])
            labels.append(target[None])
            if due:
                step = adapt_step(state, window, config)
                if step.adapted:
                    report.steps.append(step)

    report.domains.append(_domain_report(current, schedule, predictions, labels))
    _emit(progress, label, report.domains[-1])
    return report
