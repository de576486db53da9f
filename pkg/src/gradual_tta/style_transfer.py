"""
AdaIN style transfer into the current and previously seen test styles.

A frozen encoder embeds source images; their channel moments are replaced by the
moments of a test image (adaptive instance normalization) and a decoder maps the
renormalized embedding back to image space. The decoder keeps training online.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from gradual_tta.constants import STD_FLOOR
from gradual_tta.errors import (
    ConfigurationError,
    EmptyMemoryError,
    ParameterError,
    TrainingError,
    UpdateRejectedError,
)
from gradual_tta.models import (
    CorruptionKind,
    CorruptionSpec,
    ImageBatch,
    LabeledImageSet,
    StyleMoments,
)
from gradual_tta.networks import (
    StyleDecoder,
    StyleEncoder,
    apply_update,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_autoencoder,
)
from gradual_tta.toy_data import apply_corruption, stream_seed

IGNORE_INDEX = 255


@dataclass
class StyleConfig:
    """
    Style network and style memory settings.

    Attributes:
        capacity: Maximum number of styles kept in memory
        lambda_s: Weight of the moment-matching terms of the decoder loss
        pretrain_iters: Decoder pre-training steps on source data
        encoder_iters: Autoencoder steps used to pre-train the encoder
        pretrain_lr: Adam learning rate during pre-training
        online_lr: Adam learning rate of the decoder during adaptation
        batch_size: Pre-training batch size
        widths: Encoder and decoder channel widths
        shifted_styles: Corrupt half of each pre-training style batch
    """

    capacity: int = 16
    lambda_s: float = 0.1
    pretrain_iters: int = 1500
    encoder_iters: int = 300
    pretrain_lr: float = 1e-3
    online_lr: float = 1e-4
    batch_size: int = 16
    widths: tuple[int, int] = (16, 32)
    shifted_styles: bool = True

    def validate(self) -> None:
        if self.capacity < 1:
            raise ConfigurationError(f"style.capacity must be >= 1, got {self.capacity}")
        if self.lambda_s < 0:
            raise ConfigurationError(f"style.lambda_s must be >= 0, got {self.lambda_s}")
        if self.pretrain_iters < 0 or self.encoder_iters < 0:
            raise ConfigurationError("style pre-training iterations must be >= 0")
        if len(self.widths) != 2:
            raise ConfigurationError(f"style.widths needs two entries, got {list(self.widths)}")


def feature_moments(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image channel mean and floored std of (N, C, H, W) features, each (N, C)."""
    if features.ndim != 4:
        raise ParameterError(f"features must be (N, C, H, W), got {tuple(features.shape)}")
    mean = features.mean(dim=(2, 3))
    std = features.var(dim=(2, 3), unbiased=False).sqrt().clamp_min(STD_FLOOR)
    return mean, std


def style_of(encoder: StyleEncoder, images: ImageBatch) -> StyleMoments:
    """Per-image style moments at every encoder tap."""
    with torch.no_grad():
        taps = encoder.taps(images)
    moments = [feature_moments(t) for t in taps]
    return StyleMoments(means=[m for m, _ in moments], stds=[s for _, s in moments])


def _broadcast(moment: torch.Tensor, batch: int) -> torch.Tensor:
    if moment.ndim == 1:
        return moment[None].expand(batch, -1)
    if moment.shape[0] != batch:
        raise ParameterError(f"style holds {moment.shape[0]} entries for a batch of {batch}")
    return moment


def adain(content_features: torch.Tensor, style: StyleMoments) -> torch.Tensor:
    """
    Renormalize content features to the top-layer moments of a style.

    ``sigma_s * (z - mu(z)) / sigma(z) + mu_s`` per image and channel. The style is
    either one shared (C,) moment pair or one (N, C) pair per content image.

    Raises:
        ParameterError: If the channel counts differ
    """
    style_mean, style_std = style.means[-1], style.stds[-1]
    if style_mean.shape[-1] != content_features.shape[1]:
        raise ParameterError(
            f"style has {style_mean.shape[-1]} channels, content has {content_features.shape[1]}"
        )
    batch = content_features.shape[0]
    mean, std = feature_moments(content_features)
    target_mean = _broadcast(style_mean, batch)
    target_std = _broadcast(style_std, batch)
    normalized = (content_features - mean[:, :, None, None]) / std[:, :, None, None]
    return normalized * target_std[:, :, None, None] + target_mean[:, :, None, None]


def resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of an (H, W) or (N, H, W) label map."""
    squeeze = mask.ndim == 2
    batched = mask[None] if squeeze else mask
    resized = F.interpolate(batched[:, None].to(torch.float32), size=size, mode="nearest")
    out = resized[:, 0].to(mask.dtype)
    return out[0] if squeeze else out


def class_conditional_moments(
    features: torch.Tensor,
    mask: torch.Tensor,
    class_count: int | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> dict[int, StyleMoments | None]:
    """
    Channel moments over the positions of each class of a label map.

    Args:
        features: (C, H, W) or (N, C, H, W) feature map
        mask: (H, W) or (N, H, W) label map at feature resolution
        class_count: If given, every class in [0, class_count) gets an entry and
            absent classes map to None
        ignore_index: Label value excluded from every class

    Returns:
        Mapping from class id to single-style moments; empty for an all-ignore mask

    Raises:
        ParameterError: If mask and feature spatial sizes differ or a label is invalid
    """
    if features.ndim == 3:
        features = features[None]
    if mask.ndim == 2:
        mask = mask[None]
    if features.ndim != 4 or mask.shape != (features.shape[0], *features.shape[2:]):
        raise ParameterError(
            f"mask shape {tuple(mask.shape)} does not match features {tuple(features.shape)}"
        )
    valid = mask != ignore_index
    if class_count is not None and bool(((mask[valid] < 0) | (mask[valid] >= class_count)).any()):
        raise ParameterError(f"mask labels must be in [0, {class_count}) or {ignore_index}")

    flat = features.permute(1, 0, 2, 3).reshape(features.shape[1], -1)
    labels = mask.reshape(-1)
    present = sorted(int(c) for c in torch.unique(labels[valid.reshape(-1)]).tolist())

    result: dict[int, StyleMoments | None] = {}
    if class_count is not None:
        result = {c: None for c in range(class_count)}
    for class_id in present:
        values = flat[:, labels == class_id]
        mean = values.mean(dim=1)
        std = values.var(dim=1, unbiased=False).sqrt().clamp_min(STD_FLOOR)
        result[class_id] = StyleMoments(means=[mean], stds=[std], class_id=class_id)
    return result


def class_conditional_adain(
    content_features: torch.Tensor,
    content_mask: torch.Tensor,
    styles: dict[int, StyleMoments | None],
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """
    AdaIN applied region by region with the style moments of the same class.

    Regions whose class has no style entry, and ignored positions, are left as is.
    """
    squeeze = content_features.ndim == 3
    features = content_features[None] if squeeze else content_features
    mask = content_mask[None] if content_mask.ndim == 2 else content_mask
    content_moments = class_conditional_moments(features, mask, ignore_index=ignore_index)

    out = features.clone()
    for class_id, moments in content_moments.items():
        style = styles.get(class_id)
        if style is None or moments is None:
            continue
        region = (mask == class_id)[:, None].expand_as(features)
        mean = moments.means[-1][None, :, None, None]
        std = moments.stds[-1][None, :, None, None]
        target_mean = style.means[-1][None, :, None, None]
        target_std = style.stds[-1][None, :, None, None]
        renormalized = (features - mean) / std * target_std + target_mean
        out = torch.where(region, renormalized, out)
    return out[0] if squeeze else out


@dataclass
class DecoderLossTerms:
    """Individual terms of the decoder loss; ``total`` is their weighted sum."""

    mean_terms: list[torch.Tensor]
    std_terms: list[torch.Tensor]
    content: torch.Tensor
    lambda_s: float

    @property
    def style(self) -> torch.Tensor:
        return torch.stack(self.mean_terms).sum() + torch.stack(self.std_terms).sum()

    @property
    def total(self) -> torch.Tensor:
        return self.lambda_s * self.style + self.content


def _moment_error(moment: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (moment - target.detach()).pow(2).sum(dim=1).mean()


def style_loss_terms(
    transferred: ImageBatch,
    style_source: ImageBatch | StyleMoments,
    target_embedding: torch.Tensor,
    encoder: StyleEncoder,
    lambda_s: float = 0.1,
) -> DecoderLossTerms:
    """
    Compute every term of the decoder loss separately.

    For each encoder tap, the squared error between the per-image moments of the
    transferred image and the style moments, summed over channels and averaged over
    the batch; plus the element-mean squared error between the embedding of the
    transferred image and the AdaIN target.
    """
    if isinstance(style_source, StyleMoments):
        style = style_source
    else:
        style = style_of(encoder, style_source)
    taps = encoder.taps(transferred)
    if len(taps) != style.num_layers:
        raise ParameterError(f"style has {style.num_layers} layers, encoder has {len(taps)} taps")

    batch = transferred.shape[0]
    mean_terms, std_terms = [], []
    for features, style_mean, style_std in zip(taps, style.means, style.stds):
        mean, std = feature_moments(features)
        mean_terms.append(_moment_error(mean, _broadcast(style_mean, batch)))
        std_terms.append(_moment_error(std, _broadcast(style_std, batch)))
    if taps[-1].shape != target_embedding.shape:
        raise ParameterError(
            f"target embedding {tuple(target_embedding.shape)} does not match "
            f"encoding {tuple(taps[-1].shape)}"
        )
    content = F.mse_loss(taps[-1], target_embedding.detach())
    return DecoderLossTerms(mean_terms, std_terms, content, lambda_s)


def decoder_loss(
    transferred: ImageBatch,
    style_source: ImageBatch | StyleMoments,
    target_embedding: torch.Tensor,
    encoder: StyleEncoder,
    lambda_s: float = 0.1,
) -> torch.Tensor:
    """
    Decoder training loss: weighted moment matching plus content reconstruction.

    Returns:
        Non-negative scalar, zero exactly when every tap's moments match the style
        and the top embedding reproduces the target
    """
    return style_loss_terms(transferred, style_source, target_embedding, encoder, lambda_s).total


@dataclass
class StyleNetwork:
    """Frozen encoder, trainable decoder and the decoder's optimizer."""

    encoder: StyleEncoder
    decoder: StyleDecoder
    optimizer: torch.optim.Optimizer
    lambda_s: float = 0.1

    @classmethod
    def create(
        cls,
        encoder: StyleEncoder,
        decoder: StyleDecoder,
        lr: float,
        lambda_s: float = 0.1,
    ) -> StyleNetwork:
        encoder.eval()
        encoder.requires_grad_(False)
        return cls(encoder, decoder, make_optimizer(decoder.parameters(), lr), lambda_s)


def stylize(
    source_images: ImageBatch,
    style: StyleMoments,
    encoder: StyleEncoder,
    decoder: StyleDecoder,
) -> ImageBatch:
    """
    Transfer source images into a style: decode the AdaIN-renormalized embedding.

    Returns:
        Images of the input shape, clamped to [0, 1]
    """
    with torch.no_grad():
        embedding = adain(encoder(source_images), style)
        out = decoder(embedding, output_size=tuple(source_images.shape[-2:]))
    return out.clamp(0.0, 1.0)


def train_decoder_step(
    network: StyleNetwork,
    source_images: ImageBatch,
    current_style: ImageBatch | StyleMoments,
    lr: float | None = None,
) -> float:
    """
    One Adam step of the decoder on the decoder loss.

    Args:
        network: Style network; the encoder stays untouched
        source_images: Content images
        current_style: Style images or per-layer style moments
        lr: Optional learning rate for this step

    Returns:
        The loss value before the step

    Raises:
        UpdateRejectedError: If the loss or a gradient is non-finite
    """
    style = (
        current_style
        if isinstance(current_style, StyleMoments)
        else style_of(network.encoder, current_style)
    )
    with torch.no_grad():
        target = adain(network.encoder(source_images), style)
    transferred = network.decoder(target, output_size=tuple(source_images.shape[-2:]))
    loss = decoder_loss(transferred, style, target, network.encoder, network.lambda_s)
    value = float(loss.detach().item())
    apply_update(network.optimizer, loss, lr)
    return value


def _shift_styles(images: ImageBatch, gen: torch.Generator, seed: int) -> ImageBatch:
    half = images.shape[0] // 2
    kinds = list(CorruptionKind)
    kind = kinds[int(torch.randint(len(kinds), (1,), generator=gen))]
    severity = int(torch.randint(1, 6, (1,), generator=gen))
    shifted = apply_corruption(images[half:], CorruptionSpec(kind, severity), seed=seed)
    return torch.cat([images[:half], shifted])


def pretrain_style_network(
    data: LabeledImageSet,
    config: StyleConfig,
    seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> tuple[StyleNetwork, list[float]]:
    """
    Pre-train the style network on source data.

    The encoder is trained as an autoencoder and frozen. The decoder starts from the
    autoencoder's decoder and learns to invert AdaIN on source content. With
    ``shifted_styles`` half of every style batch is corrupted with a random kind and
    severity, so the decoder also learns to reach styles away from the source.

    Returns:
        Tuple of (style network, decoder loss per step)

    Raises:
        TrainingError: If either phase diverges
    """
    config.validate()
    encoder, decoder = train_autoencoder(
        data,
        iterations=config.encoder_iters,
        lr=config.pretrain_lr,
        seed=seed,
        batch_size=config.batch_size,
        widths=config.widths,
    )
    network = StyleNetwork.create(encoder, decoder, config.pretrain_lr, config.lambda_s)

    gen = torch.Generator().manual_seed(seed + 2)
    losses: list[float] = []
    for step in range(config.pretrain_iters):
        content = data.images[torch.randint(len(data), (config.batch_size,), generator=gen)]
        styles = data.images[torch.randint(len(data), (config.batch_size,), generator=gen)]
        if config.shifted_styles:
            styles = _shift_styles(styles, gen, stream_seed(seed, step))
        try:
            losses.append(train_decoder_step(network, content, styles))
        except UpdateRejectedError as e:
            raise TrainingError(
                f"decoder pre-training diverged: {e}",
                step=step,
                last_finite_loss=losses[-1] if losses else None,
            ) from e
        if progress and (step + 1) % 100 == 0:
            progress(f"decoder step {step + 1}/{config.pretrain_iters}: loss {losses[-1]:.4f}")

    for group in network.optimizer.param_groups:
        group["lr"] = config.online_lr
    return network, losses


def save_style_network(network: StyleNetwork, directory: str | Path, seed: int) -> None:
    directory = Path(directory)
    save_checkpoint(network.encoder, directory / "style_encoder", seed)
    save_checkpoint(network.decoder, directory / "style_decoder", seed)


def load_style_network(directory: str | Path, config: StyleConfig, channels: int) -> StyleNetwork:
    """Rebuild a style network saved with save_style_network."""
    directory = Path(directory)
    encoder = StyleEncoder(in_channels=channels, widths=config.widths)
    decoder = StyleDecoder(out_channels=channels, widths=config.widths)
    load_checkpoint(encoder, directory / "style_encoder")
    load_checkpoint(decoder, directory / "style_decoder")
    return StyleNetwork.create(encoder, decoder, config.online_lr, config.lambda_s)


@dataclass
class StyleMemory:
    """
    Bounded FIFO of previously seen styles.

    Attributes:
        capacity: Maximum number of entries; the oldest is evicted first
        entries: Stored styles, oldest first
        pushes: Number of styles ever pushed
        samples: Number of samples drawn
    """

    capacity: int = 16
    entries: deque[StyleMoments] = field(default_factory=deque)
    pushes: int = 0
    samples: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ParameterError(f"memory capacity must be >= 1, got {self.capacity}")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.entries)


def memory_push(memory: StyleMemory, style: StyleMoments) -> StyleMemory:
    """Append a style, evicting the oldest entry at capacity."""
    memory.entries.append(style.detach())
    memory.pushes += 1
    return memory


def memory_sample(memory: StyleMemory, seed: int) -> StyleMoments:
    """
    Draw one stored style uniformly at random.

    Raises:
        EmptyMemoryError: If the memory holds no styles
    """
    if not memory.entries:
        raise EmptyMemoryError("style memory is empty")
    index = int(np.random.default_rng(seed).integers(len(memory.entries)))
    memory.samples += 1
    return memory.entries[index]
