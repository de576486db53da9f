"""
Networks, source training and update contracts.

This module defines the BN-equipped classifier, the small encoder-decoder used for
style transfer, source pre-training, the Adam update contract and the flat-binary
checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Callable, Iterable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gradual_tta.constants import STD_FLOOR
from gradual_tta.errors import ParameterError, TrainingError, UpdateRejectedError
from gradual_tta.models import BNStatistics, ImageBatch, LabeledImageSet, LayerStatistics

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def channel_moments(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Per-channel mean and std of an (N, C, H, W) activation over batch and space.

    The std is the biased estimate floored at ``STD_FLOOR``.

    Raises:
        ParameterError: If fewer than two values per channel are available
    """
    if x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ParameterError(
            f"degenerate std: activation of shape {tuple(x.shape)} has fewer than two "
            "values per channel"
        )
    mean = x.mean(dim=(0, 2, 3))
    variance = x.var(dim=(0, 2, 3), unbiased=False)
    return mean, variance.sqrt().clamp_min(STD_FLOOR)


def blend_moments(
    base_mean: torch.Tensor,
    base_std: torch.Tensor,
    batch_mean: torch.Tensor,
    batch_std: torch.Tensor,
    alpha: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Convex combination ``(1 - alpha) * base + alpha * batch`` of means and of stds.

    Stds are combined directly (not as variances) and floored afterwards. The
    endpoints alpha=0 and alpha=1 return the respective input unchanged.
    """
    if alpha == 0.0:
        return base_mean, base_std
    if alpha == 1.0:
        return batch_mean, batch_std
    mean = (1.0 - alpha) * base_mean + alpha * batch_mean
    std = ((1.0 - alpha) * base_std + alpha * batch_std).clamp_min(STD_FLOOR)
    return mean, std


class BNMode(str, Enum):
    """Which statistics a BN layer normalizes with."""

    TRAIN_STATS = "train_stats"  # current batch
    EVAL_STATS = "eval_stats"  # stored source statistics
    INTERPOLATED = "interpolated"  # (1 - alpha) source + alpha batch
    EMA = "ema"  # (1 - alpha) running EMA + alpha batch


class StatBatchNorm2d(nn.Module):
    """
    Batch normalization that keeps statistics as (mean, std) pairs.

    The std of a batch is ``sqrt(var)`` floored at ``STD_FLOOR``; running statistics
    are only updated while the module is in training mode with ``TRAIN_STATS``.
    """

    def __init__(self, channels: int, momentum: float = 0.1) -> None:
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_std", torch.ones(channels))
        self.register_buffer("ema_mean", torch.zeros(channels))
        self.register_buffer("ema_std", torch.ones(channels))
        self.mode = BNMode.EVAL_STATS
        self.alpha = 0.0
        self.commit_ema = False
        self.capture: list[LayerStatistics] | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode is BNMode.EVAL_STATS and self.capture is None:
            mean, std = self.running_mean, self.running_std
        else:
            batch_mean, batch_std = channel_moments(x)
            if self.capture is not None:
                self.capture.append(
                    LayerStatistics(batch_mean.detach().clone(), batch_std.detach().clone())
                )
            if self.mode is BNMode.EVAL_STATS:
                mean, std = self.running_mean, self.running_std
            elif self.mode is BNMode.TRAIN_STATS:
                mean, std = batch_mean, batch_std
                if self.training:
                    with torch.no_grad():
                        self.running_mean.lerp_(batch_mean, self.momentum)
                        self.running_std.lerp_(batch_std, self.momentum)
            elif self.mode is BNMode.INTERPOLATED:
                mean, std = blend_moments(
                    self.running_mean, self.running_std, batch_mean, batch_std, self.alpha
                )
            else:
                mean, std = blend_moments(
                    self.ema_mean, self.ema_std, batch_mean, batch_std, self.alpha
                )
                if self.commit_ema:
                    self.ema_mean.copy_(mean.detach())
                    self.ema_std.copy_(std.detach())

        normalized = (x - mean[None, :, None, None]) / std[None, :, None, None]
        return normalized * self.weight[None, :, None, None] + self.bias[None, :, None, None]

    def extra_repr(self) -> str:
        return f"{self.channels}, mode={self.mode.value}, alpha={self.alpha}"


class Classifier(nn.Module):
    """
    Small classifier: three conv -> BN -> ReLU -> max-pool blocks and a linear head.

    Attributes:
        in_channels: Number of input channels
        class_count: Number of classes
        widths: Output channels of the three conv blocks
    """

    def __init__(
        self,
        in_channels: int = 3,
        class_count: int = 4,
        widths: tuple[int, ...] = (32, 64, 64),
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.class_count = class_count
        self.widths = tuple(widths)

        blocks: list[nn.Module] = []
        previous = in_channels
        for width in self.widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(previous, width, kernel_size=3, padding=1, bias=False),
                    StatBatchNorm2d(width),
                    nn.ReLU(),
                    nn.MaxPool2d(2),
                )
            )
            previous = width
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(previous, class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.features(x)
        return self.head(features.mean(dim=(2, 3)))

    def architecture(self) -> dict[str, Any]:
        return {
            "type": "Classifier",
            "in_channels": self.in_channels,
            "class_count": self.class_count,
            "widths": list(self.widths),
        }

    def bn_layers(self) -> list[StatBatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, StatBatchNorm2d)]

    @property
    def bn_mode(self) -> BNMode:
        return self.bn_layers()[0].mode

    def set_bn_mode(self, mode: BNMode | str, alpha: float | None = None) -> None:
        """
        Select the statistics every BN layer normalizes with.

        Parameters are never touched; only the normalization source changes.
        """
        mode = BNMode(mode)
        for layer in self.bn_layers():
            layer.mode = mode
            if alpha is not None:
                layer.alpha = float(alpha)

    def source_statistics(self) -> BNStatistics:
        return BNStatistics(
            [
                LayerStatistics(layer.running_mean.clone(), layer.running_std.clone())
                for layer in self.bn_layers()
            ]
        )

    def load_source_statistics(self, stats: BNStatistics) -> None:
        self.source_statistics().check_compatible(stats)
        for layer, layer_stats in zip(self.bn_layers(), stats.layers):
            layer.running_mean.copy_(layer_stats.mean)
            layer.running_std.copy_(layer_stats.std)

    def ema_statistics(self) -> BNStatistics:
        return BNStatistics(
            [
                LayerStatistics(layer.ema_mean.clone(), layer.ema_std.clone())
                for layer in self.bn_layers()
            ]
        )

    def reset_ema(self) -> None:
        """Start the EMA statistics from the source statistics."""
        for layer in self.bn_layers():
            layer.ema_mean.copy_(layer.running_mean)
            layer.ema_std.copy_(layer.running_std)


@contextmanager
def committing_ema(model: Classifier) -> Iterator[None]:
    """Let EMA-mode BN layers store the statistics of the next forward passes."""
    layers = model.bn_layers()
    for layer in layers:
        layer.commit_ema = True
    try:
        yield
    finally:
        for layer in layers:
            layer.commit_ema = False


@contextmanager
def capturing_batch_stats(model: Classifier) -> Iterator[list[list[LayerStatistics]]]:
    """
    Record the batch moments every BN layer sees during the enclosed forward passes.

    Yields:
        One list of captured LayerStatistics per BN layer
    """
    layers = model.bn_layers()
    captured: list[list[LayerStatistics]] = [[] for _ in layers]
    for layer, sink in zip(layers, captured):
        layer.capture = sink
    try:
        yield captured
    finally:
        for layer in layers:
            layer.capture = None


class StyleEncoder(nn.Module):
    """Two conv blocks with a tap after each; the last tap is the embedding E(x)."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, int] = (16, 32)) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], kernel_size=3, padding=1), nn.ReLU()
        )
        self.block2 = nn.Sequential(
            nn.MaxPool2d(2), nn.Conv2d(widths[0], widths[1], kernel_size=3, padding=1), nn.ReLU()
        )

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        first = self.block1(x)
        return [first, self.block2(first)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1]

    def architecture(self) -> dict[str, Any]:
        return {
            "type": "StyleEncoder",
            "in_channels": self.in_channels,
            "widths": list(self.widths),
        }


class StyleDecoder(nn.Module):
    """Mirror of the encoder with nearest-neighbour upsampling."""

    def __init__(self, out_channels: int = 3, widths: tuple[int, int] = (16, 32)) -> None:
        super().__init__()
        self.out_channels = out_channels
        self.widths = tuple(widths)
        self.inner = nn.Sequential(
            nn.Conv2d(widths[1], widths[0], kernel_size=3, padding=1), nn.ReLU()
        )
        self.outer = nn.Sequential(
            nn.Conv2d(widths[0], widths[0], kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(widths[0], out_channels, kernel_size=3, padding=1),
        )

    def forward(
        self, z: torch.Tensor, output_size: tuple[int, int] | None = None
    ) -> torch.Tensor:
        hidden = self.inner(z)
        if output_size is None:
            hidden = F.interpolate(hidden, scale_factor=2.0, mode="nearest")
        else:
            hidden = F.interpolate(hidden, size=output_size, mode="nearest")
        return self.outer(hidden)

    def architecture(self) -> dict[str, Any]:
        return {
            "type": "StyleDecoder",
            "out_channels": self.out_channels,
            "widths": list(self.widths),
        }


def make_optimizer(parameters: Iterable[nn.Parameter], lr: float) -> torch.optim.Adam:
    """Adam with betas (0.9, 0.999) and eps 1e-8."""
    return torch.optim.Adam(parameters, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def apply_update(
    optimizer: torch.optim.Optimizer,
    loss: torch.Tensor,
    lr: float | None = None,
) -> None:
    """
    Backpropagate a loss and take one Adam step.

    Optimizer moments are carried by the optimizer across calls.

    Args:
        optimizer: Optimizer over the parameters to update
        loss: Scalar loss
        lr: Optional learning rate for this and later steps

    Raises:
        UpdateRejectedError: If the loss or any gradient is non-finite; parameters
            and optimizer state are left untouched
    """
    if not torch.isfinite(loss).all():
        raise UpdateRejectedError(f"non-finite loss {loss.detach().item()!r}, update rejected")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()

    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                optimizer.zero_grad(set_to_none=True)
                raise UpdateRejectedError("non-finite gradient, update rejected")

    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()


def forward(model: Classifier, batch: ImageBatch) -> torch.Tensor:
    """
    Softmax predictions of the classifier under its current BN mode.

    Raises:
        ParameterError: If the batch is not (N, in_channels, H, W)
    """
    if batch.ndim != 4 or batch.shape[1] != model.in_channels:
        raise ParameterError(
            f"expected a batch of shape (N, {model.in_channels}, H, W), "
            f"got {tuple(batch.shape)}"
        )
    if batch.shape[0] == 0:
        raise ParameterError("batch is empty")
    return torch.softmax(model(batch), dim=1)


@dataclass
class TrainingResult:
    """
    Outcome of source pre-training.

    Attributes:
        model: Trained classifier in eval mode with source statistics selected
        losses: Mean training loss per epoch
    """

    model: Classifier
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None


def _chunks(total: int, size: int) -> Iterator[slice]:
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


@torch.no_grad()
def calibrate_bn_statistics(model: Classifier, images: ImageBatch, batch_size: int = 256) -> None:
    """
    Set the stored source statistics to pooled batch moments over ``images``.

    Moments are gathered with every BN layer using batch statistics and pooled
    across chunks, so they agree with a single full-batch pass.
    """
    previous_mode = model.bn_mode
    was_training = model.training
    model.eval()
    model.set_bn_mode(BNMode.TRAIN_STATS)

    parts = list(_chunks(images.shape[0], batch_size))
    with capturing_batch_stats(model) as captured:
        for part in parts:
            model(images[part])

    weights = torch.tensor([p.stop - p.start for p in parts], dtype=images.dtype)[:, None]
    weights = weights / images.shape[0]
    layers = []
    for layer_captures in captured:
        means = torch.stack([c.mean for c in layer_captures])
        second_moments = torch.stack([c.std**2 + c.mean**2 for c in layer_captures])
        mean = (weights * means).sum(0)
        variance = ((weights * second_moments).sum(0) - mean**2).clamp_min(0.0)
        layers.append(LayerStatistics(mean, variance.sqrt().clamp_min(STD_FLOOR)))

    model.load_source_statistics(BNStatistics(layers))
    model.set_bn_mode(previous_mode)
    model.train(was_training)


def train_source(
    data: LabeledImageSet,
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    widths: tuple[int, ...] = (32, 64, 64),
    progress: Callable[[str], None] | None = None,
) -> TrainingResult:
    """
    Train a classifier on labeled source data.

    Training uses batch statistics; afterwards the stored source statistics are
    calibrated on the full training set and the model is left in eval mode with
    ``EVAL_STATS`` selected.

    Args:
        data: Labeled source images
        epochs: Number of passes over the data (0 keeps the random initialization)
        lr: Adam learning rate
        seed: Seed for initialization and shuffling
        batch_size: Mini-batch size
        widths: Conv block widths
        progress: Optional callback receiving one line per epoch

    Returns:
        TrainingResult with the model and per-epoch losses

    Raises:
        TrainingError: If the loss becomes non-finite
    """
    if len(data) == 0:
        raise ParameterError("source data is empty")

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Classifier(
            in_channels=int(data.images.shape[1]), class_count=data.class_count, widths=widths
        )
    gen = torch.Generator().manual_seed(seed)
    optimizer = make_optimizer(model.parameters(), lr)

    model.train()
    model.set_bn_mode(BNMode.TRAIN_STATS)
    losses: list[float] = []
    last_finite: float | None = None
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        total, seen = 0.0, 0
        for step, part in enumerate(_chunks(len(data), batch_size)):
            indices = order[part]
            if indices.numel() < 2:
                continue
            logits = model(data.images[indices])
            loss = F.cross_entropy(logits, data.labels[indices])
            if not torch.isfinite(loss):
                raise TrainingError(
                    "source training diverged", epoch=epoch, step=step, last_finite_loss=last_finite
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            last_finite = float(loss.item())
            total += last_finite * indices.numel()
            seen += indices.numel()
        losses.append(total / max(seen, 1))
        if progress:
            progress(f"source epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")

    calibrate_bn_statistics(model, data.images)
    model.eval()
    model.set_bn_mode(BNMode.EVAL_STATS)
    return TrainingResult(model=model, losses=losses)


@torch.no_grad()
def evaluate_accuracy(model: Classifier, data: LabeledImageSet, batch_size: int = 256) -> float:
    """Fraction of correctly classified samples under the current BN mode."""
    if len(data) == 0:
        raise ParameterError("evaluation data is empty")
    correct = 0
    for part in _chunks(len(data), batch_size):
        predictions = forward(model, data.images[part]).argmax(dim=1)
        correct += int((predictions == data.labels[part]).sum().item())
    return correct / len(data)


def train_autoencoder(
    data: LabeledImageSet,
    iterations: int = 300,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    widths: tuple[int, int] = (16, 32),
) -> tuple[StyleEncoder, StyleDecoder]:
    """
    Train an encoder and decoder to reconstruct source images in pixel space.

    Returns:
        Tuple of (encoder, decoder), both still trainable

    Raises:
        TrainingError: If the reconstruction loss becomes non-finite
    """
    channels = int(data.images.shape[1])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = StyleEncoder(in_channels=channels, widths=widths)
        decoder = StyleDecoder(out_channels=channels, widths=widths)
    gen = torch.Generator().manual_seed(seed)
    optimizer = make_optimizer([*encoder.parameters(), *decoder.parameters()], lr)
    size = tuple(data.images.shape[-2:])

    last_finite: float | None = None
    for step in range(iterations):
        indices = torch.randint(len(data), (batch_size,), generator=gen)
        images = data.images[indices]
        loss = F.mse_loss(decoder(encoder(images), output_size=size), images)
        if not torch.isfinite(loss):
            raise TrainingError(
                "autoencoder pre-training diverged", step=step, last_finite_loss=last_finite
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        last_finite = float(loss.item())
    return encoder, decoder


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def architecture_hash(module: nn.Module) -> str:
    """Hash of the module class, constructor arguments, and tensor names and shapes."""
    spec: dict[str, Any] = {"class": type(module).__name__}
    if hasattr(module, "architecture"):
        spec["architecture"] = module.architecture()
    spec["tensors"] = [[name, list(t.shape)] for name, t in module.state_dict().items()]
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    module: nn.Module,
    path: str | Path,
    seed: int,
    extra: dict[str, Any] | None = None,
) -> Path:
    """
    Write a flat float32 blob of all parameters and buffers plus a JSON manifest.

    Args:
        module: Network to save (BN statistics are buffers and are included)
        path: Target path; the suffix is replaced by ``.bin`` and ``.json``
        seed: Seed the network was trained with
        extra: Additional manifest fields

    Returns:
        Path of the manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    arrays = []
    offset = 0
    for name, tensor in module.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).contiguous().numpy().ravel()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        arrays.append(array)
        offset += array.size

    blob = np.concatenate(arrays) if arrays else np.zeros(0, dtype=np.float32)
    blob.astype(np.float32).tofile(path.with_suffix(".bin"))

    manifest: dict[str, Any] = {
        "architecture": module.architecture() if hasattr(module, "architecture") else {},
        "architecture_hash": architecture_hash(module),
        "seed": seed,
        "tensors": tensors,
        "size": offset,
    }
    if extra:
        manifest.update(extra)
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def read_manifest(path: str | Path) -> dict[str, Any]:
    """Read a checkpoint manifest without loading the tensors."""
    manifest_path = Path(path).with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint manifest not found: {manifest_path}")
    result: dict[str, Any] = json.loads(manifest_path.read_text())
    return result


def load_checkpoint(module: nn.Module, path: str | Path) -> dict[str, Any]:
    """
    Load a checkpoint written by save_checkpoint into ``module``.

    Returns:
        The manifest

    Raises:
        FileNotFoundError: If the blob or manifest is missing
        ParameterError: If the architecture hash or blob size does not match
    """
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["architecture_hash"] != architecture_hash(module):
        raise ParameterError(
            f"checkpoint architecture {manifest['architecture_hash']} does not match "
            f"{architecture_hash(module)}"
        )
    blob_path = path.with_suffix(".bin")
    if not blob_path.exists():
        raise FileNotFoundError(f"Checkpoint blob not found: {blob_path}")
    blob = np.fromfile(blob_path, dtype=np.float32)
    if blob.size != manifest["size"]:
        raise ParameterError(
            f"checkpoint blob holds {blob.size} values, expected {manifest['size']}"
        )

    current = module.state_dict()
    state = {}
    for entry in manifest["tensors"]:
        count = math.prod(entry["shape"])
        values = blob[entry["offset"] : entry["offset"] + count].reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(values.copy()).to(current[entry["name"]].dtype)
    module.load_state_dict(state)
    return manifest


def load_classifier(path: str | Path) -> Classifier:
    """Rebuild a classifier from its manifest and load its weights."""
    manifest = read_manifest(path)
    arch = manifest["architecture"]
    model = Classifier(
        in_channels=arch["in_channels"],
        class_count=arch["class_count"],
        widths=tuple(arch["widths"]),
    )
    load_checkpoint(model, path)
    model.eval()
    model.set_bn_mode(BNMode.EVAL_STATS)
    return model
