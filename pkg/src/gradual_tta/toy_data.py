"""
Synthetic corruption benchmark.

This module generates a labeled dataset of class-specific oriented gratings, applies
parameterized corruptions at five severities, and lays out continual and gradual
test schedules.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from gradual_tta import constants
from gradual_tta.errors import ParameterError
from gradual_tta.models import (
    CorruptionKind,
    CorruptionSpec,
    DomainSchedule,
    ImageBatch,
    LabeledImageSet,
    ScheduleEntry,
    ScheduleMode,
)

ALL_KINDS = tuple(CorruptionKind)


def stream_seed(*keys: int) -> int:
    """
    Derive a 32-bit seed from a tuple of integer keys.

    Args:
        keys: Non-negative integers, e.g. (run seed, domain index, batch index)

    Returns:
        Seed that is a pure function of the keys
    """
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def generate_dataset(
    seed: int,
    class_count: int,
    samples: int,
    side: int,
    channels: int = 3,
) -> LabeledImageSet:
    """
    Generate a labeled set of procedural grating images.

    Every class has its own grating orientation and spatial frequency; phase,
    position, envelope width and color vary per sample.

    Args:
        seed: Generation seed; the output is a pure function of all arguments
        class_count: Number of classes (>= 2)
        samples: Number of images (>= class_count)
        side: Image height and width in pixels (>= 16)
        channels: Number of color channels

    Returns:
        LabeledImageSet in which every class appears at least once

    Raises:
        ParameterError: If any size is out of range

    Example:
        >>> data = generate_dataset(seed=0, class_count=4, samples=4, side=32)
        >>> sorted(data.labels.tolist())
        [0, 1, 2, 3]
    """
    if class_count < 2:
        raise ParameterError(f"class_count must be >= 2, got {class_count}")
    if samples < class_count:
        raise ParameterError(f"samples ({samples}) must be >= class_count ({class_count})")
    if side < 16:
        raise ParameterError(f"side must be >= 16, got {side}")
    if channels < 1:
        raise ParameterError(f"channels must be >= 1, got {channels}")

    gen = torch.Generator().manual_seed(seed)

    labels = (torch.arange(samples) % class_count)[torch.randperm(samples, generator=gen)]
    lab = labels.to(torch.float32)

    gap = math.pi / class_count
    jitter = torch.rand(samples, generator=gen) - 0.5
    angle = (lab + jitter * constants.PATTERN_ANGLE_JITTER) * gap

    freq = constants.PATTERN_BASE_FREQUENCY + constants.PATTERN_FREQUENCY_STEP * (labels % 2)
    freq = freq * (
        1.0 + (torch.rand(samples, generator=gen) - 0.5) * 2 * constants.PATTERN_FREQUENCY_JITTER
    )
    phase = torch.rand(samples, generator=gen) * 2 * math.pi

    coords = torch.linspace(-1.0, 1.0, side)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    u = xx[None] * torch.cos(angle)[:, None, None] + yy[None] * torch.sin(angle)[:, None, None]
    grating = torch.sin(math.pi * freq[:, None, None] * u + phase[:, None, None])

    center = (torch.rand(samples, 2, generator=gen) - 0.5) * 0.6
    width = 0.5 + 0.2 * torch.rand(samples, generator=gen)
    dist2 = (xx[None] - center[:, 0, None, None]) ** 2 + (yy[None] - center[:, 1, None, None]) ** 2
    envelope = torch.exp(-dist2 / (2 * width[:, None, None] ** 2))

    color = 0.6 + 0.4 * torch.rand(samples, channels, generator=gen)
    noise = torch.randn(samples, channels, side, side, generator=gen)

    images = (
        constants.PATTERN_BACKGROUND
        + constants.PATTERN_AMPLITUDE * (envelope * grating)[:, None] * color[:, :, None, None]
        + constants.PATTERN_PIXEL_NOISE * noise
    )
    return LabeledImageSet(
        images=images.clamp(0.0, 1.0).contiguous(),
        labels=labels,
        class_count=class_count,
        seed=seed,
    )


def apply_corruption(batch: ImageBatch, spec: CorruptionSpec, seed: int = 0) -> ImageBatch:
    """
    Corrupt a batch of images.

    For a fixed kind, image and seed the mean absolute pixel change is
    non-decreasing in severity: stochastic corruptions draw the same noise for
    every severity and only scale it.

    Args:
        batch: Images of shape (N, C, H, W) in [0, 1]
        spec: Corruption kind and severity
        seed: Key of the counter-based noise generator

    Returns:
        Corrupted images clipped to [0, 1]

    Raises:
        ParameterError: If the batch is not rank 4 or the severity is invalid
    """
    if not isinstance(spec, CorruptionSpec):
        raise ParameterError(f"expected a CorruptionSpec, got {type(spec).__name__}")
    if batch.ndim != 4:
        raise ParameterError(f"batch must be rank 4, got shape {tuple(batch.shape)}")

    level = spec.severity - 1
    kind = spec.kind

    if kind is CorruptionKind.GAUSSIAN_NOISE:
        sigma = constants.GAUSSIAN_NOISE_SIGMA[level]
        draws = _philox(seed).standard_normal(size=tuple(batch.shape), dtype=np.float32)
        out = batch + sigma * torch.from_numpy(draws).to(batch.dtype)
    elif kind is CorruptionKind.BLUR:
        sigma = constants.BLUR_SIGMA[level]
        size = 2 * math.ceil(3 * sigma) + 1
        out = TF.gaussian_blur(batch, kernel_size=[size, size], sigma=[sigma, sigma])
    elif kind is CorruptionKind.CONTRAST:
        factor = constants.CONTRAST_FACTOR[level]
        mean = batch.mean(dim=(1, 2, 3), keepdim=True)
        out = (batch - mean) * factor + mean
    elif kind is CorruptionKind.BRIGHTNESS:
        out = batch + constants.BRIGHTNESS_SHIFT[level]
    else:
        block = constants.PIXELATE_BLOCK
        height, width = batch.shape[-2:]
        coarse = F.adaptive_avg_pool2d(
            batch, (math.ceil(height / block), math.ceil(width / block))
        )
        pixelated = F.interpolate(coarse, size=(height, width), mode="nearest")
        out = batch + constants.PIXELATE_WEIGHT[level] * (pixelated - batch)

    return out.clamp(0.0, 1.0)


def build_schedule(
    mode: str | ScheduleMode,
    kinds: Sequence[str | CorruptionKind],
    batches_per_domain: int = 1,
) -> DomainSchedule:
    """
    Lay out a test stream.

    Continual schedules visit every kind once at severity 5. Gradual schedules run
    each kind through the severity cycle 1-2-3-4-5-4-3-2-1 before switching kind.

    Args:
        mode: "continual" or "gradual"
        kinds: Corruption kinds in stream order
        batches_per_domain: Number of test batches drawn per scheduled domain

    Returns:
        DomainSchedule

    Raises:
        ParameterError: For an unknown mode or kind, an empty or repeated kind list,
            or a non-positive batch count
    """
    try:
        schedule_mode = ScheduleMode(mode)
    except ValueError as e:
        raise ParameterError(f"Unknown schedule mode '{mode}'") from e
    if not kinds:
        raise ParameterError("kinds must not be empty")
    if batches_per_domain < 1:
        raise ParameterError(f"batches_per_domain must be >= 1, got {batches_per_domain}")

    parsed = [CorruptionKind.parse(kind) for kind in kinds]
    if len(set(parsed)) != len(parsed):
        raise ParameterError("each corruption kind may appear only once in a schedule")

    if schedule_mode is ScheduleMode.CONTINUAL:
        severities: tuple[int, ...] = (constants.CONTINUAL_SEVERITY,)
    else:
        severities = constants.GRADUAL_SEVERITY_CYCLE

    entries = [
        ScheduleEntry(CorruptionSpec(kind, severity), batches_per_domain)
        for kind in parsed
        for severity in severities
    ]
    return DomainSchedule(entries=entries, mode=schedule_mode)


@dataclass
class StreamBatch:
    """One corrupted test batch of a scheduled stream."""

    domain_index: int
    batch_index: int
    spec: CorruptionSpec
    images: ImageBatch
    labels: torch.Tensor


def iter_test_stream(
    schedule: DomainSchedule,
    test_set: LabeledImageSet,
    batch_size: int,
    seed: int,
) -> Iterator[StreamBatch]:
    """
    Yield the corrupted test batches of a schedule in stream order.

    Each domain walks a seeded permutation of the test set (wrapping around when
    it needs more samples than the set holds); corruption noise is keyed by
    (seed, domain index, batch index), so the stream is replayable.

    Args:
        schedule: Domains to visit
        test_set: Clean labeled test images
        batch_size: Samples per batch
        seed: Stream seed

    Yields:
        StreamBatch for every scheduled batch
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if len(test_set) == 0:
        raise ParameterError("test set is empty")

    batch_index = 0
    for domain_index, entry in enumerate(schedule.entries):
        needed = entry.batch_count * batch_size
        order = np.concatenate(
            [
                _philox(stream_seed(seed, domain_index, repeat)).permutation(len(test_set))
                for repeat in range(math.ceil(needed / len(test_set)))
            ]
        )
        for local in range(entry.batch_count):
            indices = torch.from_numpy(order[local * batch_size : (local + 1) * batch_size])
            clean = test_set.subset(indices)
            images = apply_corruption(
                clean.images, entry.spec, seed=stream_seed(seed, domain_index, local)
            )
            yield StreamBatch(domain_index, batch_index, entry.spec, images, clean.labels)
            batch_index += 1


def save_dataset(data: LabeledImageSet, path: str | Path) -> Path:
    """
    Export a dataset as a flat float32 binary file plus a JSON sidecar.

    Args:
        data: Dataset to export
        path: Target path; the suffix is replaced by ``.bin`` and ``.json``

    Returns:
        Path of the JSON sidecar
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    sidecar = path.with_suffix(".json")

    data.images.detach().cpu().to(torch.float32).contiguous().numpy().tofile(blob)
    meta = {
        "shape": list(data.images.shape),
        "dtype": "float32",
        "labels": data.labels.tolist(),
        "class_count": data.class_count,
        "seed": data.seed,
        "constants_version": constants.CONSTANTS_VERSION,
    }
    sidecar.write_text(json.dumps(meta, indent=2))
    return sidecar


def load_dataset(path: str | Path) -> LabeledImageSet:
    """
    Import a dataset written by save_dataset.

    Raises:
        FileNotFoundError: If the binary or the sidecar is missing
        ParameterError: If the sidecar is inconsistent with the binary or was written
            with another constants version
    """
    path = Path(path)
    blob = path.with_suffix(".bin")
    sidecar = path.with_suffix(".json")
    if not blob.exists() or not sidecar.exists():
        raise FileNotFoundError(f"Dataset files not found: {blob} / {sidecar}")

    meta = json.loads(sidecar.read_text())
    if meta.get("constants_version") != constants.CONSTANTS_VERSION:
        raise ParameterError(
            f"Dataset written with constants version {meta.get('constants_version')}, "
            f"this build uses {constants.CONSTANTS_VERSION}"
        )
    shape = tuple(meta["shape"])
    flat = np.fromfile(blob, dtype=np.float32)
    if flat.size != math.prod(shape):
        raise ParameterError(f"Binary holds {flat.size} values, sidecar expects shape {shape}")

    return LabeledImageSet(
        images=torch.from_numpy(flat.reshape(shape).copy()),
        labels=torch.tensor(meta["labels"], dtype=torch.long),
        class_count=int(meta["class_count"]),
        seed=int(meta["seed"]),
    )
