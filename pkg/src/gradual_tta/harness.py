"""
Experiment orchestration and result tables.

run_experiment prepares data and pre-trained networks once, expands the sweep
into (method, axes, seed) cells, runs every cell in isolation and writes the
results directory.
"""

from __future__ import annotations

import copy
import itertools
import json
import os
import warnings
from collections.abc import Callable
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
import torch

from gradual_tta.config import ExperimentConfig, method_config
from gradual_tta.engine import AdaptConfig, AdaptMethod, run_sequence, sliding_window_adapt
from gradual_tta.errors import ConfigurationError, ParameterError
from gradual_tta.metrics import error_rate
from gradual_tta.models import DomainSchedule, LabeledImageSet, SequenceReport
from gradual_tta.networks import (
    Classifier,
    load_classifier,
    read_manifest,
    save_checkpoint,
    train_source,
)
from gradual_tta.style_transfer import (
    StyleNetwork,
    load_style_network,
    pretrain_style_network,
    save_style_network,
)
from gradual_tta.toy_data import build_schedule, generate_dataset

__all__ = [
    "COLUMNS",
    "Cell",
    "ResultTable",
    "error_rate",
    "expand_cells",
    "run_experiment",
    "severity5_mean",
]

ProgressCallback = Callable[[str], None]

COLUMNS = [
    "method",
    "domain",
    "kind",
    "severity",
    "seed",
    "lambda_mix",
    "updates",
    "source_fraction",
    "buffer_size",
    "error",
]


@dataclass
class Cell:
    """
    One independent run of an experiment grid.

    Attributes:
        method: Method name or alias as listed in the sweep
        seed: Run seed
        adapt: Fully resolved adapt settings
        axes: Swept axis values of this cell
    """

    method: str
    seed: int
    adapt: AdaptConfig
    axes: dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        parts = [self.method]
        for axis, value in self.axes.items():
            parts.append(f"{axis}={'batch' if value is None else value}")
        parts.append(f"seed={self.seed}")
        return "_".join(parts)

    @property
    def lambda_mix(self) -> float:
        return float(self.adapt.mixup.lambda_mix)

    @property
    def updates(self) -> int:
        return int(self.adapt.updates_per_batch)

    @property
    def source_fraction(self) -> float:
        return float(self.adapt.source_fraction)

    @property
    def buffer_size(self) -> int | None:
        return self.adapt.buffer_size


_AXIS_FIELDS = {
    "lambda_mix": ("mixup", "lambda_mix"),
    "updates": (None, "updates_per_batch"),
    "source_fraction": (None, "source_fraction"),
    "buffer_size": (None, "buffer_size"),
}


def expand_cells(config: ExperimentConfig) -> list[Cell]:
    """
    Expand methods × swept axes × seeds into cells, in that nesting order.

    Raises:
        ConfigurationError: For an unknown method or an invalid combination
    """
    axes = config.sweep.axes()
    names = list(axes)
    cells = []
    for method in config.sweep.methods:
        base = method_config(config, method)
        for values in itertools.product(*(axes[n] for n in names)):
            adapt = copy.deepcopy(base)
            for name, value in zip(names, values):
                section, attr = _AXIS_FIELDS[name]
                setattr(adapt if section is None else getattr(adapt, section), attr, value)
            adapt.validate()
            for seed in config.seeds:
                cells.append(Cell(method, int(seed), adapt, dict(zip(names, values))))
    return cells


@dataclass
class ResultTable:
    """
    Per-domain error rates of every cell, plus the cells that failed.

    Attributes:
        rows: One mapping per (cell, domain) with the COLUMNS keys
        failures: Cell name -> error message
    """

    rows: list[dict[str, Any]] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def add_report(self, cell: Cell, report: SequenceReport) -> None:
        for domain in report.domains:
            if not 0.0 <= domain.error <= 100.0:
                raise ParameterError(f"error rate {domain.error} outside [0, 100]")
            self.rows.append(
                {
                    "method": cell.method,
                    "domain": domain.index,
                    "kind": domain.kind,
                    "severity": domain.severity,
                    "seed": cell.seed,
                    "lambda_mix": cell.lambda_mix,
                    "updates": cell.updates,
                    "source_fraction": cell.source_fraction,
                    "buffer_size": cell.buffer_size if cell.buffer_size is not None else 0,
                    "error": float(domain.error),
                }
            )

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=COLUMNS)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.frame().to_csv(path, index=False, float_format="%.6f")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> ResultTable:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Results file not found: {path}")
        frame = pd.read_csv(path)
        missing = [c for c in COLUMNS if c not in frame.columns]
        if missing:
            raise ParameterError(f"{path} lacks columns: {', '.join(missing)}")
        return cls(rows=frame[COLUMNS].to_dict("records"))

    def group_keys(self) -> list[str]:
        """Method plus every axis that takes more than one value in the table."""
        frame = self.frame()
        axes = [
            c
            for c in ("lambda_mix", "updates", "source_fraction", "buffer_size")
            if frame[c].nunique() > 1
        ]
        return ["method", *axes]

    def domain_means(self) -> pd.DataFrame:
        """Mean error per configuration and domain, over seeds."""
        keys = self.group_keys()
        return (
            self.frame()
            .groupby([*keys, "domain", "kind", "severity"], sort=False)["error"]
            .mean()
            .reset_index()
        )

    def summary(self) -> pd.DataFrame:
        """
        Mean error per configuration: over all domains, and over severity-5 domains.

        Both are means over the per-domain means of the domain_means table.
        """
        domains = self.domain_means()
        keys = self.group_keys()
        overall = domains.groupby(keys, sort=False)["error"].mean().rename("mean")
        level5 = (
            domains[domains["severity"] == 5]
            .groupby(keys, sort=False)["error"]
            .mean()
            .rename("severity5")
        )
        return pd.concat([overall, level5], axis=1).reset_index()

    def overall_mean(self, method: str | None = None) -> float:
        frame = self.frame()
        if method is not None:
            frame = frame[frame["method"] == method]
        if frame.empty:
            raise ParameterError("no rows to average")
        return float(frame["error"].mean())

    def pivot(self) -> pd.DataFrame:
        """Wide layout: one row per configuration, one column per domain, then the summary."""
        domains = self.domain_means()
        keys = self.group_keys()
        domains = domains.assign(
            column=domains["domain"].astype(str)
            + ":"
            + domains["kind"]
            + "@"
            + domains["severity"].astype(str)
        )
        table = domains.pivot_table(index=keys, columns="column", values="error", sort=False)
        order = domains.drop_duplicates("domain").sort_values("domain")["column"].tolist()
        table = table[order]
        summary = self.summary().set_index(keys)
        return table.join(summary)


def severity5_mean(table: ResultTable, method: str | None = None) -> float:
    """
    Mean error over severity-5 domains only.

    Raises:
        ParameterError: If there are no severity-5 rows
    """
    frame = table.frame()
    if method is not None:
        frame = frame[frame["method"] == method]
    frame = frame[frame["severity"] == 5]
    if frame.empty:
        raise ParameterError("table holds no severity-5 rows")
    return float(frame["error"].mean())


@dataclass
class ExperimentContext:
    """Inputs shared read-only by every cell."""

    source: LabeledImageSet
    test: LabeledImageSet
    schedule: DomainSchedule
    model: Classifier
    style: StyleNetwork | None = None


def _check_output_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"Output directory is not writable: {path}")


def _prepare_data(config: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    dataset = config.dataset
    data = generate_dataset(
        seed=dataset.seed,
        class_count=dataset.class_count,
        samples=dataset.train_samples + dataset.test_samples,
        side=dataset.side,
        channels=dataset.channels,
    )
    return data.split(dataset.train_samples)


def _source_model(
    config: ExperimentConfig,
    source: LabeledImageSet,
    out_dir: Path,
    progress: ProgressCallback | None,
) -> Classifier:
    """Load the cached source model when it matches the config, otherwise train it."""
    stem = out_dir / "source_model"
    plain = config.to_dict()
    fingerprint = {"dataset": plain["dataset"], "training": plain["source"]}
    if stem.with_suffix(".json").exists():
        manifest = read_manifest(stem)
        if manifest.get("fingerprint") == fingerprint:
            if progress:
                progress(f"Reusing source model from {stem.with_suffix('.json')}")
            return load_classifier(stem)
        warnings.warn(
            f"Cached source model at {stem} does not match the configuration; retraining",
            UserWarning,
            stacklevel=2,
        )

    if progress:
        progress("Training source model...")
    result = train_source(
        source,
        epochs=config.source.epochs,
        lr=config.source.lr,
        seed=config.source.seed,
        batch_size=config.source.batch_size,
        widths=tuple(config.source.widths),
        progress=progress,
    )
    save_checkpoint(result.model, stem, config.source.seed, {"fingerprint": fingerprint})
    return result.model


def _style_network(
    config: ExperimentConfig,
    source: LabeledImageSet,
    out_dir: Path,
    progress: ProgressCallback | None,
) -> StyleNetwork:
    plain = config.to_dict()
    fingerprint = {"dataset": plain["dataset"], "style": plain["adapt"]["style"]}
    marker = out_dir / "style_network.json"
    if marker.exists() and json.loads(marker.read_text()) == fingerprint:
        if progress:
            progress("Reusing style network")
        return load_style_network(out_dir, config.adapt.style, config.dataset.channels)

    if progress:
        progress("Pre-training style network...")
    network, _ = pretrain_style_network(
        source, config.adapt.style, seed=config.source.seed, progress=progress
    )
    save_style_network(network, out_dir, config.source.seed)
    marker.write_text(json.dumps(fingerprint, indent=2, sort_keys=True))
    return network


def run_cell(
    context: ExperimentContext,
    cell: Cell,
    progress: ProgressCallback | None = None,
) -> SequenceReport:
    """Run one cell on private copies of the shared networks."""
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(cell.seed)
    style = context.style if cell.adapt.parsed_method is AdaptMethod.GTTA_ST else None
    kwargs: dict[str, Any] = {
        "source": context.source,
        "style_network": style,
        "progress": progress,
        "label": cell.name,
    }
    if cell.adapt.buffer_size is not None:
        return sliding_window_adapt(
            context.model, context.schedule, context.test, cell.adapt, cell.seed, **kwargs
        )
    return run_sequence(
        context.model, context.schedule, context.test, cell.adapt, cell.seed, **kwargs
    )


def _run_cell_safely(
    context: ExperimentContext, cell: Cell
) -> tuple[SequenceReport | None, str | None]:
    try:
        return run_cell(context, cell), None
    except Exception as e:  # noqa: BLE001
        return None, f"{type(e).__name__}: {e}"


def _cell_result(future: Future) -> tuple[SequenceReport | None, str | None]:
    # a worker that dies takes the pool with it and fails every pending future
    try:
        return future.result()
    except Exception as e:  # noqa: BLE001
        return None, f"{type(e).__name__}: {e}"


def run_experiment(
    config: ExperimentConfig,
    progress: ProgressCallback | None = None,
) -> ResultTable:
    """
    Run every cell of an experiment and write the results directory.

    The output directory receives ``config.yaml``, ``runs/<cell>.json``,
    ``results.csv`` and the cached pre-trained networks. A failing cell is recorded
    in ``ResultTable.failures`` and the remaining cells still run.

    Args:
        config: Experiment to run
        progress: Callback for progress lines

    Returns:
        ResultTable of all successful cells

    Raises:
        ConfigurationError: For an invalid config or unwritable output directory,
            before any computation
    """
    config.validate()
    cells = expand_cells(config)
    out_dir = Path(config.output_dir)
    _check_output_dir(out_dir)
    (out_dir / "runs").mkdir(exist_ok=True)
    (out_dir / "config.yaml").write_text(config.to_yaml())

    source, test = _prepare_data(config)
    model = _source_model(config, source, out_dir, progress)
    needs_style = any(c.adapt.parsed_method is AdaptMethod.GTTA_ST for c in cells)
    style = _style_network(config, source, out_dir, progress) if needs_style else None
    schedule = build_schedule(
        config.schedule.mode, config.schedule.kinds, config.schedule.batches_per_domain
    )
    context = ExperimentContext(source, test, schedule, model, style)

    if progress:
        progress(f"Running {len(cells)} cells ({config.workers} worker(s))")

    results: list[tuple[SequenceReport | None, str | None]]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_cell_safely, context, cell) for cell in cells]
            results = [_cell_result(f) for f in futures]
    else:
        results = []
        for cell in cells:
            try:
                results.append((run_cell(context, cell, progress), None))
            except Exception as e:  # noqa: BLE001
                results.append((None, f"{type(e).__name__}: {e}"))

    table = ResultTable()
    for cell, (report, failure) in zip(cells, results):
        if report is None:
            table.failures[cell.name] = failure or "unknown error"
            if progress:
                progress(f"[{cell.name}] failed: {failure}")
            continue
        table.add_report(cell, report)
        payload = {
            "cell": cell.name,
            "method": cell.method,
            "axes": cell.axes,
            **report.to_dict(),
        }
        (out_dir / "runs" / f"{cell.name}.json").write_text(json.dumps(payload, indent=2))
        if progress and config.workers > 1 and report.mean_error is not None:
            progress(f"[{cell.name}] mean error {report.mean_error:.2f}%")

    table.to_csv(out_dir / "results.csv")
    failures_path = out_dir / "failures.json"
    if table.failures:
        failures_path.write_text(json.dumps(table.failures, indent=2))
    else:
        failures_path.unlink(missing_ok=True)
    return table
