"""
Command-line interface for gradual-tta.

This module provides the ``gtta`` entry point using Click.
"""

import sys
from pathlib import Path

import click
import pandas as pd

from gradual_tta import __version__
from gradual_tta.config import (
    PRESETS,
    ExperimentConfig,
    apply_overrides,
    load_preset,
    merge_file,
    parse_override,
)
from gradual_tta.errors import ConfigurationError, ParameterError, TrainingError
from gradual_tta.harness import ResultTable, expand_cells, run_experiment


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise click.BadParameter(f"seeds must be comma-separated integers, got '{text}'") from e


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """
    Gradual test-time adaptation experiments on a synthetic corruption benchmark.

    Examples:

        # Run a shipped preset
        gtta run --preset continual-toy --out results/continual

        # Run from a config file with overrides
        gtta run --config exp.yaml --set mixup.lambda=0.25 --set st.filtering=false

        # Print the result tables of a finished run
        gtta report --in results/continual
    """


@main.command()
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, path_type=Path),
    help="Path to YAML or JSON experiment configuration",
)
@click.option(
    "--preset",
    type=click.Choice(sorted(PRESETS)),
    help="Start from a shipped preset (the config file is applied on top)",
)
@click.option("--seeds", help="Comma-separated run seeds, e.g. 0,1,2")
@click.option("--out", "output_dir", type=click.Path(path_type=Path), help="Output directory")
@click.option("--workers", type=int, help="Worker processes for independent cells")
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config key, e.g. bn.variant=bn_ema (repeatable)",
)
@click.option(
    "-v",
    "--verbose",
    is_flag=True,
    help="Enable verbose output",
)
@click.option(
    "-q",
    "--quiet",
    is_flag=True,
    help="Suppress all output except errors",
)
def run(
    config_file: Path | None,
    preset: str | None,
    seeds: str | None,
    output_dir: Path | None,
    workers: int | None,
    overrides: tuple[str, ...],
    verbose: bool,
    quiet: bool,
) -> None:
    """
    Run an experiment and write results.csv, per-run JSON and the config.

    Exits with status 1 if the configuration is invalid or any run failed.
    """

    def log(msg: str, force: bool = False) -> None:
        if (verbose or force) and not quiet:
            click.echo(msg)

    def error(msg: str) -> None:
        click.echo(f"Error: {msg}", err=True)

    try:
        config = load_preset(preset) if preset else ExperimentConfig()
        if config_file:
            config = merge_file(config, config_file)
        cli_overrides: dict[str, object] = dict(parse_override(o) for o in overrides)
        if seeds is not None:
            cli_overrides["seeds"] = _parse_seeds(seeds)
        if output_dir is not None:
            cli_overrides["output_dir"] = str(output_dir)
        if workers is not None:
            cli_overrides["workers"] = workers
        config = apply_overrides(config, cli_overrides)
        config.validate()
        cells = expand_cells(config)
    except (ConfigurationError, ParameterError, FileNotFoundError) as e:
        error(str(e))
        sys.exit(1)

    log(f"Experiment '{config.name}': {len(cells)} runs -> {config.output_dir}", force=True)
    if verbose:
        log(config.to_yaml())

    try:
        table = run_experiment(config, progress=lambda msg: log(msg, force=True))
    except (ConfigurationError, ParameterError, TrainingError) as e:
        error(str(e))
        sys.exit(1)

    if table.failures:
        for name, message in table.failures.items():
            error(f"run {name} failed: {message}")
        error(f"{len(table.failures)} of {len(cells)} runs failed")
        sys.exit(1)

    log(f"Results written to {Path(config.output_dir) / 'results.csv'}", force=True)


@main.command()
@click.option(
    "--in",
    "input_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Output directory of a finished run",
)
@click.option(
    "--per-domain/--no-per-domain",
    default=True,
    help="Include one column per test domain",
)
def report(input_dir: Path, per_domain: bool) -> None:
    """Print error tables (per domain, level 1-5 mean, level 5 mean) of a finished run."""
    try:
        table = ResultTable.from_csv(input_dir / "results.csv")
    except (FileNotFoundError, ParameterError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)

    if not table.rows:
        click.echo("No results.")
        return

    frame = table.pivot() if per_domain else table.summary().set_index(table.group_keys())
    with pd.option_context("display.width", 200, "display.max_columns", None):
        click.echo(frame.round(1).to_string())

    failures = input_dir / "failures.json"
    if failures.exists():
        click.echo(f"\nSome runs failed; see {failures}", err=True)
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
