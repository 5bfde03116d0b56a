# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any
from typing import Optional
from typing import TypeVar

import click
from ra_utils.async_to_sync import async_to_sync

from upstream_aqm_sim.config import ConfigError
from upstream_aqm_sim.config import dump_config
from upstream_aqm_sim.config import load_config
from upstream_aqm_sim.fleet import AsyncFleetRunner
from upstream_aqm_sim.fleet import compare as compare_summaries
from upstream_aqm_sim.fleet import emit_reports
from upstream_aqm_sim.fleet import FleetConfig
from upstream_aqm_sim.fleet import FleetSummary
from upstream_aqm_sim.fleet import format_comparison
from upstream_aqm_sim.fleet import load_summary
from upstream_aqm_sim.fleet import ReportError
from upstream_aqm_sim.harness import AdmissionRejected
from upstream_aqm_sim.harness import format_float
from upstream_aqm_sim.harness import run_latency_under_load
from upstream_aqm_sim.harness import sanity_scenario
from upstream_aqm_sim.harness import TestConfig
from upstream_aqm_sim.qdisc import Discipline
from upstream_aqm_sim.sim_core import SimulationFault

C = TypeVar("C")

EXIT_USER_ERROR = 1
EXIT_INVARIANT_VIOLATION = 2

config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Configuration file with `key = value` lines.",
)
seed_option = click.option("--seed", type=int, help="Override the seed.")
print_config_option = click.option(
    "--print-config",
    is_flag=True,
    help="Print the effective configuration and exit.",
)


class SimulatorGroup(click.Group):
    """Maps failures onto exit codes: 1 for user errors, 2 for model faults."""

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USER_ERROR)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USER_ERROR)
        except (ConfigError, ReportError, AdmissionRejected) as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(EXIT_USER_ERROR)
        except SimulationFault as exc:
            click.echo(f"Invariant violation: {exc}", err=True)
            sys.exit(EXIT_INVARIANT_VIOLATION)
        sys.exit(rv if isinstance(rv, int) else 0)


def _effective(defaults: C, config_path: Optional[Path], **overrides: Any) -> C:
    cfg = defaults
    if config_path is not None:
        cfg = load_config(config_path, cfg)
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)  # type: ignore
        except ValueError as exc:
            raise ConfigError(str(exc))
    return cfg


@click.group(cls=SimulatorGroup)
@click.option("-v", "--verbose", count=True, help="More logging, repeatable.")
def cli(verbose: int) -> None:
    """Latency under load on a shaped cable upstream, with and without AQM."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@seed_option
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Write report.json and samples.csv here instead of printing.",
)
@click.option(
    "--sanity",
    is_flag=True,
    help="Start from the saturated no-delay demo with a 1 s legacy buffer.",
)
@print_config_option
def simulate(
    config_path: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    sanity: bool,
    print_config: bool,
) -> None:
    """Run one latency-under-load test."""
    defaults = sanity_scenario(Discipline.DOCSIS_PIE) if sanity else TestConfig()
    cfg = _effective(defaults, config_path, seed=seed)
    if print_config:
        click.echo(dump_config(cfg), nl=False)
        return

    report = run_latency_under_load(cfg)
    if out is None:
        click.echo(report.to_json(), nl=False)
    else:
        try:
            paths = report.write(out)
        except OSError as exc:
            raise ReportError(f"Cannot write report to {exc.filename or out}")
        for path in paths:
            click.echo(str(path))
    if not report.valid:
        raise click.ClickException(f"Report invalid: {report.invalid_reason}")


def _echo_summary(summary: FleetSummary) -> None:
    for discipline in summary.variants:
        devices = summary.of(discipline)
        click.echo(
            f"{discipline.value} ({discipline.device_model}): {len(devices)} devices, "
            f"{format_float(summary.band_fraction(discipline))} of means in [15, 30) ms"
        )
    if summary.invalid_count:
        click.echo(f"{summary.invalid_count} invalid reports excluded")


@cli.command()
@config_option
@seed_option
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for the report files.",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Parallel simulation processes.",
)
@print_config_option
@async_to_sync
async def fleet(
    config_path: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    workers: int,
    print_config: bool,
) -> None:
    """Simulate a device population and write its reports."""
    cfg = _effective(FleetConfig(), config_path, master_seed=seed)
    if print_config:
        click.echo(dump_config(cfg), nl=False)
        return
    if out is None:
        raise click.UsageError("--out is required to run a fleet")
    if cfg.devices == 0:
        raise click.ClickException("The fleet has no devices")

    runner = AsyncFleetRunner(workers=workers)
    async with runner:
        summary = await runner.run_fleet(cfg)
    emit_reports(summary, out)
    _echo_summary(summary)


@cli.command()
@click.argument(
    "report_dir", type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Write the re-derived files here, defaults to REPORT_DIR.",
)
def report(report_dir: Path, out: Optional[Path]) -> None:
    """Re-derive CDF and histogram files from a per-device table."""
    summary = load_summary(report_dir)
    for path in emit_reports(summary, out or report_dir):
        click.echo(str(path))


@cli.command()
@click.argument("report_a", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("report_b", type=click.Path(exists=True, file_okay=False, path_type=Path))
def compare(report_a: Path, report_b: Path) -> None:
    """Compare two fleet reports, A minus B."""
    summary_a = load_summary(report_a)
    summary_b = load_summary(report_b)
    try:
        rows = compare_summaries(summary_a, summary_b)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    click.echo(format_comparison(rows), nl=False)


if __name__ == "__main__":
    cli()
