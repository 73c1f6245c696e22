"""Command-line entry point: simulate, calibrate, sweep, pwcet and report."""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click

from hpc_rtms.calibration import CalibrationError, calibrate_failure_rate
from hpc_rtms.cluster import SUMMARY_COLUMNS, ClusterSimulation
from hpc_rtms.config import ConfigError, ExperimentConfig, load_config
from hpc_rtms.engine import RandomStreams
from hpc_rtms.pwcet import MIN_SAMPLES, PwcetError, SampleSet, fit_report_columns, fit_report_row, read_samples
from hpc_rtms.reliability import METRICS_CSV_COLUMNS, CheckpointPolicy, PolicyKind
from hpc_rtms.reports import (
    CALIBRATION_CSV,
    PWCET_CSV,
    PWCET_SVG,
    SWEEP_CSV,
    SWEEP_SVG,
    read_calibrated_rate,
    render_pwcet_svg,
    render_reports,
    render_sweep_svg,
    write_calibration,
    write_csv,
    write_rows,
)
from hpc_rtms.rtms import DECISION_LOG_COLUMNS
from hpc_rtms.sweep import run_sweep
from hpc_rtms.workload import generate_workload, read_workload_csv

EXIT_CONFIG_ERROR = 2
EXIT_CALIBRATION_ERROR = 3

_logger = logging.getLogger(__name__)


def _epsilon_grid(_: click.Context, __: click.Parameter, value: Optional[str]) -> Optional[Tuple[float, ...]]:
    if value is None:
        return None
    try:
        return tuple(float(item) for item in value.split(",") if item.strip())
    except ValueError as exception:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {value!r}") from exception


def experiment_options(command: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by the experiment commands."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path)),
        click.option("--seed", type=int, help="Base seed, overrides the config."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), help="Output directory."),
        click.option("--replicas", type=int, help="Replicas per cell."),
        click.option("--epsilon-grid", callback=_epsilon_grid, help="Comma-separated prediction error bounds."),
        click.option("--exceedance", type=float, help="pWCET exceedance probability."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def handle_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    """Map configuration and calibration failures to their exit codes."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except ConfigError as exception:
            click.echo(str(exception), err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except CalibrationError as exception:
            _logger.critical(f"Calibration failed: {exception}")
            click.echo(f"Calibration failed: {exception}", err=True)
            sys.exit(EXIT_CALIBRATION_ERROR)

    return wrapper


def _config(
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Optional[Path],
    replicas: Optional[int],
    epsilon_grid: Optional[Tuple[float, ...]],
    exceedance: Optional[float],
) -> ExperimentConfig:
    config = load_config(config_path)
    return config.with_overrides(
        seed=seed,
        output_dir=out_dir,
        replicas=replicas,
        epsilon_grid=epsilon_grid,
        exceedance=exceedance,
    )


def _policy_named(config: ExperimentConfig, name: str) -> CheckpointPolicy:
    """A configured policy by name, with its configured parameters when there are any."""
    for policy in (config.policy, *config.policies):
        if policy.name == name:
            return policy
    return CheckpointPolicy.from_name(name)


def _failure_rate(config: ExperimentConfig, required: bool) -> float:
    if config.failure_rate is not None:
        return float(config.failure_rate)
    path = config.output_dir / CALIBRATION_CSV
    if path.exists():
        return read_calibrated_rate(path)
    if required:
        raise ConfigError([f"failure_rate: not set and no {path}; run `calibrate` first or set failure_rate"])
    _logger.warning("No failure rate configured or calibrated; simulating without failures")
    return 0.0


@click.group()
@click.option(
    "--log-level",
    default="INFO",
    show_default=True,
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], case_sensitive=False),
)
@click.version_option(package_name="hpc-rtms")
def cli(log_level: str) -> None:
    """Hierarchical run-time management simulator for heterogeneous HPC clusters."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


@cli.command()
@experiment_options
@handle_errors
def calibrate(**options: Any) -> None:
    """Find the failure rate giving the restart-only baseline a median slowdown of 1."""
    config = _config(**options)
    params = config.calibration
    result = calibrate_failure_rate(
        config.scenario(),
        target=params.target,
        tolerance=params.tolerance,
        max_evaluations=params.max_evaluations,
    )
    write_calibration(
        result, params.target, params.tolerance, config.replicas, config.seed, config.output_dir / CALIBRATION_CSV
    )
    click.echo(f"rate={result.rate:.9g}/s median_overhead={result.overhead:.6f}")


@cli.command()
@experiment_options
@click.option("--workers", type=int, default=1, show_default=True, help="Processes running sweep cells.")
@handle_errors
def sweep(workers: int, **options: Any) -> None:
    """Median slowdown of every policy across the prediction error grid."""
    config = _config(**options)
    rate = _failure_rate(config, required=True)
    result = run_sweep(config.scenario(), config.policies, config.epsilon_grid, rate, workers=workers)
    csv_path = write_csv(result.to_frame(), config.output_dir / SWEEP_CSV)
    render_sweep_svg(csv_path, config.output_dir / SWEEP_SVG)
    click.echo(f"{len(result.cells)} cells written to {csv_path}")


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@experiment_options
@handle_errors
def pwcet(inputs: Tuple[Path, ...], **options: Any) -> None:
    """Fit exponential tails to execution-time samples and report MET against pWCET."""
    config = _config(**options)
    sample_sets: Dict[str, SampleSet] = {}
    try:
        for path in inputs:
            for label, samples in read_samples(path).items():
                if label in sample_sets:
                    raise click.UsageError(f"Sample label {label!r} appears more than once")
                sample_sets[label] = samples
        for label, samples in sample_sets.items():
            if len(samples) < MIN_SAMPLES:
                raise click.ClickException(f"Label {label!r} has {len(samples)} samples, at least {MIN_SAMPLES} needed")
        rows = [fit_report_row(samples, config.exceedance) for samples in sample_sets.values()]
    except (PwcetError, ValueError) as exception:
        raise click.ClickException(str(exception)) from exception
    csv_path = write_rows(rows, fit_report_columns(config.exceedance), config.output_dir / PWCET_CSV)
    render_pwcet_svg(csv_path, config.output_dir / PWCET_SVG)
    click.echo(f"{len(rows)} sample sets written to {csv_path}")


@cli.command()
@experiment_options
@click.option("--policy", type=click.Choice([kind.value for kind in PolicyKind]), help="Checkpoint policy.")
@click.option("--epsilon", type=float, help="Prediction error bound.")
@click.option("--trace", is_flag=True, help="Also write the event trace as trace.tsv.")
@handle_errors
def simulate(policy: Optional[str], epsilon: Optional[float], trace: bool, **options: Any) -> None:
    """Run the two-layer resource manager over a generated or replayed workload."""
    config = _config(**options)
    if policy is not None:
        config = config.with_overrides(policy=_policy_named(config, policy))
    if epsilon is not None:
        config = config.with_overrides(epsilon=epsilon)
    rate = _failure_rate(config, required=False)
    if config.workload_file is not None:
        workload = read_workload_csv(config.workload_file, config.workload)
    else:
        workload = generate_workload(RandomStreams(config.seed).stream("workload"), config.workload)
    simulation = ClusterSimulation(
        config.topology,
        workload,
        config.policy,
        epsilon=config.epsilon,
        costs=config.costs,
        fault_model=config.fault_model(rate),
        rtms=config.rtms,
        thermal=config.thermal,
        seed=config.seed,
        horizon=config.horizon,
        record_trace=trace,
        guard_factor=config.guard_factor,
    )
    result = simulation.run()
    out = config.output_dir
    write_csv(workload.to_frame(), out / "workload.csv")
    write_rows((metric.as_row() for metric in result.metrics), METRICS_CSV_COLUMNS, out / "metrics.csv")
    write_rows((decision.as_row() for decision in result.decisions), DECISION_LOG_COLUMNS, out / "decisions.csv")
    write_rows([result.summary.as_row()], SUMMARY_COLUMNS, out / "summary.csv")
    if trace:
        result.trace.write(out / "trace.tsv")
    summary = result.summary
    click.echo(
        f"done={summary.done} rejected={summary.rejected} unfinished={summary.unfinished} "
        f"median_overhead={summary.median_overhead:.6f} deadline_miss_fraction={summary.deadline_miss_fraction:.6f}"
    )


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("output"))
def report(out_dir: Path) -> None:
    """Re-render the charts from the CSV reports in an output directory."""
    for path in render_reports(out_dir):
        click.echo(str(path))
