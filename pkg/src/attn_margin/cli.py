from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import typer
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from .checks import SUITES, run_checks
from .config import ExperimentConfig
from .datasets import builtin_dataset, builtin_names, load_dataset, save_dataset
from .errors import AttnMarginError, InvalidInputError
from .scenarios import DESCRIPTIONS, run_scenario, scenario_name
from .schemas import ScenarioCheck, TokenSelection
from .svm import att_svm, qp_oracle, relaxed_att_svm

app = typer.Typer(add_completion=False, help="attn-margin command line interface")
console = Console()


def _setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )


def _fail(message: str) -> typer.Exit:
    console.print(f"[red]{message}[/red]")
    return typer.Exit(code=2)


def _parse_indices(raw: str, option: str) -> List[int]:
    """Comma-separated 1-based indices to 0-based ints."""
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"{option} must be comma-separated integers, got {raw!r}") from exc
    if any(value < 1 for value in values):
        raise InvalidInputError(f"{option} indices are 1-based")
    return [value - 1 for value in values]


def _checks_table(title: str, checks: List[ScenarioCheck]) -> Table:
    table = Table(title=title)
    table.add_column("check")
    table.add_column("value", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("result")
    for check in checks:
        value = "-" if check.value is None else f"{check.value:.6g}"
        threshold = "-" if check.threshold is None else f"{check.threshold:.6g}"
        if not check.gated:
            verdict = "[dim]info[/dim]"
        else:
            verdict = "[green]pass[/green]" if check.passed else "[red]FAIL[/red]"
        table.add_row(check.name, value, threshold, verdict)
    return table


@app.command("run")
def run(
    scenario: str = typer.Argument(..., help="Scenario name (see list-scenarios)"),
    config_path: Optional[Path] = typer.Option(None, "--config", exists=True, help="YAML or JSON config"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory for artifacts"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    trials: Optional[int] = typer.Option(None, "--trials", help="Census trials per dimension"),
    jobs: Optional[int] = typer.Option(None, "--jobs", help="Worker processes for the census"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Run a registered scenario and write its CSV/JSON artifacts."""
    _setup_logging(verbose)
    try:
        name = scenario_name(scenario)
        if config_path is not None:
            config = ExperimentConfig.load(config_path, scenario=name)
        else:
            config = ExperimentConfig(scenario=name)
        config = config.with_overrides(seed=seed, trials=trials, jobs=jobs, output_dir=out)
        report = run_scenario(config)
    except ValidationError as exc:
        raise _fail(f"invalid config: {exc}")
    except yaml.YAMLError as exc:
        raise _fail(f"cannot parse config: {exc}")
    except AttnMarginError as exc:
        raise _fail(str(exc))
    except OSError as exc:
        raise _fail(f"cannot write artifacts: {exc}")

    console.print(_checks_table(f"{report.scenario}", report.checks))
    console.print(f"Wrote {len(report.artifacts)} artifacts to {config.output_dir}.")
    if not report.passed:
        raise typer.Exit(code=1)


@app.command("solve-svm")
def solve_svm(
    dataset_path: Path = typer.Option(..., "--dataset", exists=True, help="Dataset JSON"),
    alpha: str = typer.Option(..., "--alpha", help="Selected token per input, 1-based, e.g. 1,3,2"),
    support: Optional[str] = typer.Option(None, "--support", help="1-based inputs kept at margin 1 (relaxed program)"),
    oracle: bool = typer.Option(
        False, "--oracle", help="Use brute-force active-set enumeration (full program only, not with --support)"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Solve the ATT-SVM program for one token selection and print the solution as JSON."""
    _setup_logging(verbose)
    if oracle and support is not None:
        raise _fail("--oracle solves the full program and cannot be combined with --support")
    try:
        dataset, _ = load_dataset(dataset_path)
        selection = TokenSelection(tuple(_parse_indices(alpha, "--alpha")))
        selection.validate_for(dataset.token_counts)
        if support is not None:
            solution = relaxed_att_svm(dataset, selection, _parse_indices(support, "--support"))
        elif oracle:
            solution = qp_oracle(dataset, selection)
        else:
            solution = att_svm(dataset, selection)
    except AttnMarginError as exc:
        raise _fail(str(exc))
    console.print_json(data=solution.to_json_dict())


@app.command("check")
def check(
    seed: int = typer.Option(0, "--seed"),
    only: Optional[List[str]] = typer.Option(None, "--only", help=f"Suites to run: {', '.join(SUITES)}"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Run the property suites (gradients, SVM oracle, descent, mapping)."""
    _setup_logging(verbose)
    unknown = sorted(set(only or []) - set(SUITES))
    if unknown:
        raise _fail(f"unknown suites: {', '.join(unknown)}")
    results = run_checks(seed, only)
    console.print(_checks_table("property suites", results))
    if not all(result.passed for result in results):
        raise typer.Exit(code=1)


@app.command("list-scenarios")
def list_scenarios() -> None:
    """List registered scenarios and builtin datasets."""
    table = Table(title="scenarios")
    table.add_column("name")
    table.add_column("description")
    for name, description in DESCRIPTIONS.items():
        table.add_row(name.value, description)
    console.print(table)
    console.print(f"Builtin datasets: {', '.join(builtin_names())}")


@app.command("export-dataset")
def export_dataset(
    name: str = typer.Argument(..., help="Builtin dataset name, e.g. fig1_global or loss_bias(3)"),
    out: Path = typer.Option(..., "--out", help="Destination JSON file"),
) -> None:
    """Write a builtin dataset (with its head v) as JSON."""
    try:
        instance = builtin_dataset(name)
        path = save_dataset(instance.dataset, out, v=instance.v)
    except AttnMarginError as exc:
        raise _fail(str(exc))
    suffix = " (figure-approximate coordinates)" if instance.figure_approximate else ""
    console.print(f"Exported {instance.name} to {path}{suffix}.")


if __name__ == "__main__":
    app()
