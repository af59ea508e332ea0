import json
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import typer
from rich import print
from rich.console import Console
from rich.table import Table

from . import harness
from .config import config_from_dict, config_to_yaml, load_config, validate_config
from .dynamics import dataset_to_csv
from .errors import ReservoirLabError
from .utils import configure_logging, ensure_output_dir
from .validation import build_schedule_for

app = typer.Typer(help="Validation strategies and hyperparameter optimization for Echo State Networks.")
study_app = typer.Typer(help="Studies built on top of ensemble experiments.")
app.add_typer(study_app, name="study")

console = Console()

EXTRA_ARGS = {"allow_extra_args": True, "ignore_unknown_options": True}

ConfigOption = typer.Option(None, "--config", "-c", help="YAML experiment config (merged over the preset).")
SeedOption = typer.Option(None, "--seed", help="Master seed.")
OutOption = typer.Option(None, "--out", "-o", help="Output directory.")


@contextmanager
def _exit_on_error():
    """Library errors become a one-line JSON summary on stderr and exit code 1."""
    try:
        yield
    except (ReservoirLabError, OSError) as e:
        typer.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
        raise typer.Exit(code=1)


def _load(
    config: Optional[Path],
    overrides: List[str],
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    out: Optional[Path] = None,
    strategies: Optional[List[str]] = None,
    optimizers: Optional[List[str]] = None,
    arch: Optional[str] = None,
):
    cfg = load_config(config, overrides)
    # explicit flags win over the file and the overrides
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.launcher.workers = workers
    if out is not None:
        cfg.output_dir = str(out)
    if strategies:
        cfg.strategies = list(strategies)
    if optimizers:
        cfg.optimizers = list(optimizers)
    if arch is not None:
        cfg.reservoir.arch = arch
    validate_config(cfg)
    return cfg


def _fmt(value, spec: str = ".3g") -> str:
    return "-" if value is None else format(value, spec)


def _print_summary(record: harness.ExperimentRecord):
    table = Table(title=f"Ensemble {record.config_hash}")
    for column in ("strategy/optimizer", "n", "val median MSE", "test median MSE", "test median PH", "PH censored"):
        table.add_column(column)
    for pair, stats in record.summary.items():
        test = stats["test"]
        table.add_row(
            pair,
            str(stats["n"]),
            _fmt(stats["validation"]["mse_percentiles"]["50"]),
            _fmt(test["mse_percentiles"]["50"]),
            _fmt(test["ph_percentiles"].get("50"), ".2f"),
            _fmt(stats.get("ph_censored_fraction"), ".0%"),
        )
    console.print(table)

    spearman = Table(title="Spearman (validation vs test)")
    for strategy in record.spearman:
        spearman.add_column(strategy)
    spearman.add_row(*[_fmt(v, ".2f") for v in record.spearman.values()])
    console.print(spearman)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging.")):
    configure_logging(verbose)


@app.command(context_settings=EXTRA_ARGS)
def generate(ctx: typer.Context, config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption, out: Optional[Path] = OutOption):
    """
    Build (or load from the cache) the configured dataset and write it as dataset.csv.
    """
    with _exit_on_error():
        cfg = _load(config, ctx.args, seed=seed, out=out)
        if seed is not None:
            cfg.dataset.seed = seed
        dataset = harness.prepare_dataset(cfg)
        path = ensure_output_dir(cfg.output_dir) / "dataset.csv"
        dataset_to_csv(dataset, path)
    print(f"[green]{dataset.variant}[/green]: {dataset.n_steps} steps, {dataset.steps_per_lt} steps per LT, written to {path}")


@app.command(context_settings=EXTRA_ARGS)
def run(
    ctx: typer.Context,
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    workers: Optional[int] = typer.Option(None, "--workers", "-w", help="Parallel local jobs (submitit)."),
    out: Optional[Path] = OutOption,
    strategy: Optional[List[str]] = typer.Option(None, "--strategy", "-s", help="Validation strategy label (repeatable)."),
    optimizer: Optional[List[str]] = typer.Option(None, "--optimizer", help="GS or BO (repeatable)."),
    arch: Optional[str] = typer.Option(None, "--arch", help="model_free, pod_informed or fe_informed."),
):
    """
    Run the ensemble experiment, persist its record and export csv/json/report.

    Extra `key=value` arguments are applied as config overrides, e.g.
    `reservoir-lab run n_ensemble=5 optimizer.grid_shape=[3,3]`.
    """
    with _exit_on_error():
        cfg = _load(config, ctx.args, seed, workers, out, strategy, optimizer, arch)
        record = harness.run_experiment(cfg, out_dir=cfg.output_dir)
        path = harness.persist_record(record, cfg.output_dir)
        formats = ("csv", "json", "traces", "report") + (("surfaces",) if cfg.test.surfaces else ())
        harness.export(record, path.with_suffix(""), formats)
    _print_summary(record)
    failed = sum(1 for r in record.ensemble.rows if r.error)
    if failed:
        print(f"[yellow]{failed} (network, strategy, optimizer) runs failed, see the error column[/yellow]")
    print(f"[green]Record saved to {path}[/green]")


@app.command(name="export")
def export_command(
    record: Path = typer.Option(..., "--record", "-r", help="Path to a record_<n>.json file."),
    formats: Optional[List[str]] = typer.Option(None, "--format", "-f", help=f"One of {', '.join(harness.EXPORT_FORMATS)} (repeatable)."),
    out: Optional[Path] = OutOption,
):
    """
    Re-export a persisted experiment record.
    """
    with _exit_on_error():
        loaded = harness.load_record(record)
        written = harness.export(loaded, out or record.with_suffix(""), formats or ("csv", "json", "report"))
    for path in written:
        print(f"Wrote {path}")


@app.command(context_settings=EXTRA_ARGS)
def schedule(
    ctx: typer.Context,
    config: Optional[Path] = ConfigOption,
    strategy: Optional[List[str]] = typer.Option(None, "--strategy", "-s", help="Validation strategy label (repeatable)."),
):
    """
    Print the fold schedules of the configured strategies as JSON.
    """
    with _exit_on_error():
        cfg = _load(config, ctx.args, strategies=strategy)
        dataset = harness.prepare_dataset(cfg)
        geometry = harness.schedule_geometry(cfg, dataset)
        schedules = [build_schedule_for(label, dataset, geometry).to_dict(dataset.steps_per_lt) for label in cfg.strategies]
    typer.echo(json.dumps(schedules, indent=2))


@study_app.command(name="fixed-hp", context_settings=EXTRA_ARGS)
def fixed_hp_command(
    ctx: typer.Context,
    config: Optional[Path] = ConfigOption,
    record: Optional[Path] = typer.Option(None, "--record", "-r", help="Reuse the independent optima of this record."),
    strategy: Optional[str] = typer.Option(None, "--strategy", "-s"),
    optimizer: Optional[str] = typer.Option(None, "--optimizer"),
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
):
    """
    Independent optimization against one fixed (sigma_in, rho) for the whole ensemble.
    """
    with _exit_on_error():
        loaded = harness.load_record(record) if record else None
        if loaded is not None and config is None and not ctx.args:
            cfg = config_from_dict(loaded.config)
        else:
            cfg = _load(config, ctx.args, seed=seed, out=out)
        if out is not None:
            cfg.output_dir = str(out)
        study = harness.run_fixed_hp_study(cfg, loaded, strategy, optimizer)
        directory = ensure_output_dir(cfg.output_dir, "studies")
        study.rows.to_csv(directory / "fixed_hp.csv", index=False)
        with open(directory / "fixed_hp_summary.json", "w") as f:
            json.dump(harness.json_safe(study.summary), f, sort_keys=True, indent=2)

    table = Table(title=f"Fixed hyperparameters, {study.strategy}/{study.optimizer}")
    for column in ("mode", "median MSE", "median PH", "p25 PH", "p75 PH"):
        table.add_column(column)
    for mode, stats in study.summary.items():
        ph = stats["ph_percentiles"]
        table.add_row(mode, _fmt(stats["mse_percentiles"]["50"]), _fmt(ph.get("50"), ".2f"), _fmt(ph.get("25"), ".2f"), _fmt(ph.get("75"), ".2f"))
    console.print(table)
    print(f"Rows written to {directory / 'fixed_hp.csv'}")


@study_app.command(name="convergence", context_settings=EXTRA_ARGS)
def convergence_command(
    ctx: typer.Context,
    axis: str = typer.Option("n_ensemble", "--axis", help="n_ensemble or n_test_starts."),
    config: Optional[Path] = ConfigOption,
    record: Optional[Path] = typer.Option(None, "--record", "-r", help="Sweep over an existing record."),
    strategy: Optional[str] = typer.Option(None, "--strategy", "-s"),
    optimizer: Optional[str] = typer.Option(None, "--optimizer"),
    out: Optional[Path] = OutOption,
):
    """
    Quartiles as a function of ensemble size or of the number of test starts.
    """
    with _exit_on_error():
        source = harness.load_record(record) if record else _load(config, ctx.args, out=out)
        table = harness.run_convergence_sweep(source, axis, strategy, optimizer)
        base = out or (record.with_suffix("") if record else Path(source.output_dir))
        path = ensure_output_dir(base, "studies") / f"convergence_{axis}.csv"
        table.to_csv(path, index=False)
    console.print(table.to_string(index=False))
    print(f"Written to {path}")


@study_app.command(name="cost", context_settings=EXTRA_ARGS)
def cost_command(
    ctx: typer.Context,
    config: Optional[Path] = ConfigOption,
    network: int = typer.Option(0, "--network", help="Index of the timed network."),
    out: Optional[Path] = OutOption,
):
    """
    Ridge solves and wall-clock of a full grid search (optimizer.grid_shape) per validation strategy.
    """
    with _exit_on_error():
        cfg = _load(config, ctx.args, out=out)
        table = harness.run_cost_study(cfg, network, tuple(cfg.optimizer.grid_shape))
        path = ensure_output_dir(cfg.output_dir, "studies") / "cost.csv"
        table.to_csv(path, index=False)

    rich_table = Table(title="Cost per strategy")
    for column in ("strategy", "folds", "evaluations", "ridge solves", "solves/evaluation", "wall time [s]"):
        rich_table.add_column(column)
    for row in table.itertuples(index=False):
        rich_table.add_row(row.strategy, str(row.n_folds), str(row.evaluations), str(row.ridge_solves), f"{row.solves_per_evaluation:g}", f"{row.wall_time:.2f}")
    console.print(rich_table)
    print(f"Written to {path}")


@app.command(name="show-config", context_settings=EXTRA_ARGS)
def show_config(ctx: typer.Context, config: Optional[Path] = ConfigOption):
    """
    Print the merged configuration as YAML.
    """
    with _exit_on_error():
        cfg = _load(config, ctx.args)
    typer.echo(config_to_yaml(cfg))


if __name__ == "__main__":
    app()
