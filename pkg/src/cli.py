"""Command-line runner: ``python -m src.cli run|compare|traces``."""
import logging
from pathlib import Path
from typing import Annotated, Optional

import pandas as pd
import typer
from rich.console import Console
from rich.table import Table

from config.settings import Config
from src.analysis import intra_cluster_fraction, load_rounds, reward_traces, settled_fraction
from src.errors import ConfigurationError, PPDLError
from src.logging_setup import close_audit_log, configure_logging, open_audit_log
from src.outputs import compare_runs, read_summary, write_outputs, write_sweep
from src.sim import run_experiment
from src.sim_config import parse_config

logger = logging.getLogger(__name__)

app = typer.Typer(help="Private personalized decentralized learning simulator.", no_args_is_help=True)
console = Console()


def _parse_seeds(seed: int | None, seeds: str | None) -> list[int]:
    if seeds:
        try:
            return [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigurationError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
    return [seed] if seed is not None else []


@app.callback()
def main(
    log_level: Annotated[Optional[str], typer.Option(help="Overrides LOG_LEVEL")] = None,
):
    """Configure logging before any command runs."""
    try:
        Config.validate()
    except ValueError as e:
        logging.getLogger(__name__).error(f"Configuration error: {e}")
        raise typer.Exit(code=2)
    configure_logging(level=log_level)


@app.command()
def run(
    config: Annotated[Path, typer.Option("--config", help="Experiment YAML/JSON file")],
    method: Annotated[Optional[str], typer.Option(help="Overrides the method in the file")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Single seed")] = None,
    seeds: Annotated[Optional[str], typer.Option(help="Comma-separated seeds, e.g. 0,1,2")] = None,
    out_dir: Annotated[Optional[Path], typer.Option(help="Defaults to PPDL_OUTPUT_DIR")] = None,
    audit: Annotated[Optional[bool], typer.Option("--audit/--no-audit", help="Write secure-aggregation audit log")] = None,
    checkpoints: Annotated[bool, typer.Option(help="Save best-validation models")] = False,
):
    """Run one experiment per seed and write its result files."""
    out_root = out_dir or Config.OUTPUT_DIR
    audit = Config.AUDIT_LOG if audit is None else audit
    failures = 0
    try:
        overrides = {"method": method} if method else {}
        seed_list = _parse_seeds(seed, seeds) or [parse_config(config, overrides).seed]
        summaries = []
        for s in seed_list:
            cfg = parse_config(config, {**overrides, "seed": s})
            run_dir = out_root / cfg.method.value / f"seed-{s}"
            audit_logger = open_audit_log(run_dir / "audit.jsonl") if audit else None
            try:
                result = run_experiment(cfg, audit_logger=audit_logger)
            except PPDLError as e:
                logger.error(f"Seed {s} failed: {e}", exc_info=True)
                failures += 1
                continue
            finally:
                if audit_logger is not None:
                    close_audit_log()
            write_outputs(result, run_dir, checkpoints=checkpoints)
            summaries.append(read_summary(run_dir))
            console.print(
                f"[bold]{cfg.method.value}[/bold] seed {s}: mean over clusters "
                f"{result.mean_over_clusters:.4f} -> {run_dir}"
            )
        if len(seed_list) > 1 and summaries:
            write_sweep(summaries, out_root / summaries[0]["method"] / "sweep.json")
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        raise typer.Exit(code=2)
    except OSError as e:
        logger.error(f"Cannot write outputs: {e}")
        raise typer.Exit(code=1)
    if failures:
        raise typer.Exit(code=1)


@app.command()
def compare(
    run_dirs: Annotated[list[Path], typer.Argument(help="Run or sweep directories")],
    baseline: Annotated[Optional[str], typer.Option(help="Method to report deltas against")] = None,
    output: Annotated[Optional[Path], typer.Option(help="Also write the table as CSV")] = None,
):
    """Print per-cluster accuracies side by side."""
    try:
        table = compare_runs(run_dirs, baseline=baseline)
    except PPDLError as e:
        logger.error(f"Comparison failed: {e}")
        raise typer.Exit(code=2)

    view = Table(title="Test accuracy per cluster")
    view.add_column("method")
    for column in table.columns:
        view.add_column(column, justify="right")
    for name, row in table.iterrows():
        view.add_row(name, *(f"{v:.4f}" for v in row))
    console.print(view)
    if output is not None:
        table.to_csv(output, index_label="method", float_format="%.6g")
        logger.info(f"Wrote comparison to {output}")


@app.command()
def traces(
    run_dir: Annotated[Path, typer.Argument(help="A single seed's run directory")],
    nodes: Annotated[Optional[str], typer.Option(help="Comma-separated node ids")] = None,
    last: Annotated[int, typer.Option(help="Window for the intra-cluster fraction")] = 30,
    output: Annotated[Optional[Path], typer.Option(help="Write the reward traces as CSV")] = None,
):
    """Reward traces and intra-cluster communication share of one run."""
    try:
        rounds = load_rounds(run_dir)
        accuracy = pd.read_csv(run_dir / "accuracy.csv")
    except (PPDLError, OSError) as e:
        logger.error(f"Cannot read run: {e}")
        raise typer.Exit(code=2)
    clusters = accuracy.sort_values("node")["cluster"].to_numpy()

    selected = [int(n) for n in nodes.split(",")] if nodes else None
    table = reward_traces(rounds, selected)
    console.print(f"intra-cluster fraction (last {last} rounds): {intra_cluster_fraction(rounds, clusters, last):.4f}")
    console.print(f"nodes whose reward variance settled: {settled_fraction(rounds):.2%}")
    if output is not None:
        table.to_csv(output, float_format="%.6g")
        logger.info(f"Wrote reward traces to {output}")
    else:
        console.print(table.tail(10).to_string())


if __name__ == "__main__":
    app()
