"""Command Line Entry Point"""
from functools import wraps
from pathlib import Path
from typing import Optional
import logging
import sys

import click
from rich.console import Console
from rich.table import Table

from . import __version__
from .config import ExperimentConfig, load_experiment_config, settings
from .errors import DeltaDiffError
from .services import pipeline

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

console = Console()


def exit_codes(func):
    """Map harness errors to the documented exit codes"""

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DeltaDiffError as e:
            logger.error(f"{type(e).__name__}: {e}")
            console.print(f"[red]error[/red] {type(e).__name__}: {e}")
            sys.exit(e.exit_code)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as e:
            logger.exception(f"Internal error: {e}")
            console.print(f"[red]internal error[/red] {e}")
            sys.exit(5)

    return wrapper


def _config(path: str, seed: Optional[int], out: Optional[str]) -> ExperimentConfig:
    return load_experiment_config(path, seed=seed, out=out)


config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="Experiment TOML file")
seed_option = click.option("--seed", type=int, default=None, help="Override the experiment seed")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help="Override the output directory")


@click.group()
@click.version_option(__version__, prog_name="deltadiff")
def cli():
    """Differential testing of model conversions, optimizations and backends"""


@cli.command()
@config_option
@seed_option
@out_option
@exit_codes
def generate(config_path: str, seed: Optional[int], out: Optional[str]):
    """Materialize every variant of the experiment"""
    config = _config(config_path, seed, out)
    manifest = pipeline.generate(config)
    table = Table(title=f"Variants ({config.output_dir})")
    table.add_column("variant")
    table.add_column("status")
    failed = {f.variant_id: f for f in manifest.failed}
    for variant_id in manifest.ids():
        if variant_id in failed:
            table.add_row(variant_id, f"[yellow]FAILED[/yellow] {failed[variant_id].error}")
        else:
            table.add_row(variant_id, "[green]ok[/green]")
    console.print(table)


@cli.command()
@config_option
@click.option("--debug", is_flag=True, help="Also capture per-layer traces")
@seed_option
@out_option
@exit_codes
def run(config_path: str, debug: bool, seed: Optional[int], out: Optional[str]):
    """Execute the generated variants over the corpus"""
    config = _config(config_path, seed, out)
    records = pipeline.run(config, debug=debug)
    table = Table(title="Execution")
    table.add_column("variant")
    table.add_column("images", justify="right")
    table.add_column("mean ms", justify="right")
    for variant_id, record in records.items():
        pooled = record.pooled_durations()
        mean_ms = sum(pooled) / len(pooled) / 1e6 if pooled else 0.0
        table.add_row(variant_id, str(len(record.images)), f"{mean_ms:.3f}")
    console.print(table)


@cli.command()
@config_option
@click.option("--pair", "pairs", multiple=True, nargs=2, help="Variant pair to compare (repeatable)")
@seed_option
@out_option
@exit_codes
def analyze(config_path: str, pairs, seed: Optional[int], out: Optional[str]):
    """Compare records pairwise and localize divergences"""
    config = _config(config_path, seed, out)
    result = pipeline.analyze(config, [tuple(p) for p in pairs] or None)
    table = Table(title=f"Against {result.baseline}")
    table.add_column("variant a")
    table.add_column("variant b")
    table.add_column("labels differ", justify="right")
    table.add_column("mean RBO", justify="right")
    table.add_column("verdict")
    for report in result.reports:
        table.add_row(
            report.variant_a,
            report.variant_b,
            f"{report.dissimilarity_pct:.2f}%",
            f"{report.mean_rbo:.4f}",
            report.verdict.value,
        )
    console.print(table)
    console.print(f"matrix: {result.matrix_path}")


@cli.command()
@config_option
@seed_option
@out_option
@exit_codes
def sweep(config_path: str, seed: Optional[int], out: Optional[str]):
    """Time each optimization pass applied alone against Basic"""
    config = _config(config_path, seed, out)
    for model, results in pipeline.sweep(config).items():
        table = Table(title=f"Pass sweep: {model}")
        table.add_column("pass")
        table.add_column("changed")
        table.add_column("time", justify="right")
        table.add_column("p", justify="right")
        for r in results:
            c = r.comparison
            table.add_row(
                r.pass_id.value,
                "yes" if r.changed else "no",
                f"{c.pct_diff:+.1f}%" if c is not None else "n/a",
                f"{c.p_value:.3f}" if c is not None else "n/a",
            )
        console.print(table)


@cli.command()
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Destination directory")
@exit_codes
def assets(out: str):
    """Write the bundled desk models and desk corpus"""
    path = pipeline.export_assets(out)
    console.print(f"Desk assets written to {path}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment TOML file supplying the seed and output directory")
@seed_option
@out_option
@exit_codes
def demo(config_path: Optional[str], seed: Optional[int], out: Optional[str]):
    """Inject a conversion fault, localize it, repair it"""
    if config_path is not None:
        config = _config(config_path, seed, out)
        result = pipeline.demo(config.output_dir, config.noise_seed)
    else:
        result = pipeline.demo(Path(out or "out"), seed or 0)
    faulty, repaired = result.faulty, result.repaired

    console.rule("tinynet-A: source vs converted")
    console.print(f"Noise seed {result.noise_seed}: top-1 labels differ on {faulty.dissimilarity_pct:.2f}% "
                  f"of the desk corpus (mean RBO {faulty.mean_rbo:.4f})")
    if faulty.param_diff is not None:
        console.print(f"Parameter differences: mean {faulty.param_diff.mean:.2e}, max {faulty.param_diff.max:.2e}, "
                      f"{faulty.param_diff.count} elements differ")
    if faulty.per_layer:
        table = Table(title=f"Activation differences ({'divergent images' if faulty.dissimilarity_pct else 'all images'})")
        table.add_column("layer", justify="right")
        table.add_column("node")
        table.add_column("mean |d|", justify="right")
        table.add_column("max |d|", justify="right")
        for layer in faulty.per_layer:
            table.add_row(str(layer.layer_index), layer.node_id, f"{layer.mean:.3e}", f"{layer.max:.3e}")
        console.print(table)
    console.print(f"Verdict: [bold]{faulty.verdict.value}[/bold]")

    console.rule("after replacing the converted parameters")
    console.print(f"Top-1 labels differ on {repaired.dissimilarity_pct:.2f}% of images; "
                  f"verdict [bold]{repaired.verdict.value}[/bold]")
    if not result.converged:
        console.print("[red]repair did not converge[/red]")
        sys.exit(5)
    console.print("[green]divergence gone after repair[/green]")


def main():
    cli()


if __name__ == "__main__":
    main()
