"""
Command-line surface: train, eval, gradcheck, gen-data and matrix.

Exit codes: 0 success, 2 usage or configuration error, 1 any other failure.
Failures print exactly one `error: <ErrorClass>: <message>` line on stderr.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .config import load_experiment_config
from .data import LongTailSpec, class_counts, synth_gaussian_longtail
from .errors import ConfigurationError, HybridLTError
from .experiments import DEFAULT_ACCEPTANCE_KIT, load_acceptance_kit, run_experiment_matrix
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck_suite
from .metrics import MetricsCollector, evaluate
from .numerics import DEFAULT_FD_STEP
from .training import prepare_datasets, restore_from_checkpoint, run_training

console = Console()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOSS_CHOICES = ["ce", "ce-ce", "ce-only", "sc", "psc", "mpsc"]


def _overrides(**flags: Any) -> Dict[str, Any]:
    return {key: value for key, value in flags.items() if value is not None}


def experiment_options(func):
    """Flags shared by every subcommand that builds an experiment config"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="Flat YAML config file (CLI flags override it)"),
        click.option("--seed", type=int, default=None, help="Seed for every random stream"),
        click.option("--beta", type=float, default=None, help="Imbalance ratio n_max / n_min"),
        click.option("--classes", type=int, default=None, help="Number of classes"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.option("--log-level", default="WARNING",
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(log_level: str):
    """Hybrid contrastive / cross-entropy training for long-tailed classification."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT, force=True)


@main.command()
@experiment_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/train")
@click.option("--loss", type=click.Choice(LOSS_CHOICES), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--tau", type=float, default=None, help="Contrastive temperature")
@click.option("--alpha-schedule", default=None, help="parabolic, linear or constant:X")
@click.option("--sampler", type=click.Choice(["random", "balanced"]), default=None,
              help="Feature-branch sampler")
@click.option("--ce-sampler", type=click.Choice(["random", "balanced"]), default=None,
              help="Classifier-branch sampler")
@click.option("--prototypes-per-class", type=int, default=None)
@click.option("--two-stage/--joint", "two_stage", default=None)
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Continue from a checkpoint written by an identical run")
def train(config_path, seed, beta, classes, out_dir, loss, epochs, tau, alpha_schedule, sampler,
          ce_sampler, prototypes_per_class, two_stage, resume):
    """Train one model and write report.json, epochs.csv and plot data to --out."""
    exp = load_experiment_config(config_path, _overrides(
        seed=seed, data_beta=beta, data_num_classes=classes, loss=loss, epochs=epochs, tau=tau,
        alpha_schedule=alpha_schedule, sc_sampler=sampler, ce_sampler=ce_sampler,
        prototypes_per_class=prototypes_per_class, two_stage=two_stage))
    report = run_training(exp, out_dir, resume_from=resume)

    table = Table(title=f"Run {report.run_id[:8]} ({report.loss}, seed {report.seed})")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right", style="green")
    table.add_row("epochs", str(len(report.epochs)))
    table.add_row("alpha first/last", f"{report.epochs[0].alpha:.3f} / {report.epochs[-1].alpha:.3f}")
    table.add_row("final total loss", f"{report.epochs[-1].total_loss:.5f}")
    for key in ("top1", "head_acc", "medium_acc", "tail_acc",
                "intra_class_compactness", "inter_class_separability"):
        if report.final and key in report.final:
            table.add_row(key, f"{report.final[key]:.4f}")
    table.add_row("wall clock", f"{report.wall_clock_seconds:.1f}s")
    console.print(table)
    console.print(f"report: {Path(out_dir) / 'report.json'}")
    return 0


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, exists=True),
              required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--geometry-space", type=click.Choice(["features", "embedding"]), default="features")
def eval_command(checkpoint_path, out_dir, geometry_space):
    """Evaluate a checkpoint on the test split of the data it was trained on."""
    model, _, exp = restore_from_checkpoint(checkpoint_path)
    train_set, test_set = prepare_datasets(exp)
    if test_set is None:
        raise ConfigurationError("the checkpoint's data config has no test split")
    report = evaluate(model, test_set, class_counts=train_set.counts(), geometry_space=geometry_space)
    target = Path(out_dir) if out_dir else Path(checkpoint_path).parent
    MetricsCollector(target).write_eval(report)

    table = Table(title=f"Evaluation of {checkpoint_path}")
    table.add_column("Class", style="cyan")
    table.add_column("Train count", justify="right")
    table.add_column("Accuracy", justify="right", style="green")
    for c, (count, acc) in enumerate(zip(train_set.counts(), report.per_class_acc)):
        table.add_row(str(c), str(count), f"{acc:.4f}")
    console.print(table)
    console.print(f"top1={report.top1:.4f} head={report.head_acc:.4f} "
                  f"medium={report.medium_acc:.4f} tail={report.tail_acc:.4f}")
    return 0


@main.command()
@click.option("--instances", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--step", type=float, default=None, help="Central-difference step h")
@click.option("--tolerance", type=float, default=None)
@click.option("--kit", "kit_path", type=click.Path(dir_okay=False), default=None,
              help="Acceptance kit supplying the defaults")
def gradcheck(instances, seed, step, tolerance, kit_path):
    """Compare every analytic gradient against central finite differences."""
    settings: Dict[str, Any] = {}
    kit_file = Path(kit_path) if kit_path else DEFAULT_ACCEPTANCE_KIT
    if kit_path or kit_file.exists():
        settings = load_acceptance_kit(kit_file).get("gradcheck", {})
    results = run_gradcheck_suite(
        instances=instances or int(settings.get("instances", 50)), seed=seed,
        h=step or float(settings.get("step", DEFAULT_FD_STEP)),
        tolerance=tolerance or float(settings.get("tolerance", DEFAULT_TOLERANCE)))

    table = Table(title="Finite-difference gradient check")
    table.add_column("Check", style="cyan")
    table.add_column("Instances", justify="right")
    table.add_column("Max rel error", justify="right")
    table.add_column("Value error", justify="right")
    table.add_column("Status")
    for r in results:
        table.add_row(r.name, str(r.instances), f"{r.max_rel_error:.3e}", f"{r.max_value_error:.3e}",
                      "[green]pass[/green]" if r.passed else "[red]FAIL[/red]")
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise HybridLTError(f"gradient check failed for {', '.join(failed)}")
    return 0


@main.command("gen-data")
@experiment_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="data/synthetic")
@click.option("--n-max", type=int, default=None)
@click.option("--input-dim", type=int, default=None)
@click.option("--class-sep", type=float, default=None)
def gen_data(config_path, seed, beta, classes, out_dir, n_max, input_dim, class_sep):
    """Write a synthetic long-tailed train.csv and balanced test.csv."""
    exp = load_experiment_config(config_path, _overrides(
        seed=seed, data_beta=beta, data_num_classes=classes, data_n_max=n_max,
        data_input_dim=input_dim, data_class_sep=class_sep))
    data = exp.data
    spec = LongTailSpec(data.num_classes, data.n_max, data.beta)
    train_set, test_set = synth_gaussian_longtail(spec, data.input_dim, data.class_sep,
                                                  exp.data_seed, data.test_per_class, data.noise_std)
    out = Path(out_dir)
    train_set.to_csv(out / "train.csv")
    test_set.to_csv(out / "test.csv")

    table = Table(title=f"Long-tailed profile (beta={data.beta:g})")
    table.add_column("Class", style="cyan")
    table.add_column("Train", justify="right", style="green")
    for c, n in enumerate(class_counts(spec)):
        table.add_row(str(c), str(n))
    console.print(table)
    console.print(f"wrote {out / 'train.csv'} ({train_set.size} rows) and {out / 'test.csv'}")
    return 0


@main.command()
@click.argument("config_file", type=click.Path(dir_okay=False, exists=True))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--kit", "kit_path", type=click.Path(dir_okay=False), default=None)
def matrix(config_file, out_dir, workers, kit_path):
    """Run every variant x seed of a matrix file and write the summary and claims."""
    out = Path(out_dir) if out_dir else Path("runs") / Path(config_file).stem
    result = run_experiment_matrix(config_file, out, workers, kit_path)

    table = Table(title=f"Matrix summary ({out})")
    table.add_column("Variant", style="cyan")
    table.add_column("Runs", justify="right")
    table.add_column("Failed", justify="right", style="red")
    table.add_column("Top-1 mean ± std", justify="right", style="green")
    table.add_column("Tail mean", justify="right")
    for _, row in result.summary.iterrows():
        table.add_row(str(row["variant"]), str(row["n_runs"]), str(row["n_failed"]),
                      f"{row['test_top1_mean']:.4f} ± {row['test_top1_std']:.4f}",
                      f"{row['tail_acc_mean']:.4f}")
    console.print(table)
    if result.claims:
        lines = [f"{c.status.upper():7s} {c.name}: {c.detail}" for c in result.claims]
        console.print(Panel.fit("\n".join(lines), title="Claims"))
    return 0


def cli_main(args: Optional[Sequence[str]] = None) -> int:
    argv: List[str] = list(sys.argv[1:] if args is None else args)
    try:
        result = main.main(args=argv, prog_name="hybridlt", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("error: Abort: interrupted", err=True)
        return 1
    except click.UsageError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc.format_message()}", err=True)
        return 2
    except click.ClickException as exc:
        click.echo(f"error: {type(exc).__name__}: {exc.format_message()}", err=True)
        return exc.exit_code
    except ConfigurationError as exc:
        click.echo(f"error: {type(exc).__name__}: {_one_line(exc)}", err=True)
        return 2
    except (HybridLTError, OSError) as exc:
        click.echo(f"error: {type(exc).__name__}: {_one_line(exc)}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())
