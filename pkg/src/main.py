import logging
import os
from pathlib import Path

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from evaluation.report import build_report, compare_reports, load_report, save_report
from models.micro import check_presets
from models.presets import PRESET_CLASSES
from phantoms.dataset import SPLITS, load_dataset, make_splits, save_dataset
from training.trainer import train as run_training
from utils.config import PRESETS, config_hash, load_run_config, resolve_seed
from utils.errors import CimtError, GradCheckFailure
from utils.log import setup_logging, stderr_console

logger = logging.getLogger(__name__)

console = Console()


class CimtGroup(click.Group):
    """Maps package errors onto their documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CimtError as e:
            stderr_console.print(f"[red]error:[/red] {e}")
            ctx.exit(e.exit_code)


def _path(ctx, value):
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else ctx.obj["workdir"] / path


def _fmt(value, digits=3):
    if value is None or value != value:
        return "undefined"
    return f"{value:.{digits}f}"


def _interval(entry):
    if entry is None:
        return "undefined"
    return f"{entry['point']:.3f} ({entry['low']:.3f}-{entry['high']:.3f})"


@click.group(cls=CimtGroup)
@click.option('--workdir', type=click.Path(file_okay=False), default=None,
              help="Base directory for relative paths (fallback: CIMT_WORKDIR, then .)")
@click.option('--seed', type=int, default=None, help="Overrides the config seed (fallback: CIMT_SEED)")
@click.option('--jobs', type=int, default=1, show_default=True, help="Worker threads for generation and evaluation")
@click.option('-v', '--verbose', count=True, help="-v for progress logs, -vv for debug")
@click.pass_context
def cli(ctx, workdir, seed, jobs, verbose):
    """Cluster-induced mask transformer for gastric cancer detection on synthetic phantoms."""
    load_dotenv()
    setup_logging(verbose)
    ctx.ensure_object(dict)
    workdir = workdir or os.getenv("CIMT_WORKDIR") or "."
    ctx.obj.update(workdir=Path(workdir), seed=seed, jobs=max(1, jobs), progress=stderr_console.is_terminal)


@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None, help="Run config JSON")
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Dataset directory to write")
@click.option('--dry-run', is_flag=True, help="Print split counts without writing anything")
@click.pass_context
def gen(ctx, config_path, out, dry_run):
    """Generate a phantom dataset (train/val/test splits)."""
    cfg = load_run_config(_path(ctx, config_path))
    cfg.data.base_seed = resolve_seed(ctx.obj["seed"], cfg.data.base_seed)
    data = cfg.data
    index = make_splits(data.n_train, data.n_val, data.n_test, data.prevalence, data.base_seed,
                        data.difficulty, data.extents)

    table = Table(title=f"Phantom splits ({index.difficulty.name}, seed {data.base_seed})")
    table.add_column("Split")
    table.add_column("Cases", justify="right")
    table.add_column("GC", justify="right")
    table.add_column("Normal", justify="right")
    table.add_column("Prevalence", justify="right")
    for split, counts in index.counts().items():
        n, pos = counts["n"], counts["positive"]
        table.add_row(split, str(n), str(pos), str(n - pos), _fmt(pos / n if n else None, 2))
    console.print(table)

    if dry_run:
        console.print("[yellow]Dry run: nothing written.[/yellow]")
        return
    directory = save_dataset(index, _path(ctx, out), config_hash=config_hash(cfg), jobs=ctx.obj["jobs"],
                             progress=ctx.obj["progress"])
    console.print(f"[green]Dataset written to {directory}[/green]")


@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None, help="Run config JSON")
@click.option('--data', 'data_dir', required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Run directory")
@click.option('--preset', type=click.Choice(list(PRESETS)), default='cimt', show_default=True)
@click.option('--resume', is_flag=True, help="Continue from the last completed epoch in --out")
@click.pass_context
def train(ctx, config_path, data_dir, out, preset, resume):
    """Train a preset; writes checkpoint/ and the JSONL epoch logs."""
    cfg = load_run_config(_path(ctx, config_path))
    seed = resolve_seed(ctx.obj["seed"], cfg.train.seed)
    cfg.train.seed = seed
    dataset = load_dataset(_path(ctx, data_dir))
    result = run_training(preset, dataset, cfg, _path(ctx, out), seed, resume=resume, jobs=ctx.obj["jobs"],
                          progress=ctx.obj["progress"])

    table = Table(title=f"Training summary ({preset})")
    table.add_column("Best epoch", justify="right")
    table.add_column("Val AUC", justify="right")
    table.add_column("Operating threshold", justify="right")
    table.add_column("Skipped steps", justify="right")
    table.add_row(str(result.best_epoch), _fmt(result.best_val_auc), _fmt(result.threshold, 4),
                  str(result.skipped_steps))
    console.print(table)
    console.print(f"[green]Checkpoint written to {result.checkpoint_dir}[/green]")


@cli.command(name="eval")
@click.option('--checkpoint', required=True, type=click.Path(file_okay=False), help="Checkpoint directory")
@click.option('--data', 'data_dir', required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option('--split', type=click.Choice(list(SPLITS)), default='test', show_default=True)
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Report directory")
@click.option('--oracle-roi', is_flag=True, help="Crop with the ground-truth stomach box instead of the localizer")
@click.option('--all-negative-cohort', is_flag=True, help="Evaluate a freshly generated all-normal cohort")
@click.pass_context
def evaluate(ctx, checkpoint, data_dir, split, out, oracle_roi, all_negative_cohort):
    """Score a split with a trained checkpoint; writes report.json, roc.csv and cases.csv."""
    dataset = load_dataset(_path(ctx, data_dir))
    ckpt_dir = _path(ctx, checkpoint)
    report = build_report(ckpt_dir, dataset, split, oracle_roi=oracle_roi, all_negative_cohort=all_negative_cohort,
                          seed=ctx.obj["seed"], jobs=ctx.obj["jobs"], progress=ctx.obj["progress"])
    path = save_report(report, _path(ctx, out))

    table = Table(title=f"{report['preset']} on {report['split']} (n={report['n']['total']})")
    table.add_column("Metric")
    table.add_column("Value (95% CI)")
    table.add_row("AUC", _interval(report["auc"]))
    table.add_row("Sensitivity", _interval(report["sensitivity"]))
    table.add_row("Specificity", _interval(report["specificity"]))
    for row in report["sens_at_spec"]:
        table.add_row(f"Sens @ spec {row['target_specificity']:.2f}", _fmt(row["sensitivity"]))
    loc = report["localization"]
    table.add_row("Localization", f"{loc['hits']}/{loc['n']}" if loc["n"] else "undefined")
    table.add_row("Threshold", f"{report['threshold']['value']:.4f} ({report['threshold']['source']})")
    console.print(table)
    if report["flags"]["roi_fallback_cases"]:
        stderr_console.print(f"[yellow]{len(report['flags']['roi_fallback_cases'])} cases fell back to the "
                             f"full volume ROI[/yellow]")
    console.print(f"[green]Report written to {path}[/green]")


@cli.command()
@click.option('--report-a', required=True, type=click.Path(), help="Report of model A")
@click.option('--report-b', required=True, type=click.Path(), help="Report of model B")
@click.option('--replicas', type=int, default=None, help="Permutation replicas (default: report A's setting)")
@click.option('--csv', 'as_csv', is_flag=True, help="Emit the table as CSV on stdout")
@click.pass_context
def compare(ctx, report_a, report_b, replicas, as_csv):
    """Paired significance of A vs B: DeLong for AUC, permutation for sens/spec."""
    a = load_report(_path(ctx, report_a))
    b = load_report(_path(ctx, report_b))
    seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else a.get("eval", {}).get("seed", 0)
    replicas = replicas or a.get("eval", {}).get("permutation_replicas", 10000)
    table = compare_reports(a, b, replicas=replicas, seed=seed)
    if as_csv:
        click.echo(table.to_csv(index=False), nl=False)
        return

    out = Table(title=f"{a.get('preset', 'A')} vs {b.get('preset', 'B')}")
    for column in ("Metric", "A", "B", "Diff", "Test", "p"):
        out.add_column(column)
    for row in table.itertuples(index=False):
        p = "n/a" if row.p is None or row.p != row.p else f"{row.p:.4f}{row.marker}"
        out.add_row(row.metric, _fmt(row.a), _fmt(row.b), _fmt(row.diff), row.test, p)
    console.print(out)
    console.print("† p < 0.05 (DeLong), * p < 0.05 (permutation)")


@cli.command()
@click.option('--preset', type=click.Choice(sorted(PRESET_CLASSES) + ['all']), default='all', show_default=True)
@click.pass_context
def gradcheck(ctx, preset):
    """Finite-difference check of every preset's float64 micro-model."""
    seed = resolve_seed(ctx.obj["seed"], 0)
    names = sorted(PRESET_CLASSES) if preset == 'all' else [preset]
    reports = check_presets(names, seed)

    table = Table(title=f"Gradient checks (seed {seed})")
    table.add_column("Preset")
    table.add_column("Tensors", justify="right")
    table.add_column("Max rel. err", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Stop-gradient", justify="right")
    table.add_column("Result")
    for r in reports:
        stop = f"{max(r.stop_gradient.values()):.1e}" if r.stop_gradient else "-"
        result = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.label, str(len(r.errors)), f"{r.max_error:.2e}", f"{r.tolerance:.0e}", stop, result)
    console.print(table)

    failed = [r for r in reports if not r.passed]
    if failed:
        raise GradCheckFailure("; ".join(f"{r.label}: {', '.join(r.failures[:3])}" for r in failed))


if __name__ == '__main__':
    cli()
