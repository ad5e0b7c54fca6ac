from pathlib import Path
from typing import Callable, List, Optional

import typer

from core.config.config_load import config_load
from core.errors import INPUT_ERRORS, SNEError
from core.experiment import ExperimentRunner
from core.reports.report_generator import ReportGenerator
from core.utils.logging import error, info, set_quiet, success

app = typer.Typer(help="Spiking Neural Ensemble trainer", rich_markup_mode="rich")

ConfigOption = typer.Option(Path("config_template.yaml"), "--config", "-c", help="Experiment config (YAML)")
SeedOption = typer.Option(None, "--seed", help="Override the master seed from the config")
DeskOption = typer.Option(None, "--desk/--full", help="Desk-scale profile or full-scale run")
QuietOption = typer.Option(False, "--quiet", "-q", help="Only print errors")


def _out(out: Optional[Path], command: str) -> Path:
    return out if out is not None else Path("runs") / command


def _run(action: Callable[[], object]):
    """Run a pipeline and map failures onto exit codes: 2 for bad input, 1 for anything else."""
    try:
        action()
    except typer.Exit:
        raise
    except INPUT_ERRORS as e:
        error(f"{e.error_type.value} error: {e.message}")
        raise typer.Exit(code=2)
    except SNEError as e:
        error(f"{e.error_type.value} error: {e.message}")
        raise typer.Exit(code=1)
    except Exception as e:
        error(f"Unexpected error: {e}")
        raise typer.Exit(code=1)


def _runner(config: Path, seed: Optional[int], desk: Optional[bool], out: Path, quiet: bool) -> ExperimentRunner:
    set_quiet(quiet)
    loaded = config_load(config, seed=seed, desk_scale=desk)
    return ExperimentRunner(loaded, out)


@app.command("train-teacher")
def train_teacher(config: Path = ConfigOption,
                  seed: Optional[int] = SeedOption,
                  out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
                  desk: Optional[bool] = DeskOption,
                  quiet: bool = QuietOption):
    """
    Train the ANN teacher with cross-entropy.

       train-teacher -c config_template.yaml -o runs/teacher
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "teacher"), quiet).train_teacher())


@app.command("finetune-teacher")
def finetune_teacher(teacher: Path = typer.Option(..., "--teacher", "-t", help="Teacher checkpoint"),
                     config: Path = ConfigOption,
                     seed: Optional[int] = SeedOption,
                     out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
                     desk: Optional[bool] = DeskOption,
                     quiet: bool = QuietOption):
    """
    Fine-tune the teacher so its features split into N contiguous clusters (CE + lambda·SIM).
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "finetune"), quiet).finetune_teacher(teacher))


@app.command()
def partition(teacher: Path = typer.Option(..., "--teacher", "-t", help="Teacher checkpoint"),
              config: Path = ConfigOption,
              seed: Optional[int] = SeedOption,
              out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
              plan_out: Optional[Path] = typer.Option(None, "--plan-out", help="Plan file, default <out>/plan.yaml"),
              desk: Optional[bool] = DeskOption,
              quiet: bool = QuietOption):
    """
    Split the teacher's feature columns into one subset per student.

    A fine-tuned teacher always gets the contiguous plan.
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "partition"), quiet).partition(teacher, plan_out))


@app.command("train-ensemble")
def train_ensemble(teacher: Path = typer.Option(..., "--teacher", "-t", help="Teacher checkpoint"),
                   plan: Path = typer.Option(..., "--plan", "-p", help="Partition plan file"),
                   config: Path = ConfigOption,
                   seed: Optional[int] = SeedOption,
                   out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
                   desk: Optional[bool] = DeskOption,
                   quiet: bool = QuietOption):
    """
    Distill the teacher's partitioned features into the spiking student ensemble.
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "ensemble"), quiet).train_ensemble(teacher, plan))


@app.command("sweep-dropout")
def sweep_dropout(ensemble: Path = typer.Option(..., "--ensemble", "-e", help="Ensemble checkpoint"),
                  config: Path = ConfigOption,
                  seed: Optional[int] = SeedOption,
                  out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
                  desk: Optional[bool] = DeskOption,
                  quiet: bool = QuietOption):
    """
    Accuracy and AC operations for K = N..1 randomly active students.
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "sweep_dropout"), quiet).sweep_dropout(ensemble))


@app.command("sweep-noise")
def sweep_noise(models: List[Path] = typer.Option(..., "--model", "-m",
                                                  help="Teacher or ensemble checkpoint (can be repeated)"),
                config: Path = ConfigOption,
                seed: Optional[int] = SeedOption,
                out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
                desk: Optional[bool] = DeskOption,
                quiet: bool = QuietOption):
    """
    Accuracy under Gaussian input noise for every sigma in the config grid.

       sweep-noise -m runs/teacher/teacher.npz -m runs/ensemble/ensemble.npz
    """
    _run(lambda: _runner(config, seed, desk, _out(out, "sweep_noise"), quiet).sweep_noise(models))


@app.command()
def report(run_dir: Path = typer.Argument(..., help="Directory searched recursively for report.json files"),
           out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory, default RUN_DIR"),
           quiet: bool = QuietOption):
    """
    Collect run reports into summary.csv and summary.md.
    """
    def action():
        set_quiet(quiet)
        output_dir = out if out is not None else run_dir
        generator = ReportGenerator()
        reports, corrupt = generator.collect(run_dir)
        generator.write_csv(generator.summary_frame(reports), output_dir / "summary.csv")
        generator.generate_markdown_report(reports, corrupt, output_dir / "summary.md")
        info(f"{len(reports)} reports summarized, {len(corrupt)} skipped")
        if corrupt:
            for item in corrupt:
                error(f"  corrupt: {item['path']}")
        else:
            success("All reports parsed")

    _run(action)
