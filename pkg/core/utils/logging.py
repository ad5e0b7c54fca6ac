import typer

info_color = typer.colors.BLUE
success_color = typer.colors.GREEN
warn_color = typer.colors.YELLOW
error_color = typer.colors.RED

_quiet = False


def set_quiet(quiet: bool):
    global _quiet
    _quiet = quiet


def is_quiet() -> bool:
    return _quiet


def info(message):
    if not _quiet:
        typer.secho(message, fg=info_color)

def neutral(message):
    if not _quiet:
        typer.secho(message)

def success(message):
    if not _quiet:
        typer.secho(message, fg=success_color)

def warning(message):
    if not _quiet:
        typer.secho(message, fg=warn_color)

def error(message):
    # errors are never silenced
    typer.secho(message, fg=error_color, err=True)


def section(title: str):
    info("\n" + "=" * 60)
    info(title)
    info("=" * 60)


def metric(name: str, value, width: int = 24):
    if isinstance(value, float):
        value = f"{value:.4f}"
    neutral(f"  {name:<{width}} {value}")
