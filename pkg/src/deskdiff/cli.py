"""Command line front end.

Every subcommand reads a JSON config, runs one pipeline command, prints a
short report, and exits 0 when the run's invariants held, 2 when a checked
invariant failed, and 1 on a usage or environment error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import pipeline
from .config import load_config
from .errors import DeskdiffError


def _run(command, config_path: str, out: str, **kwargs) -> None:
    try:
        cfg = load_config(config_path)
        result = command(cfg, Path(out), **kwargs)
    except DeskdiffError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for key, value in result.summary.items():
        click.echo(f"{key}: {pipeline.format_cell(value)}")
    for path in result.files:
        click.echo(f"wrote {path}")
    if not result.ok:
        for failure in result.failures:
            click.echo(f"check failed: {failure}", err=True)
        sys.exit(2)


def _common(fn):
    fn = click.option("--out", default="./run", show_default=True,
                      help="Directory for reports, figures, and field files.")(fn)
    fn = click.option("--config", required=True, type=click.Path(dir_okay=False),
                      help="Path to a JSON run configuration.")(fn)
    return fn


@click.group()
def main() -> None:
    """Desk-scale diffusion editing engine."""


@main.command()
@_common
def invert(config: str, out: str) -> None:
    """Invert the input field and verify exact replay."""
    _run(pipeline.cmd_invert, config, out)


@main.command()
@_common
@click.option("--dump-masks", is_flag=True, default=False,
              help="Also write every per-step mask as a PGM file.")
def edit(config: str, out: str, dump_masks: bool) -> None:
    """Apply the configured edits on top of an exact inversion."""
    _run(pipeline.cmd_edit, config, out, dump_masks=dump_masks)


@main.command()
@_common
def variations(config: str, out: str) -> None:
    """Produce edit variations by re-inverting under fresh seeds."""
    _run(pipeline.cmd_variations, config, out)


@main.command("sweep-scale")
@_common
def sweep_scale(config: str, out: str) -> None:
    """Sweep the guidance scale of one edit and check monotonicity."""
    _run(pipeline.cmd_sweep_scale, config, out)


@main.command()
@_common
def convergence(config: str, out: str) -> None:
    """Measure solver error against the continuum limit over grid sizes."""
    _run(pipeline.cmd_convergence, config, out)


@main.command("eval-masks")
@_common
def eval_masks(config: str, out: str) -> None:
    """Score implicit masks against dataset ground truth."""
    _run(pipeline.cmd_eval_masks, config, out)


@main.command("bench-evals")
@_common
def bench_evals(config: str, out: str) -> None:
    """Count model evaluations against the promised budget."""
    _run(pipeline.cmd_bench_evals, config, out)


if __name__ == "__main__":
    main()
