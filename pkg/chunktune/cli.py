from __future__ import annotations

import sys
from functools import wraps
from typing import Optional

import click

import chunktune
from chunktune import debug, error, info, log
from chunktune.config import SCHEDULERS, RunConfigParamType, load_run_config
from chunktune.experiments import (
    run_bench,
    run_csa_sweep,
    run_migrate,
    run_model,
    run_tune,
    run_validate,
)
from chunktune.parsched import create_pool

EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def exit_code_for(exc: BaseException) -> int:
    """Exit code of ``exc``, following its chain of causes."""
    current: Optional[BaseException] = exc
    while current is not None:
        if isinstance(current, ArithmeticError):
            return EXIT_NUMERICAL
        if isinstance(current, OSError):
            return EXIT_IO
        if isinstance(current, ValueError):
            return EXIT_USAGE
        current = current.__cause__
    return EXIT_USAGE


class ChunktuneGroup(click.Group):
    """Command group mapping failures to the documented exit codes."""

    def main(self, *args, standalone_mode: bool = True, **kwargs):
        """Run the command; usage errors exit with 1 instead of 2."""
        try:
            rv = super().main(*args, standalone_mode=False, **kwargs)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            log("Aborted!")
            sys.exit(EXIT_USAGE)
        except Exception as e:
            debug("{}", e)
            error("{}", str(e), code=exit_code_for(e))

        if not standalone_mode:
            return rv
        sys.exit(rv if isinstance(rv, int) else 0)


def _common_options(f):

    @click.option(
        "-c",
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False),
        help="Read settings from a 'key = value' file.",
    )
    @click.option(
        "-o",
        "--opt",
        multiple=True,
        type=RunConfigParamType(),
        help="Set a configuration key (key=value).",
    )
    @click.option(
        "--threads",
        type=click.IntRange(min=1),
        help="Number of worker threads.",
    )
    @click.option(
        "--csa-iters",
        type=click.IntRange(min=1),
        help="Tuner iterations N.",
    )
    @click.option(
        "--csa-m",
        type=click.IntRange(min=2),
        help="Number of coupled optimizers m.",
    )
    @click.option("--seed", type=click.IntRange(min=0), help="Tuner seed.")
    @click.option(
        "--scheduler",
        type=click.Choice(SCHEDULERS),
        help="Scheduling policy of the propagation loops.",
    )
    @click.option(
        "--chunk",
        type=click.IntRange(min=1),
        help="Chunk size of the dynamic scheduler.",
    )
    @click.option(
        "--force",
        is_flag=True,
        default=None,
        help="Run even if the stability limits are violated.",
    )
    @click.option(
        "--out",
        type=click.Path(file_okay=False),
        help="Output directory.",
    )
    @click.option(
        "-v",
        "--verbose",
        count=True,
        help=(
            "Be verbose.  Can be provided multiple times "
            " for increased verbosity."
        ),
    )
    @wraps(f)
    def inner(
        *args,
        config_file: Optional[str],
        opt: tuple[tuple[str, object], ...],
        threads: Optional[int],
        csa_iters: Optional[int],
        csa_m: Optional[int],
        seed: Optional[int],
        scheduler: Optional[str],
        chunk: Optional[int],
        force: Optional[bool],
        out: Optional[str],
        verbose: int,
        **kwargs,
    ):
        chunktune.VERBOSITY = verbose

        cfg = load_run_config(
            config_file,
            opt,
            {
                "threads": threads,
                "csa_iters": csa_iters,
                "csa_m": csa_m,
                "seed": seed,
                "scheduler": scheduler,
                "chunk": chunk,
                "force": force or None,
                "out": out,
            },
        )
        n_threads = cfg.thread_count()
        debug("Configuration:\n{}", cfg.dumps())

        with create_pool(n_threads) as pool:
            info("Using {} thread(s)", pool.n_threads)
            f(*args, cfg, pool, **kwargs)

    return inner


@click.group(cls=ChunktuneGroup)
def cli():
    """Chunk-size auto-tuning for parallel reverse time migration."""
    pass


@cli.command()
@_common_options
def model(cfg, pool):
    """Model the configured shots and write their seismograms."""
    for path in run_model(cfg, pool):
        click.echo(str(path))


@cli.command()
@_common_options
def migrate(cfg, pool):
    """Migrate the modeled shots and write the stacked image."""
    result = run_migrate(cfg, pool)
    click.echo(f"image: {cfg.out_dir / 'image.bin'}")
    click.echo(f"sha256: {result.image.checksum()}")
    click.echo(f"total_seconds: {result.total_seconds:.6g}")
    if result.tune is not None:
        click.echo(f"chunk: {result.tune.chunk}")
        click.echo(f"tuner_seconds: {result.tuner_seconds:.6g}")


@cli.command()
@_common_options
def tune(cfg, pool):
    """Tune the chunk size on the first shot."""
    result = run_tune(cfg, pool)
    click.echo(f"chunk: {result.chunk}")
    click.echo(f"cost: {result.cost:.6g}")
    click.echo(f"evaluations: {result.evaluations}")


@cli.command()
@_common_options
@click.option(
    "--csa-sweep",
    is_flag=True,
    help="Sweep the tuner iterations and initial temperature instead.",
)
def bench(cfg, pool, csa_sweep):
    """Compare the schedulers, or tuner settings, on the migration."""
    if csa_sweep:
        for record in run_csa_sweep(cfg, pool):
            click.echo(
                f"n_iter={record.n_iter} t_gen0={record.t_gen0:g} "
                f"chunk={record.chunk} "
                f"median={record.median_seconds:.6g}s"
            )
        return

    for record in run_bench(cfg, pool):
        click.echo(
            f"{record.scheduler}: chunk={record.chunk} "
            f"median={record.median_seconds:.6g}s "
            f"tuner={record.tuner_overhead_seconds:.6g}s "
            f"sha256={record.image_sha256}"
        )


@cli.command()
@_common_options
def validate(cfg, pool):
    """Compare a modeled trace with the analytical solution."""
    report = run_validate(cfg, pool)
    click.echo(report.describe())
