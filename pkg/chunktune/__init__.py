"""Logging helpers shared by the whole package.

Everything is written to stderr.  ``VERBOSITY`` is raised by each ``-v``
on the command line; every helper below logs only from its own level up.
"""

import os.path
import sys
import threading
import time
import traceback as tb
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, NoReturn, TypeVar

import click
import tqdm

VERBOSITY = 0

PROGRESS_BAR_ENV = "CHUNKTUNE_DISABLE_PROGRESS_BAR"

T = TypeVar("T")

_lock = threading.Lock()


def _prettify(arg):
    if isinstance(arg, Path) and arg.is_absolute():
        return os.path.relpath(arg)
    if isinstance(arg, BaseException):
        lines = tb.format_exception(type(arg), arg, arg.__traceback__)
        return "".join(lines).rstrip()
    return arg


def _line_prefix() -> str:
    thread = threading.current_thread()
    if thread is threading.main_thread():
        return ""
    return f"[{thread.name}] "


def log(msg: str, *args):
    """Format ``msg`` with ``args`` and print it to stderr.

    Lines logged from a pool worker are prefixed with the worker name.
    """
    try:
        text = msg.format(*[_prettify(arg) for arg in args])
    except (IndexError, KeyError, ValueError) as e:
        text = f"{msg} {args!r} (bad log format: {e})"

    prefix = _line_prefix()
    if prefix:
        text = "\n".join(prefix + line for line in text.splitlines())

    with _lock:
        click.echo(text, file=sys.stderr)


def enabled(level: int) -> bool:
    """Return True if messages of ``level`` are logged."""
    return VERBOSITY >= level


def info(msg: str, *args):
    """Log ``msg`` at ``-v``."""
    if enabled(1):
        log(msg, *args)


def debug(msg: str, *args):
    """Log ``msg`` at ``-vv``."""
    if enabled(2):
        log(msg, *args)


def trace(msg: str, *args):
    """Log ``msg`` at ``-vvv``."""
    if enabled(3):
        log(msg, *args)


def detail_log(msg: str, *args):
    """Log ``msg`` at ``-vvvv``; used inside the innermost loops."""
    if enabled(4):
        log(msg, *args)


def error(msg: str, *args, code: int = 1) -> NoReturn:
    """Log ``msg`` and then quit the program with exit ``code``."""
    log("error: " + msg, *args)
    sys.exit(code)


@contextmanager
def log_elapsed(msg: str, *args, level: int = 1) -> Iterator[None]:
    """Log ``msg`` with the seconds spent in the ``with`` body appended.

    Nothing is logged if the body raises.
    """
    start = time.perf_counter()
    yield
    if enabled(level):
        seconds = time.perf_counter() - start
        log(msg + " ({:.3f} s)", *args, seconds)


def make_progress_bar(iterable: Iterable[T], desc: str, **kwargs) -> tqdm.tqdm:
    """Wrap ``iterable`` of time steps in a ``tqdm`` bar on stderr.

    The bar is hidden when ``CHUNKTUNE_DISABLE_PROGRESS_BAR`` is set.
    """
    kwargs.setdefault("unit", "steps")
    kwargs.setdefault("leave", False)
    return tqdm.tqdm(
        iterable,
        desc=desc,
        file=sys.stderr,
        disable=os.getenv(PROGRESS_BAR_ENV) is not None,
        **kwargs,
    )
