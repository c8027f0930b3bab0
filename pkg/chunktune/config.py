"""Run configuration: flat ``key = value`` settings for every command.

Values come from the defaults, then a config file, then ``-o key=value``
options, then dedicated command-line flags; later sources win.  Every
key is converted and validated before any computation starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import click
from click.types import BoolParamType, FloatRange, IntRange

from chunktune import debug, trace
from chunktune.autotune import TuneConfig
from chunktune.csa import AcceptanceRule, CsaParams
from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    RickerSource,
    VelocityModel,
    build_homogeneous_model,
    build_two_layer_model,
    load_velocity_model,
)
from chunktune.parsched import SchedulePolicy, default_thread_count
from chunktune.rtm import RtmConfig

SCHEDULERS = ("static", "dynamic", "guided", "auto", "tuned")

# Buffers and checkpoints per memory budget, named by grid size
CHECKPOINT_PRESETS = {
    "n1_201": (170, 3330),
    "n1_401": (100, 3400),
    "n1_801": (56, 1848),
}

DEFAULT_BENCH_SCHEDULERS = "static,auto,guided,tuned"


@dataclass(frozen=True)
class RunConfig:
    """All settings of a run.

    Units: spacings and offsets in meters, velocities in m/s, ``f_peak``
    in Hz, ``dt`` in seconds.  Positions are interior grid indices.
    """

    # grid
    n1: int = 101
    n2: int = 101
    n3: int = 101
    dx1: float = 5.0
    dx2: float = 5.0
    dx3: float = 5.0
    wb: int = 20

    # velocity: a float32 file, or two layers split at mid depth
    velocity_file: Optional[str] = None
    v_top: float = 1400.0
    v_bottom: float = 2000.0

    # time sampling and source
    f_peak: float = 20.0
    dt: float = 0.0004
    ns: int = 1000

    # acquisition: sources spread along x1 at mid x2
    shots: int = 1
    source_depth: int = 5
    receiver_depth: int = 5
    receiver_step: int = 4

    # scheduling
    scheduler: str = "auto"
    chunk: Optional[int] = None
    threads: Optional[int] = None

    # tuner
    csa_t_gen0: float = 100.0
    csa_t_ac0: float = 0.9
    csa_iters: int = 40
    csa_m: int = 4
    csa_alpha: float = 0.005
    csa_sigma_d2: Optional[float] = None
    csa_gen_decay: float = 0.99999
    csa_acceptance: str = "conventional"
    tune_lo: int = 50
    seed: int = 0

    # checkpoints
    n_b: int = 50
    n_c: Optional[int] = None
    checkpoint_preset: Optional[str] = None

    # bench
    reps: int = 5
    bench_schedulers: str = DEFAULT_BENCH_SCHEDULERS
    sweep_iters: str = "40,80,160"
    sweep_t_gen0: str = "1,10,100,1000"

    # validate
    validate_velocity: float = 2000.0
    validate_offset: float = 200.0
    validate_tolerance: float = 1e-3

    # output
    out: str = "out"
    force: bool = False

    class Error(ValueError):
        """Invalid configuration."""

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            msg = (
                f"Unknown scheduler '{self.scheduler}', "
                f"expected one of {', '.join(SCHEDULERS)}"
            )
            raise RunConfig.Error(msg)
        if self.scheduler == "dynamic" and self.chunk is None:
            raise RunConfig.Error("dynamic requires chunk")

        # Paths must survive dumps and loads, where # starts a comment
        for name in ("velocity_file", "out"):
            path = getattr(self, name)
            if path is not None and ("#" in path or "\n" in path):
                msg = f"{name} must not contain '#' or a newline: {path!r}"
                raise RunConfig.Error(msg)

        if self.checkpoint_preset is not None:
            if self.checkpoint_preset not in CHECKPOINT_PRESETS:
                msg = (
                    f"Unknown checkpoint_preset '{self.checkpoint_preset}', "
                    f"expected one of {', '.join(CHECKPOINT_PRESETS)}"
                )
                raise RunConfig.Error(msg)
            n_b, n_c = CHECKPOINT_PRESETS[self.checkpoint_preset]
            object.__setattr__(self, "n_b", n_b)
            object.__setattr__(self, "n_c", n_c)

        for label in self.bench_list():
            if label not in SCHEDULERS:
                msg = f"bench_schedulers: unknown scheduler '{label}'"
                raise RunConfig.Error(msg)
        if "dynamic" in self.bench_list() and self.chunk is None:
            raise RunConfig.Error("dynamic requires chunk")

        # Build the parts now so their own invariants fail early
        try:
            grid = self.grid()
            self.csa_params()
            self.base_policy()
            for geom in self.shot_geometries():
                geom.check_within(grid)
            self.sweep_lists()
        except ValueError as e:
            raise RunConfig.Error(str(e)) from e

    def grid(self) -> Grid3:
        """The simulation grid."""
        return Grid3(
            self.n1, self.n2, self.n3, self.dx1, self.dx2, self.dx3, self.wb
        )

    def velocity_model(self, grid: Optional[Grid3] = None) -> VelocityModel:
        """Load or build the velocity model."""
        if grid is None:
            grid = self.grid()
        if self.velocity_file is not None:
            debug("Loading velocities from {}", Path(self.velocity_file))
            return load_velocity_model(self.velocity_file, grid)
        return build_two_layer_model(grid, self.v_top, self.v_bottom)

    def homogeneous_model(self, velocity: float) -> VelocityModel:
        """Constant-velocity model on the configured grid."""
        return build_homogeneous_model(self.grid(), velocity)

    def source_positions(self) -> list[tuple[int, int, int]]:
        """Source of every shot, evenly spaced along ``x1``."""
        positions = []
        for k in range(self.shots):
            i1 = (k + 1) * self.n1 // (self.shots + 1)
            positions.append((i1, self.n2 // 2, self.source_depth))
        return positions

    def receivers(self) -> tuple[tuple[int, int, int], ...]:
        """Horizontal receiver grid at ``receiver_depth``."""
        step = self.receiver_step
        return tuple(
            (i1, i2, self.receiver_depth)
            for i1 in range(0, self.n1, step)
            for i2 in range(0, self.n2, step)
        )

    def shot_geometries(self) -> list[AcquisitionGeometry]:
        """Geometry of every shot."""
        receivers = self.receivers()
        return [
            AcquisitionGeometry(
                RickerSource(self.f_peak, position),
                receivers,
                self.ns,
                self.dt,
            )
            for position in self.source_positions()
        ]

    def base_policy(self, scheduler: Optional[str] = None) -> SchedulePolicy:
        """Propagation policy of ``scheduler``, default the configured one.

        ``chunk`` only applies to ``dynamic``; ``guided`` uses a minimum of
        1.  ``tuned`` maps to ``auto`` until the tuner has chosen a chunk.
        """
        if scheduler is None:
            scheduler = self.scheduler
        if scheduler == "static":
            return SchedulePolicy.static()
        if scheduler == "dynamic":
            if self.chunk is None:
                raise RunConfig.Error("dynamic requires chunk")
            return SchedulePolicy.dynamic(self.chunk)
        if scheduler == "guided":
            return SchedulePolicy.guided(1)
        return SchedulePolicy.auto()

    def csa_params(self, **overrides) -> CsaParams:
        """Optimizer parameters."""
        params = CsaParams(
            t_gen0=self.csa_t_gen0,
            t_ac0=self.csa_t_ac0,
            n_iter=self.csa_iters,
            m=self.csa_m,
            alpha=self.csa_alpha,
            sigma_d2=self.csa_sigma_d2,
            gen_decay=self.csa_gen_decay,
            seed=self.seed,
            acceptance=AcceptanceRule(self.csa_acceptance),
        )
        if overrides:
            params = replace(params, sigma_d2=self.csa_sigma_d2, **overrides)
        return params

    def tune_config(self, **csa_overrides) -> TuneConfig:
        """Tuner settings."""
        csa = self.csa_params(**csa_overrides)
        return TuneConfig(csa=csa, lo=self.tune_lo)

    def rtm_config(
        self, scheduler: Optional[str] = None, **csa_overrides
    ) -> RtmConfig:
        """Migration settings for ``scheduler``."""
        if scheduler is None:
            scheduler = self.scheduler
        tune = None
        if scheduler == "tuned":
            tune = self.tune_config(**csa_overrides)
        return RtmConfig(
            policy=self.base_policy(scheduler),
            n_b=self.n_b,
            tune=tune,
            n_c=self.n_c,
        )

    def thread_count(self) -> int:
        """Configured threads, else ``CHUNKTUNE_THREADS`` or CPU count."""
        if self.threads is not None:
            return self.threads
        return default_thread_count()

    def bench_list(self) -> list[str]:
        """Schedulers compared by ``bench``."""
        return _split_list(self.bench_schedulers)

    def sweep_lists(self) -> tuple[list[int], list[float]]:
        """Iteration counts and initial generation temperatures to sweep."""
        try:
            iters = [int(x) for x in _split_list(self.sweep_iters)]
            temps = [float(x) for x in _split_list(self.sweep_t_gen0)]
        except ValueError as e:
            raise RunConfig.Error(f"Malformed sweep list: {e}") from e
        if not iters or any(n < 1 for n in iters):
            raise RunConfig.Error("sweep_iters must list positive integers")
        if not temps or any(not (t > 0 and math.isfinite(t)) for t in temps):
            raise RunConfig.Error("sweep_t_gen0 must list positive numbers")
        return iters, temps

    @property
    def out_dir(self) -> Path:
        """Output directory."""
        return Path(self.out)

    def dumps(self) -> str:
        """Serialize to the config file format."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def loads(text: str) -> "RunConfig":
        """Parse the config file format on top of the defaults."""
        return RunConfig.build(parse_config_text(text))

    @staticmethod
    def build(*sources: Mapping[str, Any]) -> "RunConfig":
        """Defaults updated by each mapping of converted values in turn."""
        merged: dict[str, Any] = {}
        for source in sources:
            merged.update(source)
        trace("Config values: {}", merged)
        return RunConfig(**merged)


def _split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class OptionalParamType(click.ParamType):
    """Wraps a type so that ``none`` converts to ``None``."""

    def __init__(self, inner: click.ParamType):
        """Wrap ``inner``."""
        self.inner = inner
        self.name = f"{inner.name}|none"

    def convert(self, value, param, ctx):
        """Convert ``value`` with the wrapped type unless it is ``none``."""
        if value is None or str(value).strip().lower() in ("none", ""):
            return None
        return self.inner.convert(value, param, ctx)


_POSITIVE_FLOAT = FloatRange(min=0, min_open=True)
_POSITIVE_INT = IntRange(min=1)
_INDEX = IntRange(min=0)


class RunConfigParamType(click.ParamType):
    """Click parameter type for ``--opt key=value``."""

    name = "option"

    OPTIONS = [f.name for f in fields(RunConfig)]

    CONVERTERS: dict[str, click.ParamType] = {
        "n1": _POSITIVE_INT,
        "n2": _POSITIVE_INT,
        "n3": _POSITIVE_INT,
        "dx1": _POSITIVE_FLOAT,
        "dx2": _POSITIVE_FLOAT,
        "dx3": _POSITIVE_FLOAT,
        "wb": _INDEX,
        "velocity_file": OptionalParamType(click.STRING),
        "v_top": _POSITIVE_FLOAT,
        "v_bottom": _POSITIVE_FLOAT,
        "f_peak": _POSITIVE_FLOAT,
        "dt": _POSITIVE_FLOAT,
        "ns": _POSITIVE_INT,
        "shots": _POSITIVE_INT,
        "source_depth": _INDEX,
        "receiver_depth": _INDEX,
        "receiver_step": _POSITIVE_INT,
        "scheduler": click.Choice(SCHEDULERS),
        "chunk": OptionalParamType(_POSITIVE_INT),
        "threads": OptionalParamType(_POSITIVE_INT),
        "csa_t_gen0": _POSITIVE_FLOAT,
        "csa_t_ac0": _POSITIVE_FLOAT,
        "csa_iters": _POSITIVE_INT,
        "csa_m": IntRange(min=2),
        "csa_alpha": FloatRange(min=0, max=0.1, min_open=True),
        "csa_sigma_d2": OptionalParamType(FloatRange(min=0)),
        "csa_gen_decay": FloatRange(min=0, max=1, min_open=True),
        "csa_acceptance": click.Choice([r.value for r in AcceptanceRule]),
        "tune_lo": _POSITIVE_INT,
        "seed": _INDEX,
        "n_b": _POSITIVE_INT,
        "n_c": OptionalParamType(_POSITIVE_INT),
        "checkpoint_preset": OptionalParamType(
            click.Choice(list(CHECKPOINT_PRESETS))
        ),
        "reps": _POSITIVE_INT,
        "bench_schedulers": click.STRING,
        "sweep_iters": click.STRING,
        "sweep_t_gen0": click.STRING,
        "validate_velocity": _POSITIVE_FLOAT,
        "validate_offset": FloatRange(min=0),
        "validate_tolerance": _POSITIVE_FLOAT,
        "out": click.STRING,
        "force": BoolParamType(),
    }

    def convert(self, value, param, ctx):
        """Convert the given value to correct type, or error out."""
        if isinstance(value, tuple):
            return value
        try:
            k, v = value.split("=", maxsplit=1)
        except ValueError:
            self.fail(f"Argument '{value}' should be of the form 'key=value'")

        k = k.strip()
        if k not in self.OPTIONS:
            self.fail(f"Unknown option '{k}'")

        try:
            return (k, self.CONVERTERS[k].convert(v.strip(), param, ctx))
        except click.BadParameter as e:
            raise click.BadParameter(f"{k}: {e.message}") from e

    def get_metavar(self, param: click.Parameter) -> str:
        """Get the metavar for this option."""
        return "KEY=VALUE"


def convert_option(key: str, value: str) -> Any:
    """Convert one ``key``/``value`` pair, raising ``RunConfig.Error``."""
    try:
        _, converted = RunConfigParamType().convert(
            f"{key}={value}", None, None
        )
    except click.BadParameter as e:
        raise RunConfig.Error(e.message) from e
    return converted


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", maxsplit=1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"{origin}:{lineno}: expected 'key = value', got '{line}'"
            raise RunConfig.Error(msg)
        key, value = line.split("=", maxsplit=1)
        try:
            values[key.strip()] = convert_option(key.strip(), value.strip())
        except RunConfig.Error as e:
            raise RunConfig.Error(f"{origin}:{lineno}: {e}") from e
    return values


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a config file."""
    path = Path(path)
    return parse_config_text(path.read_text(), origin=str(path))


def load_run_config(
    config_file: Optional[str | Path] = None,
    options: Iterable[tuple[str, Any]] = (),
    flags: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge all configuration sources, later ones winning.

    ``flags`` entries that are ``None`` are ignored.
    """
    sources: list[Mapping[str, Any]] = []
    if config_file is not None:
        sources.append(read_config_file(config_file))
    sources.append(dict(options))
    if flags:
        sources.append({k: v for k, v in flags.items() if v is not None})
    return RunConfig.build(*sources)
