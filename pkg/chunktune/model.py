from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from chunktune import debug, log, trace

Index3 = tuple[int, int, int]


@dataclass(frozen=True)
class Grid3:
    """A regular 3D grid with an absorbing band on all six faces.

    ``n1``, ``n2`` and ``n3`` count the interior points, ``x3`` is the
    vertical dimension and varies fastest in memory.  The padded volume
    has ``n_i + 2 * wb`` points along each dimension.
    """

    n1: int
    n2: int
    n3: int
    dx1: float
    dx2: float
    dx3: float
    wb: int = 0

    class Error(ValueError):
        """Invalid grid definition."""

    def __post_init__(self):
        for name in ("n1", "n2", "n3"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                msg = f"{name} must be a positive integer, got {value}"
                raise Grid3.Error(msg)
        for name in ("dx1", "dx2", "dx3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                msg = f"{name} must be strictly positive, got {value}"
                raise Grid3.Error(msg)
        if int(self.wb) != self.wb or self.wb < 0:
            msg = f"wb must be a non-negative integer, got {self.wb}"
            raise Grid3.Error(msg)

    @property
    def interior_shape(self) -> Index3:
        """Number of interior points per dimension."""
        return (self.n1, self.n2, self.n3)

    @property
    def shape(self) -> Index3:
        """Number of points per dimension, absorbing band included."""
        pad = 2 * self.wb
        return (self.n1 + pad, self.n2 + pad, self.n3 + pad)

    @property
    def n_loop(self) -> int:
        """Total number of points of the padded volume."""
        s1, s2, s3 = self.shape
        return s1 * s2 * s3

    @property
    def n_interior(self) -> int:
        """Total number of interior points."""
        return self.n1 * self.n2 * self.n3

    @property
    def spacings(self) -> tuple[float, float, float]:
        """Grid spacings in meters."""
        return (self.dx1, self.dx2, self.dx3)

    def contains(self, position: Sequence[int]) -> bool:
        """Return true if ``position`` is an interior grid index."""
        return len(position) == 3 and all(
            0 <= p < n for p, n in zip(position, self.interior_shape)
        )

    def padded_index(self, position: Sequence[int]) -> Index3:
        """Convert interior coordinates to padded-volume coordinates."""
        i1, i2, i3 = position
        return (i1 + self.wb, i2 + self.wb, i3 + self.wb)

    def flat_index(self, i1: int, i2: int, i3: int) -> int:
        """Flatten padded-volume coordinates, ``x3`` fastest."""
        _, s2, s3 = self.shape
        return (i1 * s2 + i2) * s3 + i3

    def unflatten(self, index: int) -> Index3:
        """Inverse of ``flat_index``."""
        _, s2, s3 = self.shape
        rest, i3 = divmod(index, s3)
        i1, i2 = divmod(rest, s2)
        return (i1, i2, i3)


@dataclass(frozen=True)
class VelocityModel:
    """Propagation velocities on every point of a ``Grid3``.

    ``c`` is a read-only float64 array of length ``grid.n_loop`` laid out
    ``x3`` fastest.
    """

    grid: Grid3
    c: np.ndarray = field(repr=False)
    cmin: float = field(init=False)
    cmax: float = field(init=False)

    class Error(ValueError):
        """Invalid velocity values."""

    class LoadError(Error):
        """A velocity model file could not be read."""

    def __post_init__(self):
        c = np.ascontiguousarray(self.c, dtype=np.float64).reshape(-1)
        if c.size != self.grid.n_loop:
            msg = (
                f"Velocity array has {c.size} values, "
                f"grid needs {self.grid.n_loop}"
            )
            raise VelocityModel.Error(msg)
        if not np.all(np.isfinite(c)):
            raise VelocityModel.Error("non-finite velocity")
        if not np.all(c > 0):
            raise VelocityModel.Error("non-positive velocity")

        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "cmin", float(c.min()))
        object.__setattr__(self, "cmax", float(c.max()))

    @staticmethod
    def from_interior(grid: Grid3, interior: np.ndarray) -> "VelocityModel":
        """Build a model from interior values, replicating into the band.

        Each point of the absorbing band takes the value of the nearest
        interior point.
        """
        values = np.asarray(interior, dtype=np.float64)
        if values.size != grid.n_interior:
            msg = (
                f"Interior array has {values.size} values, "
                f"grid needs {grid.n_interior}"
            )
            raise VelocityModel.Error(msg)
        values = values.reshape(grid.interior_shape)
        padded = np.pad(values, grid.wb, mode="edge")
        return VelocityModel(grid, padded.reshape(-1))

    def as_volume(self) -> np.ndarray:
        """Return a read-only 3D view of ``c`` over the padded volume."""
        return self.c.reshape(self.grid.shape)

    def at(self, position: Sequence[int]) -> float:
        """Velocity at the given interior grid index."""
        padded = self.grid.padded_index(position)
        return float(self.c[self.grid.flat_index(*padded)])


def default_delay(f_peak: float) -> float:
    """Wavelet delay at which the Ricker envelope is below ~1e-6."""
    return 6.0 / (math.pi * f_peak * math.sqrt(2.0))


@dataclass(frozen=True)
class RickerSource:
    """A Ricker wavelet source at an interior grid point.

    ``t0`` defaults to ``default_delay(f_peak)``.  ``amplitude`` scales
    the wavelet; it is 1 for every physical run.
    """

    f_peak: float
    position: Index3
    t0: Optional[float] = None
    amplitude: float = 1.0

    class Error(ValueError):
        """Invalid source definition."""

    def __post_init__(self):
        if not self.f_peak > 0:
            msg = f"f_peak must be positive, got {self.f_peak}"
            raise RickerSource.Error(msg)
        if self.t0 is None:
            object.__setattr__(self, "t0", default_delay(self.f_peak))
        elif self.t0 < 0:
            msg = f"t0 must be non-negative, got {self.t0}"
            raise RickerSource.Error(msg)
        object.__setattr__(self, "position", tuple(self.position))

    @property
    def delay(self) -> float:
        """The wavelet delay in seconds."""
        assert self.t0 is not None
        return self.t0


def ricker(t, src: RickerSource):
    """Evaluate the Ricker wavelet of ``src`` at time(s) ``t``."""
    tau = np.asarray(t, dtype=np.float64) - src.delay
    arg = (math.pi * src.f_peak * tau) ** 2
    value = src.amplitude * (1.0 - 2.0 * arg) * np.exp(-arg)
    if np.ndim(value) == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Source, receivers and time sampling of one shot."""

    source: RickerSource
    receivers: tuple[Index3, ...]
    ns: int
    dt: float

    class Error(ValueError):
        """Invalid acquisition geometry."""

    def __post_init__(self):
        object.__setattr__(
            self, "receivers", tuple(tuple(r) for r in self.receivers)
        )
        if int(self.ns) != self.ns or self.ns < 1:
            msg = f"ns must be a positive integer, got {self.ns}"
            raise AcquisitionGeometry.Error(msg)
        if not (math.isfinite(self.dt) and self.dt > 0):
            msg = f"dt must be positive, got {self.dt}"
            raise AcquisitionGeometry.Error(msg)

    @property
    def duration(self) -> float:
        """Recording length ``ns * dt`` in seconds."""
        return self.ns * self.dt

    def check_within(self, grid: Grid3, need_receivers: bool = False):
        """Raise ``Error`` unless every position is inside ``grid``."""
        if not grid.contains(self.source.position):
            msg = f"Source {self.source.position} is outside the grid"
            raise AcquisitionGeometry.Error(msg)
        for receiver in self.receivers:
            if not grid.contains(receiver):
                msg = f"Receiver {receiver} is outside the grid"
                raise AcquisitionGeometry.Error(msg)
        if need_receivers and not self.receivers:
            raise AcquisitionGeometry.Error("receiver list empty")


@dataclass(frozen=True)
class Seismogram:
    """Recorded pressure, one row per receiver and one column per step."""

    traces: np.ndarray = field(repr=False)
    geometry: AcquisitionGeometry

    class Error(ValueError):
        """Traces inconsistent with the geometry."""

    def __post_init__(self):
        traces = np.asarray(self.traces, dtype=np.float64)
        expected = (len(self.geometry.receivers), self.geometry.ns)
        if traces.shape != expected:
            msg = f"Traces have shape {traces.shape}, expected {expected}"
            raise Seismogram.Error(msg)
        if not np.all(np.isfinite(traces)):
            raise Seismogram.Error("Traces contain non-finite values")
        object.__setattr__(self, "traces", traces)

    @staticmethod
    def zeros(geometry: AcquisitionGeometry) -> "Seismogram":
        """Return an all-zero seismogram for ``geometry``."""
        return Seismogram(
            np.zeros((len(geometry.receivers), geometry.ns)), geometry
        )


@dataclass(frozen=True)
class StabilityReport:
    """Result of checking the dispersion and stability limits."""

    dx_bound: float
    dt_bound: float
    dx_ok: bool
    dt_ok: bool
    W: float
    f_max: float

    class Error(ValueError):
        """The grid or time step violates a limit."""

    @property
    def ok(self) -> bool:
        """True if both limits hold."""
        return self.dx_ok and self.dt_ok

    def require(self, force: bool = False):
        """Raise ``Error`` on a violation unless ``force`` is set."""
        if self.ok:
            return
        if force:
            log("warning: ignoring stability limits: {}", self.describe())
            return
        msg = f"stability check failed: {self.describe()}"
        raise StabilityReport.Error(msg)

    def describe(self) -> str:
        """Human readable summary."""
        return (
            f"dx bound {self.dx_bound:.4g} m "
            f"({'ok' if self.dx_ok else 'VIOLATED'}), "
            f"dt bound {self.dt_bound:.4g} s "
            f"({'ok' if self.dt_ok else 'VIOLATED'}), "
            f"W={self.W:g}, f_max={self.f_max:g} Hz"
        )


def check_stability(
    model: VelocityModel,
    geom: AcquisitionGeometry,
    f_max: Optional[float] = None,
    W: float = 4,
) -> StabilityReport:
    """Check grid spacing and time step against dispersion/stability limits.

    Args:
        model: The velocity model.
        geom: Geometry carrying ``dt`` and the source peak frequency.
        f_max: Maximum frequency of the source.  Defaults to
            ``2.5 * f_peak``.
        W: Grid points per minimum wavelength, at least 4.

    """
    if f_max is None:
        f_max = 2.5 * geom.source.f_peak
    if not f_max > 0:
        msg = f"f_max must be positive, got {f_max}"
        raise ValueError(msg)
    if W < 4:
        msg = f"W must be at least 4, got {W}"
        raise ValueError(msg)

    spacings = model.grid.spacings
    dx_bound = model.cmin / (W * f_max)
    dt_bound = 2.0 * min(spacings) / (math.pi * model.cmax * math.sqrt(3.0))

    report = StabilityReport(
        dx_bound=dx_bound,
        dt_bound=dt_bound,
        dx_ok=max(spacings) <= dx_bound,
        dt_ok=geom.dt <= dt_bound,
        W=W,
        f_max=f_max,
    )
    debug("Stability: {}", report.describe())
    return report


def build_two_layer_model(
    grid: Grid3, v_top: float, v_bottom: float
) -> VelocityModel:
    """Two layers with a flat interface at the vertical center.

    Interior points with ``x3`` index below ``n3 / 2`` get ``v_top``.
    """
    if not (v_top > 0 and v_bottom > 0):
        msg = f"Velocities must be positive, got {v_top}, {v_bottom}"
        raise VelocityModel.Error(msg)

    top = np.arange(grid.n3) < grid.n3 / 2
    column = np.where(top, v_top, v_bottom)
    interior = np.broadcast_to(column, grid.interior_shape)
    return VelocityModel.from_interior(grid, interior)


def build_homogeneous_model(grid: Grid3, velocity: float) -> VelocityModel:
    """Constant-velocity model."""
    return build_two_layer_model(grid, velocity, velocity)


def interface_depth_index(grid: Grid3) -> int:
    """First interior ``x3`` index below the two-layer interface."""
    return math.ceil(grid.n3 / 2)


def load_velocity_model(path: str | Path, grid: Grid3) -> VelocityModel:
    """Read interior velocities from a headerless float32 file.

    The file holds ``n1 * n2 * n3`` little-endian float32 values, ``x3``
    fastest.  The absorbing band is filled by replication.
    """
    path = Path(path)
    expected = grid.n_interior * 4
    size = path.stat().st_size
    trace("Velocity file {}: {} bytes", path, size)

    if size != expected:
        msg = f"size mismatch: {path} has {size} bytes, expected {expected}"
        raise VelocityModel.LoadError(msg)

    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise VelocityModel.LoadError(f"non-finite velocity in {path}")
    if not np.all(values > 0):
        raise VelocityModel.LoadError(f"non-positive velocity in {path}")

    return VelocityModel.from_interior(grid, values)
