from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from chunktune import debug, make_progress_bar, trace
from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    RickerSource,
    Seismogram,
    VelocityModel,
    ricker,
)
from chunktune.parsched import SchedulePolicy, WorkerPool

# Second-derivative weights for offsets 0..4, eighth order accurate.
STENCIL_WEIGHTS = (-205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560)

# Zero cells kept around the padded volume so the stencil never reads
# outside the arrays.
HALO = len(STENCIL_WEIGHTS) - 1

Box = tuple[slice, slice, slice]


def flat_range_boxes(
    start: int, stop: int, shape: tuple[int, int, int]
) -> Iterator[Box]:
    """Split the flattened range ``[start, stop)`` into rectangular boxes.

    ``shape`` is a C-ordered 3D shape.  The boxes are yielded in
    ascending order and together cover the range exactly.
    """
    _, s2, s3 = shape
    plane = s2 * s3
    pos = start

    while pos < stop:
        i1, rest = divmod(pos, plane)
        i2, i3 = divmod(rest, s3)

        if i3 != 0 or stop - pos < s3:
            end = min(stop, pos - i3 + s3)
            yield (
                slice(i1, i1 + 1),
                slice(i2, i2 + 1),
                slice(i3, i3 + end - pos),
            )
            pos = end
        elif i2 != 0 or stop - pos < plane:
            rows = min((stop - pos) // s3, s2 - i2)
            yield (slice(i1, i1 + 1), slice(i2, i2 + rows), slice(0, s3))
            pos += rows * s3
        else:
            planes = (stop - pos) // plane
            yield (slice(i1, i1 + planes), slice(0, s2), slice(0, s3))
            pos += planes * plane


def damping_profile(n: int, wb: int, f_peak: float, dt: float) -> np.ndarray:
    """Per-dimension damping for ``n`` interior points and band ``wb``.

    Inside the band the value is ``pi * f_peak * dt * (w / wb)**2`` where
    ``w`` is the depth into the band, 0 at the interior edge and ``wb``
    at the outer face.  Interior points get 0.
    """
    profile = np.zeros(n + 2 * wb)
    if wb == 0:
        return profile

    depth = np.arange(wb, 0, -1, dtype=np.float64)
    ramp = math.pi * f_peak * dt * (depth / wb) ** 2
    profile[:wb] = ramp
    profile[wb + n :] = ramp[::-1]
    return profile


@dataclass(frozen=True)
class BoundaryCoeffs:
    """Absorbing boundary coefficients over the padded volume.

    Both arrays have length ``grid.n_loop``, ``x3`` fastest, and are 1
    away from the absorbing band.
    """

    phi1: np.ndarray = field(repr=False)
    phi2: np.ndarray = field(repr=False)

    @staticmethod
    def ones(grid: Grid3) -> "BoundaryCoeffs":
        """Coefficients that disable absorption."""
        return BoundaryCoeffs(np.ones(grid.n_loop), np.ones(grid.n_loop))


def compute_boundary_coeffs(
    grid: Grid3, f_peak: float, dt: float
) -> BoundaryCoeffs:
    """Compute ``phi1 = 1 / (1 + phi)`` and ``phi2 = 1 - phi``.

    ``phi`` is the sum of the damping profiles of the three dimensions.
    """
    p1 = damping_profile(grid.n1, grid.wb, f_peak, dt)
    p2 = damping_profile(grid.n2, grid.wb, f_peak, dt)
    p3 = damping_profile(grid.n3, grid.wb, f_peak, dt)

    phi = p1[:, None, None] + p2[None, :, None] + p3[None, None, :]
    phi = phi.reshape(-1)

    trace("Boundary damping: max phi {}", float(phi.max(initial=0.0)))

    return BoundaryCoeffs(phi1=1.0 / (1.0 + phi), phi2=1.0 - phi)


class WavefieldPair:
    """Pressure at two consecutive time levels.

    Both levels are stored with a zero halo of ``HALO`` cells around the
    padded volume; ``previous`` and ``current`` return views of the
    padded volume itself.
    """

    def __init__(self, u_prev: np.ndarray, u_curr: np.ndarray):
        """Wrap two halo-padded arrays of identical shape.

        Both are made C-contiguous so the kernel can work on flat views.
        """
        if u_prev.shape != u_curr.shape:
            msg = f"Shape mismatch: {u_prev.shape} != {u_curr.shape}"
            raise ValueError(msg)
        self.u_prev = np.ascontiguousarray(u_prev, dtype=np.float64)
        self.u_curr = np.ascontiguousarray(u_curr, dtype=np.float64)

    @staticmethod
    def zeros(grid: Grid3) -> "WavefieldPair":
        """Two zero fields for ``grid``."""
        shape = tuple(s + 2 * HALO for s in grid.shape)
        return WavefieldPair(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "WavefieldPair":
        """Deep copy of both levels."""
        return WavefieldPair(self.u_prev.copy(), self.u_curr.copy())

    def assign(self, other: "WavefieldPair"):
        """Overwrite both levels with the contents of ``other``."""
        np.copyto(self.u_prev, other.u_prev)
        np.copyto(self.u_curr, other.u_curr)

    def swap(self):
        """Exchange the roles of the two levels."""
        self.u_prev, self.u_curr = self.u_curr, self.u_prev

    @staticmethod
    def _volume(u: np.ndarray) -> np.ndarray:
        return u[HALO:-HALO, HALO:-HALO, HALO:-HALO]

    def previous(self) -> np.ndarray:
        """View of the older level over the padded volume."""
        return self._volume(self.u_prev)

    def current(self) -> np.ndarray:
        """View of the newer level over the padded volume."""
        return self._volume(self.u_curr)

    def is_finite(self) -> bool:
        """True if neither level contains NaN or infinity."""
        return bool(
            np.isfinite(self.u_prev).all() and np.isfinite(self.u_curr).all()
        )

    def l2_norm(self) -> float:
        """L2 norm of the current level."""
        return float(np.linalg.norm(self.u_curr))


def _halo_index(grid: Grid3, positions) -> tuple[np.ndarray, ...]:
    """Index arrays into halo storage for interior ``positions``."""
    padded = np.array(
        [grid.padded_index(p) for p in positions], dtype=np.intp
    ).reshape(-1, 3)
    return tuple(padded[:, axis] + HALO for axis in range(3))


class StencilKernel:
    """The time-stepping kernel for one model and time step.

    ``u_next = phi1 * (2 u - phi2 u_prev + (c dt)^2 lap8(u))`` is written
    over ``u_prev`` and the two levels are then swapped.

    A claimed loop range is updated as one contiguous run of the
    flattened halo storage, neighbors being reached through fixed flat
    offsets.  The run includes the halo cells lying between its rows and
    planes; their coefficients are zero so they stay zero.
    """

    def __init__(
        self, model: VelocityModel, dt: float, coeffs: BoundaryCoeffs
    ):
        """Precompute ``(c dt)^2`` and the stencil weights."""
        self.grid = model.grid
        self.dt = dt
        self.coeffs = coeffs

        shape = self.grid.shape
        self.phi1 = coeffs.phi1.reshape(shape)
        self.phi2 = coeffs.phi2.reshape(shape)
        self.vel2 = ((model.c * dt) ** 2).reshape(shape)

        self.halo_shape = tuple(s + 2 * HALO for s in shape)
        _, h2, h3 = self.halo_shape
        self._strides = (h2 * h3, h3, 1)
        self._flat_phi1 = self._embed(self.phi1)
        self._flat_phi2 = self._embed(self.phi2)
        self._flat_vel2 = self._embed(self.vel2)

        inv = [1.0 / (dx * dx) for dx in self.grid.spacings]
        self._center_weight = STENCIL_WEIGHTS[0] * sum(inv)
        self._axis_weights = [
            [w * inv_dx for inv_dx in inv] for w in STENCIL_WEIGHTS[1:]
        ]

        self.steps_executed = 0

    def _embed(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.halo_shape)
        out[HALO:-HALO, HALO:-HALO, HALO:-HALO] = values
        return out.reshape(-1)

    def _halo_offset(self, index: int) -> int:
        _, s2, s3 = self.grid.shape
        i1, rest = divmod(index, s2 * s3)
        i2, i3 = divmod(rest, s3)
        return (
            (i1 + HALO) * self._strides[0]
            + (i2 + HALO) * self._strides[1]
            + i3
            + HALO
        )

    def flat_range(self, start: int, stop: int) -> tuple[int, int]:
        """Halo storage run ``[lo, hi)`` covering loop range ``[start, stop)``.

        ``stop`` must exceed ``start``.
        """
        return self._halo_offset(start), self._halo_offset(stop - 1) + 1

    def laplacian(self, u: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """Eighth-order Laplacian of the flat halo array ``u`` on a run."""
        lap = self._center_weight * u[lo:hi]
        for k, weights in enumerate(self._axis_weights, start=1):
            for axis, stride in enumerate(self._strides):
                o = k * stride
                pair = u[lo + o : hi + o] + u[lo - o : hi - o]
                lap += weights[axis] * pair
        return lap

    def update_range(self, fields: WavefieldPair, start: int, stop: int):
        """Write the next level over the older one for ``[start, stop)``."""
        lo, hi = self.flat_range(start, stop)
        u = fields.u_curr.reshape(-1)
        out = fields.u_prev.reshape(-1)[lo:hi]

        lap = self.laplacian(u, lo, hi)
        value = 2.0 * u[lo:hi]
        value -= self._flat_phi2[lo:hi] * out
        value += self._flat_vel2[lo:hi] * lap
        value *= self._flat_phi1[lo:hi]
        # -0.0 from the zero halo coefficients becomes +0.0
        value += 0.0
        out[...] = value

    def step(
        self,
        fields: WavefieldPair,
        pool: WorkerPool,
        policy: SchedulePolicy,
    ):
        """Advance ``fields`` by one time step."""

        def body(start: int, stop: int):
            self.update_range(fields, start, stop)

        pool.parallel_for(self.grid.n_loop, policy, body)
        fields.swap()
        self.steps_executed += 1


class Propagator:
    """Forward modeling of one shot: kernel, source and receivers."""

    class UnstableError(ArithmeticError):
        """The wavefield contains NaN or infinite values."""

    def __init__(
        self,
        model: VelocityModel,
        geom: AcquisitionGeometry,
        coeffs: Optional[BoundaryCoeffs] = None,
    ):
        """Prepare the propagator for ``model`` sampled with ``geom.dt``.

        Args:
            model: The velocity model.
            geom: Geometry of the shot; positions must lie inside the grid.
            coeffs: Absorbing coefficients, computed from the source peak
                frequency and ``dt`` when omitted.

        """
        geom.check_within(model.grid)

        if coeffs is None:
            coeffs = compute_boundary_coeffs(
                model.grid, geom.source.f_peak, geom.dt
            )

        self.model = model
        self.geom = geom
        self.grid = model.grid
        self.dt = geom.dt
        self.kernel = StencilKernel(model, geom.dt, coeffs)

        vel2 = self.kernel.vel2
        phi1 = self.kernel.phi1

        src = self.grid.padded_index(geom.source.position)
        self._src_halo = tuple(i + HALO for i in src)
        self._src_scale = float(phi1[src] * vel2[src])

        self._rec_halo = _halo_index(self.grid, geom.receivers)

        # Receivers sharing a grid point are injected as one point
        rec_flat = np.ravel_multi_index(
            tuple(a - HALO for a in self._rec_halo), self.grid.shape
        )
        points, inverse = np.unique(rec_flat, return_inverse=True)
        padded = np.unravel_index(points, self.grid.shape)
        self._rec_points = tuple(a + HALO for a in padded)
        self._rec_inverse = inverse.reshape(-1)
        self._rec_scale = vel2[padded]

    @property
    def steps_executed(self) -> int:
        """Number of kernel steps run so far."""
        return self.kernel.steps_executed

    def step(
        self,
        fields: WavefieldPair,
        pool: WorkerPool,
        policy: SchedulePolicy,
    ):
        """Advance ``fields`` by one time step."""
        self.kernel.step(fields, pool, policy)

    def inject_source(self, fields: WavefieldPair, t: float):
        """Subtract the scaled wavelet sample at ``t`` at the source."""
        amplitude = ricker(t, self.geom.source)
        fields.u_curr[self._src_halo] -= self._src_scale * amplitude

    def record_receivers(
        self, fields: WavefieldPair, t_index: int, traces: np.ndarray
    ):
        """Copy the current level at every receiver into column ``t_index``."""
        traces[:, t_index] = fields.u_curr[self._rec_halo]

    def inject_receivers(
        self,
        fields: WavefieldPair,
        traces: np.ndarray,
        t_index: int,
        pool: WorkerPool,
    ):
        """Add ``(c dt)^2`` times column ``t_index`` at the receivers.

        Samples of receivers sharing a grid point are summed first, so
        workers never update the same point.
        """
        n_points = len(self._rec_scale)
        if n_points == 0:
            return

        sums = np.bincount(
            self._rec_inverse, weights=traces[:, t_index], minlength=n_points
        )
        u = fields.u_curr
        points = self._rec_points
        scale = self._rec_scale

        def body(start: int, stop: int):
            idx = tuple(a[start:stop] for a in points)
            u[idx] += scale[start:stop] * sums[start:stop]

        pool.parallel_for(n_points, SchedulePolicy.static(), body)

    def run_forward(
        self,
        pool: WorkerPool,
        policy: SchedulePolicy,
        fields: Optional[WavefieldPair] = None,
        on_step: Optional[Callable[[int, WavefieldPair], None]] = None,
        desc: str = "Forward",
    ) -> WavefieldPair:
        """Run ``ns`` steps with source injection from zero fields.

        ``on_step(k, fields)`` is called after step ``k`` and its
        injection.
        """
        if fields is None:
            fields = WavefieldPair.zeros(self.grid)

        dt = self.dt
        for k in make_progress_bar(range(self.geom.ns), desc):
            self.step(fields, pool, policy)
            self.inject_source(fields, k * dt)
            if on_step is not None:
                on_step(k, fields)

        if not fields.is_finite():
            raise Propagator.UnstableError("unstable propagation")
        return fields

    def forward_model(
        self, pool: WorkerPool, policy: SchedulePolicy
    ) -> Seismogram:
        """Model the shot and return the recorded seismogram."""
        traces = np.zeros((len(self.geom.receivers), self.geom.ns))

        def record(k: int, fields: WavefieldPair):
            self.record_receivers(fields, k, traces)

        self.run_forward(pool, policy, on_step=record, desc="Modeling")
        debug("Modeled {} traces of {} samples", *traces.shape)
        return Seismogram(traces, self.geom)


def step(
    fields: WavefieldPair,
    model: VelocityModel,
    coeffs: BoundaryCoeffs,
    pool: WorkerPool,
    policy: SchedulePolicy,
    dt: float,
):
    """Advance ``fields`` one step, see ``StencilKernel.step``."""
    StencilKernel(model, dt, coeffs).step(fields, pool, policy)


def inject_source(
    fields: WavefieldPair,
    src: RickerSource,
    t: float,
    model: VelocityModel,
    dt: float,
):
    """Inject the wavelet sample of ``src`` at ``t`` at an interior point."""
    padded = model.grid.padded_index(src.position)
    position = tuple(i + HALO for i in padded)
    scale = model.at(src.position) * dt
    fields.u_curr[position] -= scale * scale * ricker(t, src)


def forward_model(
    model: VelocityModel,
    geom: AcquisitionGeometry,
    pool: WorkerPool,
    policy: SchedulePolicy,
) -> Seismogram:
    """Model one shot, see ``Propagator.forward_model``."""
    geom.check_within(model.grid, need_receivers=True)
    return Propagator(model, geom).forward_model(pool, policy)
