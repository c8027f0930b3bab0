"""Reverse time migration of common-shot gathers.

Each shot is propagated forward while snapshots are kept in a
``CheckpointStore``.  The receiver wavefield is then propagated backward
with the observed samples injected at the receivers, and at every step
it is cross-correlated with the forward wavefield retrieved from the
checkpoints.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sortedcontainers import SortedDict

from chunktune import debug, info, make_progress_bar, trace
from chunktune.autotune import (
    Timer,
    TuneConfig,
    TuneResult,
    autotune,
    predicted_overhead,
)
from chunktune.csa import CsaParams
from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    Seismogram,
    VelocityModel,
)
from chunktune.parsched import SchedulePolicy, WorkerPool, monotonic_now
from chunktune.propagator import (
    HALO,
    Box,
    Propagator,
    WavefieldPair,
    flat_range_boxes,
)

Shot = tuple[AcquisitionGeometry, Seismogram]


class CheckpointStore:
    """Snapshots of a forward run at evenly spaced steps.

    Steps that are multiples of ``stride = ceil(ns / n_b)`` are kept, so
    at most ``n_b`` snapshots exist.
    """

    class Error(ValueError):
        """Invalid store configuration or use."""

    def __init__(self, n_b: int, ns: int):
        """Create an empty store for a run of ``ns`` steps."""
        if int(n_b) != n_b or n_b < 1:
            msg = f"n_b must be a positive integer, got {n_b}"
            raise CheckpointStore.Error(msg)
        if ns < 1:
            msg = f"ns must be positive, got {ns}"
            raise CheckpointStore.Error(msg)

        self.n_b = int(n_b)
        self.ns = ns
        self.stride = math.ceil(ns / n_b)
        self._entries: SortedDict = SortedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, step: int):
        return step in self._entries

    def steps(self) -> list[int]:
        """Stored step indices in increasing order."""
        return list(self._entries.keys())

    def wants(self, step: int) -> bool:
        """True if ``step`` is a checkpoint step."""
        return step % self.stride == 0

    def save(self, step: int, fields: WavefieldPair):
        """Store a copy of ``fields`` as the state after ``step``."""
        if not self.wants(step):
            msg = f"Step {step} is not a multiple of stride {self.stride}"
            raise CheckpointStore.Error(msg)
        if not 0 <= step < self.ns:
            msg = f"Step {step} outside [0, {self.ns})"
            raise CheckpointStore.Error(msg)
        self._entries[step] = fields.copy()

    def get(self, step: int) -> WavefieldPair:
        """Snapshot stored for exactly ``step``."""
        return self._entries[step]

    def nearest(self, step: int) -> tuple[int, WavefieldPair]:
        """The latest snapshot at or before ``step``."""
        pos = self._entries.bisect_right(step)
        if pos == 0:
            msg = f"No checkpoint at or before step {step}"
            raise CheckpointStore.Error(msg)
        return self._entries.peekitem(pos - 1)

    def clear(self):
        """Drop all snapshots."""
        self._entries.clear()


def rtm_forward(
    model: VelocityModel,
    geom: AcquisitionGeometry,
    pool: WorkerPool,
    policy: SchedulePolicy,
    store: CheckpointStore,
    propagator: Optional[Propagator] = None,
) -> WavefieldPair:
    """Propagate the shot forward, filling ``store``.

    Returns the wavefield after the last step.
    """
    if len(store) != 0:
        raise CheckpointStore.Error("Checkpoint store is not empty")
    if propagator is None:
        propagator = Propagator(model, geom)

    def checkpoint(k: int, fields: WavefieldPair):
        if store.wants(k):
            store.save(k, fields)

    fields = propagator.run_forward(
        pool, policy, on_step=checkpoint, desc="Forward"
    )
    trace(
        "Stored {} checkpoints with stride {}", len(store), store.stride
    )
    return fields


class ForwardRetriever:
    """Forward wavefields of arbitrary steps, rebuilt from checkpoints.

    Steps between checkpoints are recomputed with the same step and
    injection sequence as the forward run.  The current level of every
    step of the last recomputed segment is kept, so a descending sweep
    over all steps recomputes every segment once.
    """

    def __init__(
        self,
        propagator: Propagator,
        store: CheckpointStore,
        pool: WorkerPool,
        policy: SchedulePolicy,
    ):
        """Retrieve from ``store`` using ``propagator`` for recomputation."""
        self.propagator = propagator
        self.store = store
        self.pool = pool
        self.policy = policy
        self.recomputed_steps = 0

        self._segment: dict[int, np.ndarray] = {}
        self._work: Optional[WavefieldPair] = None

    def retrieve(self, t_i: int) -> np.ndarray:
        """Current level after forward step ``t_i``; do not modify it."""
        if not 0 <= t_i < self.store.ns:
            msg = f"Step {t_i} outside [0, {self.store.ns})"
            raise CheckpointStore.Error(msg)

        if t_i in self.store:
            return self.store.get(t_i).u_curr
        cached = self._segment.get(t_i)
        if cached is not None:
            return cached

        base, snapshot = self.store.nearest(t_i)
        self._recompute(base, snapshot, t_i)
        return self._segment[t_i]

    def _recompute(self, base: int, snapshot: WavefieldPair, t_i: int):
        if self._work is None:
            self._work = snapshot.copy()
        else:
            self._work.assign(snapshot)

        self._segment.clear()
        fields = self._work
        dt = self.propagator.dt
        for k in range(base + 1, t_i + 1):
            self.propagator.step(fields, self.pool, self.policy)
            self.propagator.inject_source(fields, k * dt)
            self._segment[k] = fields.u_curr.copy()
        self.recomputed_steps += t_i - base


def retrieve_forward(
    store: CheckpointStore,
    t_i: int,
    model: VelocityModel,
    geom: AcquisitionGeometry,
    pool: WorkerPool,
    policy: SchedulePolicy,
) -> np.ndarray:
    """Current level after forward step ``t_i``, see ``ForwardRetriever``."""
    retriever = ForwardRetriever(Propagator(model, geom), store, pool, policy)
    return retriever.retrieve(t_i)


@dataclass
class ImageVolume:
    """Cross-correlation image over the interior grid points."""

    grid: Grid3
    values: np.ndarray = field(repr=False)
    shots: int = 0

    @staticmethod
    def zeros(grid: Grid3) -> "ImageVolume":
        """Empty image of ``grid``."""
        return ImageVolume(grid, np.zeros(grid.interior_shape))

    def add(self, other: "ImageVolume"):
        """Stack ``other`` onto this image."""
        if other.values.shape != self.values.shape:
            msg = (
                f"Image shapes differ: {other.values.shape} "
                f"!= {self.values.shape}"
            )
            raise ValueError(msg)
        self.values += other.values
        self.shots += other.shots

    def is_finite(self) -> bool:
        """True if no value is NaN or infinite."""
        return bool(np.isfinite(self.values).all())

    def checksum(self) -> str:
        """SHA-256 of the little-endian float64 bytes."""
        data = np.ascontiguousarray(self.values, dtype="<f8").tobytes()
        return hashlib.sha256(data).hexdigest()


def _interior_box(box: Box, offset: int) -> Box:
    return (
        slice(box[0].start + offset, box[0].stop + offset),
        slice(box[1].start + offset, box[1].stop + offset),
        slice(box[2].start + offset, box[2].stop + offset),
    )


def imaging_step(
    image: ImageVolume,
    u_fwd: np.ndarray,
    u_bwd: np.ndarray,
    pool: WorkerPool,
):
    """Add ``u_fwd * u_bwd`` of two current levels to the image."""
    grid = image.grid
    shape = grid.interior_shape
    offset = grid.wb + HALO
    values = image.values

    def body(start: int, stop: int):
        for box in flat_range_boxes(start, stop, shape):
            field_box = _interior_box(box, offset)
            values[box] += u_fwd[field_box] * u_bwd[field_box]

    pool.parallel_for(grid.n_interior, SchedulePolicy.static(), body)


@dataclass(frozen=True)
class RtmConfig:
    """Migration settings.

    ``policy`` schedules the propagation loops unless ``tune`` is set, in
    which case the tuned dynamic policy replaces it from the first shot
    on.  ``n_c`` is carried for reference only.
    """

    policy: SchedulePolicy = field(default_factory=SchedulePolicy.auto)
    n_b: int = 50
    tune: Optional[TuneConfig] = None
    n_c: Optional[int] = None

    class Error(ValueError):
        """Invalid migration settings."""

    def __post_init__(self):
        if int(self.n_b) != self.n_b or self.n_b < 1:
            msg = f"n_b must be a positive integer, got {self.n_b}"
            raise RtmConfig.Error(msg)


@dataclass
class MigrationResult:
    """Stacked image with timing of a batch of shots."""

    image: ImageVolume
    policy: SchedulePolicy
    total_seconds: float
    ns: int
    tuner_seconds: float = 0.0
    shot_seconds: list[float] = field(default_factory=list)
    recomputed_steps: int = 0
    tune: Optional[TuneResult] = None

    @property
    def chunk(self) -> Optional[int]:
        """Chunk of the propagation policy, if it has one."""
        return self.policy.chunk

    @property
    def tuner_fraction(self) -> float:
        """Share of the total wall time spent tuning."""
        if self.total_seconds <= 0:
            return 0.0
        return self.tuner_seconds / self.total_seconds

    @property
    def equivalent_steps(self) -> int:
        """Time steps run by the migration itself."""
        return equivalent_step_count(
            self.ns, self.image.shots, self.recomputed_steps
        )

    def predicted_tuner_fraction(self, csa: CsaParams) -> float:
        """Tuner share expected from the step counts, 0 when untuned."""
        if self.tune is None:
            return 0.0
        return predicted_overhead(csa.m, csa.n_iter, self.equivalent_steps)


def equivalent_step_count(ns: int, n_shots: int, recomputed: int) -> int:
    """Time steps of a batch: forward, backward and recomputation."""
    return n_shots * 2 * ns + recomputed


class Migration:
    """Migrates shots recorded over one velocity model."""

    class UnstableError(ArithmeticError):
        """A wavefield or the image became non-finite."""

    class ShotError(RuntimeError):
        """Migration of one shot of a batch failed."""

        def __init__(self, msg: str, shot: int):
            """Record the index of the failed shot."""
            super().__init__(msg)
            self.shot = shot

    def __init__(self, model: VelocityModel, pool: WorkerPool, cfg: RtmConfig):
        """Migrate over ``model`` on ``pool``."""
        self.model = model
        self.pool = pool
        self.cfg = cfg
        self.recomputed_steps = 0

    def migrate_shot(
        self,
        observed: Seismogram,
        geom: AcquisitionGeometry,
        policy: Optional[SchedulePolicy] = None,
    ) -> ImageVolume:
        """Image of one shot.

        The receiver wavefield is stepped from ``t_i = ns - 1`` down to
        0; at each ``t_i`` the observed column is injected and the image
        accumulates its product with the forward wavefield of ``t_i``.
        """
        if observed.geometry.receivers != geom.receivers:
            raise Seismogram.Error("Seismogram does not match geometry")
        if observed.traces.shape != (len(geom.receivers), geom.ns):
            raise Seismogram.Error("Seismogram does not match geometry")
        if policy is None:
            policy = self.cfg.policy

        grid = self.model.grid
        pool = self.pool
        propagator = Propagator(self.model, geom)
        store = CheckpointStore(self.cfg.n_b, geom.ns)

        try:
            rtm_forward(self.model, geom, pool, policy, store, propagator)
        except Propagator.UnstableError as e:
            raise Migration.UnstableError("unstable migration") from e

        retriever = ForwardRetriever(propagator, store, pool, policy)
        receiver = WavefieldPair.zeros(grid)
        image = ImageVolume.zeros(grid)
        traces = observed.traces

        for t_i in make_progress_bar(range(geom.ns - 1, -1, -1), "Backward"):
            propagator.step(receiver, pool, policy)
            propagator.inject_receivers(receiver, traces, t_i, pool)
            forward = retriever.retrieve(t_i)
            imaging_step(image, forward, receiver.u_curr, pool)

        if not (receiver.is_finite() and image.is_finite()):
            raise Migration.UnstableError("unstable migration")

        image.shots = 1
        self.recomputed_steps += retriever.recomputed_steps
        debug(
            "Shot migrated, {} steps recomputed from {} checkpoints",
            retriever.recomputed_steps,
            len(store),
        )
        return image

    def migrate_all(
        self, shots: Sequence[Shot], timer: Optional[Timer] = None
    ) -> MigrationResult:
        """Migrate and stack ``shots`` in order.

        With tuning enabled the tuner runs before the first shot and its
        chunk is used for every shot.  ``timer`` is passed to the tuner.
        """
        if not shots:
            raise RtmConfig.Error("No shots to migrate")

        start = monotonic_now()
        policy = self.cfg.policy
        tuned: Optional[TuneResult] = None
        tuner_seconds = 0.0
        shot_seconds = []
        stacked = ImageVolume.zeros(self.model.grid)
        self.recomputed_steps = 0

        for index, (geom, observed) in enumerate(shots):
            if index == 0 and self.cfg.tune is not None:
                tune_start = monotonic_now()
                tuned = autotune(
                    self.model, geom, self.pool, self.cfg.tune, timer
                )
                tuner_seconds = monotonic_now() - tune_start
                policy = tuned.policy

            shot_start = monotonic_now()
            try:
                image = self.migrate_shot(observed, geom, policy)
            except Exception as e:
                msg = f"Migration of shot {index} failed: {e}"
                raise Migration.ShotError(msg, index) from e
            stacked.add(image)
            shot_seconds.append(monotonic_now() - shot_start)
            info("Shot {} migrated in {:.3f} s", index, shot_seconds[-1])

        result = MigrationResult(
            image=stacked,
            policy=policy,
            total_seconds=monotonic_now() - start,
            ns=shots[0][0].ns,
            tuner_seconds=tuner_seconds,
            shot_seconds=shot_seconds,
            recomputed_steps=self.recomputed_steps,
            tune=tuned,
        )
        info(
            "Migrated {} shot(s) in {:.3f} s, tuner share {:.2%}",
            len(shots),
            result.total_seconds,
            result.tuner_fraction,
        )
        return result


def migrate_shot(
    model: VelocityModel,
    observed: Seismogram,
    geom: AcquisitionGeometry,
    pool: WorkerPool,
    cfg: RtmConfig,
) -> ImageVolume:
    """Image of one shot, see ``Migration.migrate_shot``."""
    return Migration(model, pool, cfg).migrate_shot(observed, geom)


def migrate_all(
    model: VelocityModel,
    shots: Sequence[Shot],
    pool: WorkerPool,
    cfg: RtmConfig,
    timer: Optional[Timer] = None,
) -> MigrationResult:
    """Stacked image of ``shots``, see ``Migration.migrate_all``."""
    return Migration(model, pool, cfg).migrate_all(shots, timer)
