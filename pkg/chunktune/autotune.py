"""Run-time tuning of the dynamic-schedule chunk size.

The cost of a chunk size is the wall time of the first forward time step
of the shot, executed twice and timed on the second execution.  Coupled
Simulated Annealing searches ``[lo, N_loop / N_threads]`` for the chunk
with the lowest cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from chunktune import debug, info, trace
from chunktune.csa import CsaParams, Domain, Evaluation, minimize
from chunktune.model import AcquisitionGeometry, VelocityModel
from chunktune.parsched import SchedulePolicy, WorkerPool, monotonic_now
from chunktune.propagator import Propagator, WavefieldPair

# ``timer(chunk, execute)`` runs ``execute()`` and returns its duration
Timer = Callable[[int, Callable[[], None]], float]


def wall_clock_timer(chunk: int, execute: Callable[[], None]) -> float:
    """Time ``execute()`` with the monotonic clock."""
    del chunk
    start = monotonic_now()
    execute()
    return monotonic_now() - start


@dataclass(frozen=True)
class TuneConfig:
    """Auto-tuner settings.

    ``lo`` is the smallest chunk considered.  Each evaluation executes
    the kernel ``executions_per_eval`` times and times only the last.
    """

    csa: CsaParams = field(default_factory=CsaParams)
    lo: int = 50
    executions_per_eval: int = 2

    class Error(ValueError):
        """Invalid tuning setup."""

    def __post_init__(self):
        if int(self.lo) != self.lo or self.lo < 1:
            msg = f"lo must be a positive integer, got {self.lo}"
            raise TuneConfig.Error(msg)
        if self.executions_per_eval < 1:
            msg = (
                "executions_per_eval must be at least 1, "
                f"got {self.executions_per_eval}"
            )
            raise TuneConfig.Error(msg)

    def domain(self, n_loop: int, n_threads: int) -> Domain:
        """Integer search domain ``[lo, n_loop // n_threads]``."""
        hi = n_loop // n_threads
        if hi <= self.lo:
            msg = (
                f"domain empty: N_loop / N_threads = {n_loop} / {n_threads}"
                f" does not exceed lo = {self.lo}"
            )
            raise TuneConfig.Error(msg)
        return Domain(self.lo, hi, integer=True)


@dataclass(frozen=True)
class TuneSample:
    """One timed evaluation."""

    iteration: int
    optimizer: int
    chunk: int
    seconds: float


@dataclass
class TuneResult:
    """Best chunk found and the measurements that led to it."""

    chunk: int
    cost: float
    trace: list[TuneSample]
    evaluations: int
    seconds: float = 0.0

    @property
    def policy(self) -> SchedulePolicy:
        """Dynamic policy with the tuned chunk."""
        return SchedulePolicy.dynamic(self.chunk)


class MeasurementSandbox:
    """Wavefield state of the first forward time step, restorable.

    Every measurement starts from zero fields with the source injected at
    ``t = 0``, so all evaluations perform the same computation.
    """

    def __init__(
        self,
        model: VelocityModel,
        geom: AcquisitionGeometry,
        domain: Optional[Domain] = None,
        propagator: Optional[Propagator] = None,
    ):
        """Prepare the initial state.

        Args:
            model: Velocity model of the shot.
            geom: Geometry of the shot.
            domain: Chunks are clamped into it.  Defaults to
                ``[1, N_loop]``.
            propagator: Reused if given, otherwise built from ``model``
                and ``geom``.

        """
        if propagator is None:
            propagator = Propagator(model, geom)
        if domain is None:
            domain = Domain(1, model.grid.n_loop, integer=True)

        self.propagator = propagator
        self.domain = domain
        self.executions = 0

        self._initial = WavefieldPair.zeros(model.grid)
        propagator.inject_source(self._initial, 0.0)
        self.fields = self._initial.copy()

    def clamp(self, chunk: float) -> int:
        """Nearest in-domain chunk."""
        return int(self.domain.clamp(chunk))

    def reset(self):
        """Restore the initial state."""
        self.fields.assign(self._initial)

    def execute(self, chunk: int, pool: WorkerPool):
        """Run one kernel step with ``Dynamic(chunk)``."""
        self.propagator.step(
            self.fields, pool, SchedulePolicy.dynamic(chunk)
        )
        self.executions += 1


def step_cost(
    chunk: float,
    sandbox: MeasurementSandbox,
    pool: WorkerPool,
    timer: Optional[Timer] = None,
    executions: int = 2,
) -> float:
    """Measure one time step with ``Dynamic(chunk)``.

    The step is executed ``executions`` times from the same state and
    only the last execution is timed.  The sandbox is reset afterwards.
    """
    if timer is None:
        timer = wall_clock_timer
    chunk = sandbox.clamp(chunk)

    sandbox.reset()
    for _ in range(executions - 1):
        sandbox.execute(chunk, pool)
        sandbox.reset()

    seconds = timer(chunk, lambda: sandbox.execute(chunk, pool))
    sandbox.reset()

    trace("Chunk {} took {:.6g} s", chunk, seconds)
    return seconds


def autotune(
    model: VelocityModel,
    geom: AcquisitionGeometry,
    pool: WorkerPool,
    cfg: TuneConfig,
    timer: Optional[Timer] = None,
    on_sample: Optional[Callable[[TuneSample], None]] = None,
) -> TuneResult:
    """Find the chunk size minimizing the first-step time of ``geom``.

    Args:
        model: Velocity model of the shot.
        geom: Geometry of the shot used for measurements.
        pool: Pool the kernel runs on; its size bounds the domain.
        cfg: Tuner settings.
        timer: Replaces ``wall_clock_timer``.
        on_sample: Called after every evaluation.

    """
    domain = cfg.domain(model.grid.n_loop, pool.n_threads)
    sandbox = MeasurementSandbox(model, geom, domain)

    debug(
        "Tuning chunk in [{}, {}] with m={} N={} t_gen0={}",
        int(domain.lo),
        int(domain.hi),
        cfg.csa.m,
        cfg.csa.n_iter,
        cfg.csa.t_gen0,
    )

    samples: list[TuneSample] = []

    def record(evaluation: Evaluation):
        sample = TuneSample(
            evaluation.iteration,
            evaluation.optimizer,
            int(evaluation.solution),
            evaluation.energy,
        )
        samples.append(sample)
        if on_sample is not None:
            on_sample(sample)

    def cost(chunk: float) -> float:
        return step_cost(
            chunk, sandbox, pool, timer, cfg.executions_per_eval
        )

    start = monotonic_now()
    result = minimize(cost, domain, cfg.csa, on_evaluation=record)
    elapsed = monotonic_now() - start

    tuned = TuneResult(
        chunk=int(result.solution),
        cost=result.energy,
        trace=samples,
        evaluations=sandbox.executions,
        seconds=elapsed,
    )
    info(
        "Tuned chunk {} ({:.6g} s per step) after {} kernel executions",
        tuned.chunk,
        tuned.cost,
        tuned.evaluations,
    )
    return tuned


def predicted_overhead(m: int, n_iter: int, steps: int) -> float:
    """Expected share of the tuner in a run of ``steps`` time steps.

    The tuner costs ``2 * m * n_iter`` step executions.
    """
    tuning = 2 * m * n_iter
    return tuning / (tuning + steps)
