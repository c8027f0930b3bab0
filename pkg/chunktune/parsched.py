"""A persistent worker-thread pool with a chunked parallel-for.

Loop bodies receive ``(start, stop)`` ranges of a flattened index space.
How ranges are handed to workers follows the ``static``, ``dynamic`` and
``guided`` loop schedules.
"""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Optional

from chunktune import debug, detail_log, trace

THREADS_ENV = "CHUNKTUNE_THREADS"

RangeBody = Callable[[int, int], None]


class ScheduleKind(Enum):
    """Enumeration for loop scheduling kinds."""

    Static = "static"
    Dynamic = "dynamic"
    Guided = "guided"


@dataclass(frozen=True)
class SchedulePolicy:
    """How a loop index range is split among workers.

    ``chunk`` is the block size for ``Static`` (``None`` means
    ``ceil(n / n_threads)``), the fixed claim size for ``Dynamic``, and
    the minimum claim size for ``Guided``.
    """

    kind: ScheduleKind
    chunk: Optional[int] = None

    class Error(ValueError):
        """Invalid schedule policy."""

    def __post_init__(self):
        if self.chunk is not None and (
            int(self.chunk) != self.chunk or self.chunk < 1
        ):
            msg = f"chunk must be a positive integer, got {self.chunk}"
            raise SchedulePolicy.Error(msg)
        if self.kind is ScheduleKind.Dynamic and self.chunk is None:
            raise SchedulePolicy.Error("dynamic requires chunk")

    @staticmethod
    def static(chunk: Optional[int] = None) -> "SchedulePolicy":
        """Static policy, default block size unless ``chunk`` is given."""
        return SchedulePolicy(ScheduleKind.Static, chunk)

    @staticmethod
    def auto() -> "SchedulePolicy":
        """The ``auto`` schedule, which maps to static with default chunk."""
        return SchedulePolicy(ScheduleKind.Static, None)

    @staticmethod
    def dynamic(chunk: int) -> "SchedulePolicy":
        """Dynamic policy with a fixed claim size."""
        return SchedulePolicy(ScheduleKind.Dynamic, chunk)

    @staticmethod
    def guided(min_chunk: int = 1) -> "SchedulePolicy":
        """Guided policy with the given minimum claim size."""
        return SchedulePolicy(ScheduleKind.Guided, min_chunk)

    def effective_chunk(self, n: int, n_threads: int) -> int:
        """Return the chunk parameter resolved for a loop of ``n``."""
        if self.chunk is not None:
            return self.chunk
        if self.kind is ScheduleKind.Static:
            return max(1, math.ceil(n / n_threads))
        return 1

    def __str__(self):
        if self.chunk is None:
            return self.kind.value
        return f"{self.kind.value},{self.chunk}"


def static_ranges(
    n: int, chunk: int, n_threads: int
) -> list[list[tuple[int, int]]]:
    """Assign ``chunk``-sized blocks of ``[0, n)`` round-robin to workers."""
    assignment: list[list[tuple[int, int]]] = [[] for _ in range(n_threads)]
    for block, start in enumerate(range(0, n, chunk)):
        assignment[block % n_threads].append((start, min(start + chunk, n)))
    return assignment


def guided_chunks(n: int, n_threads: int, min_chunk: int = 1) -> Iterator[int]:
    """Yield the claim lengths of a guided loop in claim order."""
    remaining = n
    while remaining > 0:
        size = max(min_chunk, math.ceil(remaining / n_threads))
        size = min(size, remaining)
        yield size
        remaining -= size


def monotonic_now() -> float:
    """High-resolution monotonic timestamp in seconds."""
    return time.perf_counter()


def default_thread_count() -> int:
    """Thread count from ``CHUNKTUNE_THREADS`` or the number of CPUs."""
    value = os.getenv(THREADS_ENV)
    if value is None or value == "":
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        count = 0
    if count < 1:
        msg = f"{THREADS_ENV} must be a positive integer, got '{value}'"
        raise WorkerPool.Error(msg)
    return count


class _RangeClaimer:
    """Hands out ranges of ``[0, n)`` to workers under a lock."""

    def __init__(self, n: int, policy: SchedulePolicy, n_threads: int):
        self._n = n
        self._kind = policy.kind
        self._chunk = policy.effective_chunk(n, n_threads)
        self._n_threads = n_threads
        self._next = 0
        self._lock = threading.Lock()
        self._static: list[list[tuple[int, int]]] = []

        if self._kind is ScheduleKind.Static:
            self._static = static_ranges(n, self._chunk, n_threads)

    def ranges_for(self, worker: int) -> Iterator[tuple[int, int]]:
        if self._kind is ScheduleKind.Static:
            yield from self._static[worker]
            return

        while True:
            claimed = self.claim()
            if claimed is None:
                return
            yield claimed

    def claim(self) -> Optional[tuple[int, int]]:
        with self._lock:
            start = self._next
            remaining = self._n - start
            if remaining <= 0:
                return None
            if self._kind is ScheduleKind.Guided:
                size = max(
                    self._chunk, math.ceil(remaining / self._n_threads)
                )
            else:
                size = self._chunk
            stop = min(start + size, self._n)
            self._next = stop
        return (start, stop)


class WorkerPool:
    """Persistent worker threads executing one parallel loop at a time.

    The caller of ``parallel_for`` takes part in the loop as worker 0,
    so a pool of one thread starts no extra threads and runs serially.
    """

    class Error(ValueError):
        """Invalid pool configuration."""

    class BusyError(RuntimeError):
        """A loop is already in flight on this pool."""

    class ClosedError(RuntimeError):
        """The pool has been shut down."""

    def __init__(self, n_threads: Optional[int] = None):
        """Create a pool with ``n_threads`` workers.

        Args:
            n_threads: Number of workers including the calling thread.
                Defaults to ``default_thread_count()``.

        """
        if n_threads is None:
            n_threads = default_thread_count()
        if int(n_threads) != n_threads or n_threads < 1:
            msg = f"n_threads must be a positive integer, got {n_threads}"
            raise WorkerPool.Error(msg)

        self._n_threads = int(n_threads)
        self._in_flight = threading.Lock()
        self._closed = False

        self._body: Optional[RangeBody] = None
        self._claimer: Optional[_RangeClaimer] = None
        self._failures: list[BaseException] = []
        self._abort = threading.Event()

        self._start = threading.Barrier(self._n_threads)
        self._done = threading.Barrier(self._n_threads)
        self._workers: list[threading.Thread] = []

        try:
            for worker in range(1, self._n_threads):
                thread = threading.Thread(
                    target=self._worker_loop,
                    args=(worker,),
                    name=f"worker-{worker}",
                    daemon=True,
                )
                thread.start()
                self._workers.append(thread)
        except RuntimeError as e:
            self._shutdown_started()
            msg = f"Could not start {self._n_threads} workers: {e}"
            raise WorkerPool.Error(msg) from e

        debug("Started pool with {} thread(s)", self._n_threads)

    @property
    def n_threads(self) -> int:
        """Number of workers, fixed for the lifetime of the pool."""
        return self._n_threads

    def __enter__(self):
        return self

    def __exit__(self, *_args):
        self.close()

    def close(self):
        """Stop all workers."""
        if self._closed:
            return
        with self._in_flight:
            self._closed = True
            self._body = None
            self._claimer = None
            if self._workers:
                self._start.wait()
            for thread in self._workers:
                thread.join()
            self._workers.clear()
        trace("Pool closed")

    def _shutdown_started(self):
        self._closed = True
        self._start.abort()
        for thread in self._workers:
            thread.join()
        self._workers.clear()

    def parallel_for(self, n: int, policy: SchedulePolicy, body: RangeBody):
        """Run ``body(start, stop)`` over disjoint ranges covering ``[0, n)``.

        Returns after every index has been processed.  If ``body`` raises,
        the remaining ranges are abandoned and the first exception is
        re-raised once all workers have stopped.
        """
        if n < 0:
            msg = f"Loop size must be non-negative, got {n}"
            raise WorkerPool.Error(msg)
        if self._closed:
            raise WorkerPool.ClosedError("Pool is closed")
        if not self._in_flight.acquire(blocking=False):
            raise WorkerPool.BusyError("A loop is already running")

        try:
            if n == 0:
                return

            self._body = body
            self._claimer = _RangeClaimer(n, policy, self._n_threads)
            self._failures = []
            self._abort.clear()

            detail_log("parallel_for n={} policy={}", n, policy)

            if self._workers:
                self._start.wait()
            self._run_ranges(0)
            if self._workers:
                self._done.wait()

            failures = self._failures
        finally:
            self._body = None
            self._claimer = None
            self._in_flight.release()

        if failures:
            raise failures[0]

    def _run_ranges(self, worker: int):
        body = self._body
        claimer = self._claimer
        assert body is not None and claimer is not None

        try:
            for start, stop in claimer.ranges_for(worker):
                if self._abort.is_set():
                    break
                body(start, stop)
        except BaseException as e:
            self._abort.set()
            self._failures.append(e)

    def _worker_loop(self, worker: int):
        while True:
            try:
                self._start.wait()
            except threading.BrokenBarrierError:
                return
            if self._closed:
                return
            self._run_ranges(worker)
            self._done.wait()


def create_pool(n_threads: Optional[int] = None) -> WorkerPool:
    """Create a ``WorkerPool``, see its constructor."""
    return WorkerPool(n_threads)


def parallel_for(
    pool: WorkerPool, n: int, policy: SchedulePolicy, body: RangeBody
):
    """Run ``body`` over ``[0, n)`` on ``pool``, see ``WorkerPool``."""
    pool.parallel_for(n, policy, body)
