"""Workflows behind the command-line interface.

Each ``run_*`` function takes a ``RunConfig`` and a pool, does its work,
writes its files below ``cfg.out`` and returns what it computed.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Optional

import numpy as np

from chunktune import debug, enabled, info, log, log_elapsed
from chunktune.autotune import Timer, TuneResult, autotune
from chunktune.config import RunConfig
from chunktune.datafiles import (
    read_seismogram,
    shot_path,
    write_csv,
    write_image,
    write_seismogram,
    write_trace_preview,
    write_tune_trace,
)
from chunktune.model import (
    AcquisitionGeometry,
    RickerSource,
    Seismogram,
    VelocityModel,
    check_stability,
    ricker,
)
from chunktune.parsched import WorkerPool
from chunktune.propagator import forward_model
from chunktune.rtm import MigrationResult, RtmConfig, Shot, migrate_all

# Recording continues this long after the direct arrival
VALIDATE_TAIL = 0.06

TIMING_HEADER = (
    "scheduler",
    "chunk",
    "shots",
    "total_seconds",
    "tuner_seconds",
    "tuner_fraction",
    "predicted_tuner_fraction",
    "image_sha256",
)


def _nearest_receiver(geom: AcquisitionGeometry) -> int:
    src = np.array(geom.source.position)
    distances = [np.sum((np.array(r) - src) ** 2) for r in geom.receivers]
    return int(np.argmin(distances))


def _check_setup(cfg: RunConfig, model: VelocityModel, geom):
    check_stability(model, geom).require(cfg.force)


def run_model(cfg: RunConfig, pool: WorkerPool) -> list[Path]:
    """Model every shot and write its seismogram and a trace preview."""
    model = cfg.velocity_model()
    policy = cfg.base_policy()
    paths = []

    for k, geom in enumerate(cfg.shot_geometries()):
        geom.check_within(model.grid, need_receivers=True)
        _check_setup(cfg, model, geom)

        path = shot_path(cfg.out_dir, k)
        with log_elapsed("Shot {} modeled: {}", k, path):
            seismogram = forward_model(model, geom, pool, policy)
        write_seismogram(path, seismogram)
        write_trace_preview(
            path.with_name(f"shot_{k:04d}_preview.csv"),
            seismogram,
            _nearest_receiver(geom),
        )
        paths.append(path)

    return paths


def model_shots(
    cfg: RunConfig, model: VelocityModel, pool: WorkerPool
) -> list[Shot]:
    """Model every shot in memory."""
    shots = []
    for geom in cfg.shot_geometries():
        geom.check_within(model.grid, need_receivers=True)
        _check_setup(cfg, model, geom)
        seismogram = forward_model(model, geom, pool, cfg.base_policy())
        shots.append((geom, seismogram))
    return shots


def load_shots(cfg: RunConfig) -> list[Shot]:
    """Read the seismograms written by ``run_model``."""
    shots = []
    for k, geom in enumerate(cfg.shot_geometries()):
        path = shot_path(cfg.out_dir, k)
        if not path.exists():
            msg = f"Seismogram of shot {k} not found: {path}"
            raise FileNotFoundError(msg)
        shots.append((geom, read_seismogram(path, geom)))
    return shots


def _chunk_label(result: MigrationResult, n_loop: int, threads: int) -> int:
    return result.policy.effective_chunk(n_loop, threads)


def run_migrate(
    cfg: RunConfig, pool: WorkerPool, timer: Optional[Timer] = None
) -> MigrationResult:
    """Migrate the modeled shots; write the image and timing reports."""
    model = cfg.velocity_model()
    shots = load_shots(cfg)
    for geom, _ in shots:
        _check_setup(cfg, model, geom)

    rtm_cfg = cfg.rtm_config()
    result = migrate_all(model, shots, pool, rtm_cfg, timer)

    out = cfg.out_dir
    write_image(out / "image.bin", result.image)

    predicted = 0.0
    if rtm_cfg.tune is not None:
        predicted = result.predicted_tuner_fraction(rtm_cfg.tune.csa)
    chunk = _chunk_label(result, model.grid.n_loop, pool.n_threads)
    write_csv(
        out / "timing.csv",
        TIMING_HEADER,
        [
            (
                cfg.scheduler,
                chunk,
                len(shots),
                repr(result.total_seconds),
                repr(result.tuner_seconds),
                repr(result.tuner_fraction),
                repr(predicted),
                result.image.checksum(),
            )
        ],
    )
    write_csv(
        out / "shot_times.csv",
        ("shot", "seconds"),
        ((k, repr(s)) for k, s in enumerate(result.shot_seconds)),
    )

    if rtm_cfg.tune is not None:
        log(
            "Tuner share {:.2%} measured, {:.2%} predicted (chunk {})",
            result.tuner_fraction,
            predicted,
            chunk,
        )
    return result


def run_tune(
    cfg: RunConfig, pool: WorkerPool, timer: Optional[Timer] = None
) -> TuneResult:
    """Tune the chunk on the first shot and write the trace."""
    model = cfg.velocity_model()
    geom = cfg.shot_geometries()[0]
    _check_setup(cfg, model, geom)

    result = autotune(model, geom, pool, cfg.tune_config(), timer)
    write_tune_trace(cfg.out_dir / "tune_trace.csv", result.trace)
    return result


@dataclass(frozen=True)
class BenchRecord:
    """Median timing of one scheduler."""

    HEADER: ClassVar[tuple[str, ...]] = (
        "scheduler",
        "chunk",
        "shots",
        "median_seconds",
        "reps",
        "tuner_overhead_seconds",
        "threads",
    )

    scheduler: str
    chunk: int
    shots: int
    median_seconds: float
    reps: int
    tuner_overhead_seconds: float
    threads: int
    image_sha256: str = ""

    def row(self) -> tuple:
        """CSV row matching ``HEADER``."""
        return (
            self.scheduler,
            self.chunk,
            self.shots,
            repr(self.median_seconds),
            self.reps,
            repr(self.tuner_overhead_seconds),
            self.threads,
        )


@dataclass(frozen=True)
class SweepRecord:
    """Median timing of one tuner parameterization."""

    HEADER: ClassVar[tuple[str, ...]] = (
        "n_iter",
        "t_gen0",
        "chunk",
        "median_seconds",
        "reps",
        "tuner_overhead_seconds",
    )

    n_iter: int
    t_gen0: float
    chunk: int
    median_seconds: float
    reps: int
    tuner_overhead_seconds: float

    def row(self) -> tuple:
        """CSV row matching ``HEADER``."""
        return (
            self.n_iter,
            repr(self.t_gen0),
            self.chunk,
            repr(self.median_seconds),
            self.reps,
            repr(self.tuner_overhead_seconds),
        )


def _repeat(
    model: VelocityModel,
    shots: list[Shot],
    pool: WorkerPool,
    rtm_cfg: RtmConfig,
    reps: int,
    timer: Optional[Timer],
) -> tuple[list[MigrationResult], float, float]:
    results = [
        migrate_all(model, shots, pool, rtm_cfg, timer) for _ in range(reps)
    ]
    total = statistics.median(r.total_seconds for r in results)
    tuner = statistics.median(r.tuner_seconds for r in results)
    return results, total, tuner


def run_bench(
    cfg: RunConfig, pool: WorkerPool, timer: Optional[Timer] = None
) -> list[BenchRecord]:
    """Time the migration under every configured scheduler.

    Shots are modeled once in memory; each scheduler then migrates them
    ``reps`` times.  The tuned scheduler tunes again on every repetition.
    """
    model = cfg.velocity_model()
    shots = model_shots(cfg, model, pool)
    n_loop = model.grid.n_loop
    records = []

    for label in cfg.bench_list():
        info("Benchmarking scheduler '{}'", label)
        with log_elapsed("Scheduler '{}' done", label):
            results, total, tuner = _repeat(
                model, shots, pool, cfg.rtm_config(label), cfg.reps, timer
            )
        last = results[-1]
        checksums = {r.image.checksum() for r in results}
        if len(checksums) != 1:
            log("warning: scheduler '{}' produced differing images", label)

        record = BenchRecord(
            scheduler=label,
            chunk=_chunk_label(last, n_loop, pool.n_threads),
            shots=len(shots),
            median_seconds=total,
            reps=cfg.reps,
            tuner_overhead_seconds=tuner,
            threads=pool.n_threads,
            image_sha256=last.image.checksum(),
        )
        debug("Bench record: {}", record)
        records.append(record)

    out = cfg.out_dir
    write_csv(
        out / "bench.csv", BenchRecord.HEADER, (r.row() for r in records)
    )
    write_csv(
        out / "bench_images.csv",
        ("scheduler", "image_sha256"),
        ((r.scheduler, r.image_sha256) for r in records),
    )

    static = next((r for r in records if r.scheduler == "static"), None)
    if static is not None and enabled(1):
        for r in records:
            if r is not static and r.median_seconds > 0:
                speedup = static.median_seconds / r.median_seconds - 1
                info(
                    "Speedup of '{}' over static: {:.1%}",
                    r.scheduler,
                    speedup,
                )
    return records


def run_csa_sweep(
    cfg: RunConfig, pool: WorkerPool, timer: Optional[Timer] = None
) -> list[SweepRecord]:
    """Time the tuned one-shot migration for every sweep combination."""
    model = cfg.velocity_model()
    shots = model_shots(cfg, model, pool)[:1]
    n_iters, temps = cfg.sweep_lists()
    records = []

    for n_iter in n_iters:
        for t_gen0 in temps:
            rtm_cfg = cfg.rtm_config("tuned", n_iter=n_iter, t_gen0=t_gen0)
            results, total, tuner = _repeat(
                model, shots, pool, rtm_cfg, cfg.reps, timer
            )
            chunk = results[-1].chunk
            assert chunk is not None
            records.append(
                SweepRecord(n_iter, t_gen0, chunk, total, cfg.reps, tuner)
            )
            info(
                "N={} T_gen0={}: chunk {}, median {:.4g} s",
                n_iter,
                t_gen0,
                chunk,
                total,
            )

    write_csv(
        cfg.out_dir / "csa_sweep.csv",
        SweepRecord.HEADER,
        (r.row() for r in records),
    )
    return records


@dataclass(frozen=True)
class ValidationReport:
    """Comparison of a modeled trace with the analytical solution."""

    mse: float
    tolerance: float
    offset: float
    ns: int

    class Error(ValueError):
        """The validation setup is impossible."""

    class ZeroTraceError(ArithmeticError):
        """A trace has no non-zero sample to normalize by."""

    @property
    def passed(self) -> bool:
        """True if the error is within the tolerance."""
        return self.mse <= self.tolerance

    def describe(self) -> str:
        """One-line verdict."""
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: normalized MSE {self.mse:.3e} "
            f"(tolerance {self.tolerance:.1e}, offset {self.offset:g} m, "
            f"{self.ns} steps)"
        )


def analytical_trace(
    source: RickerSource, distance: float, velocity: float, times
) -> np.ndarray:
    """Pressure of a point source in a homogeneous medium.

    ``s(t - r / c) / (4 pi r)`` with ``s`` the source wavelet.
    """
    if distance <= 0:
        raise ValidationReport.Error("receiver coincides with source")
    times = np.asarray(times, dtype=np.float64)
    delayed = ricker(times - distance / velocity, source)
    return np.asarray(delayed) / (4.0 * math.pi * distance)


def normalize_peak(trace: np.ndarray) -> np.ndarray:
    """Divide by the signed sample of largest magnitude."""
    peak = trace[int(np.argmax(np.abs(trace)))]
    if peak == 0:
        raise ValidationReport.ZeroTraceError("trace is identically zero")
    return trace / peak


def normalized_mse(computed: np.ndarray, reference: np.ndarray) -> float:
    """Mean squared difference of the peak-normalized traces."""
    diff = normalize_peak(computed) - normalize_peak(reference)
    return float(np.mean(diff * diff))


def run_validate(cfg: RunConfig, pool: WorkerPool) -> ValidationReport:
    """Compare one modeled trace with the analytical solution."""
    grid = cfg.grid()
    model = cfg.homogeneous_model(cfg.validate_velocity)

    center = (grid.n1 // 2, grid.n2 // 2, grid.n3 // 2)
    offset_points = round(cfg.validate_offset / grid.dx1)
    if offset_points == 0:
        raise ValidationReport.Error("receiver coincides with source")
    receiver = (center[0] + offset_points, center[1], center[2])
    if not grid.contains(receiver):
        msg = (
            f"Receiver {receiver} at offset {cfg.validate_offset} m is "
            "outside the grid"
        )
        raise ValidationReport.Error(msg)

    distance = offset_points * grid.dx1
    velocity = cfg.validate_velocity
    source = RickerSource(cfg.f_peak, center)
    window = source.delay + distance / velocity + VALIDATE_TAIL
    ns = math.ceil(window / cfg.dt)
    geom = AcquisitionGeometry(source, (receiver,), ns, cfg.dt)
    _check_setup(cfg, model, geom)

    seismogram: Seismogram = forward_model(
        model, geom, pool, cfg.base_policy()
    )
    times = (np.arange(ns) + 1) * cfg.dt
    computed = seismogram.traces[0]
    reference = analytical_trace(source, distance, velocity, times)

    report = ValidationReport(
        mse=normalized_mse(computed, reference),
        tolerance=cfg.validate_tolerance,
        offset=distance,
        ns=ns,
    )
    write_csv(
        cfg.out_dir / "validate.csv",
        ("time", "computed", "analytical"),
        zip(
            (repr(float(t)) for t in times),
            (repr(float(v)) for v in normalize_peak(computed)),
            (repr(float(v)) for v in normalize_peak(reference)),
        ),
    )
    info("Validation: {}", report.describe())
    return report
