import os

import numpy as np
import pytest

from chunktune.autotune import (
    MeasurementSandbox,
    TuneConfig,
    autotune,
    predicted_overhead,
    step_cost,
    wall_clock_timer,
)
from chunktune.csa import CsaParams, Domain
from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    RickerSource,
    build_homogeneous_model,
)
from chunktune.parsched import SchedulePolicy, WorkerPool


@pytest.fixture
def tiny_model():
    return build_homogeneous_model(Grid3(6, 6, 6, 10.0, 10.0, 10.0), 2000.0)


@pytest.fixture
def tiny_geometry():
    return AcquisitionGeometry(RickerSource(20.0, (3, 3, 3)), [], 10, 0.001)


@pytest.fixture
def wide_model():
    # N_loop = 65536
    grid = Grid3(16, 64, 64, 10.0, 10.0, 10.0)
    return build_homogeneous_model(grid, 2000.0)


@pytest.fixture
def wide_geometry():
    return AcquisitionGeometry(RickerSource(20.0, (8, 8, 4)), [], 10, 0.001)


class CountingTimer:
    def __init__(self, cost):
        self.cost = cost
        self.chunks = []

    def __call__(self, chunk, execute):
        execute()
        self.chunks.append(chunk)
        return self.cost(chunk)


def test_step_cost_returns_timer_value(tiny_model, tiny_geometry, serial_pool):
    sandbox = MeasurementSandbox(tiny_model, tiny_geometry)
    timer = CountingTimer(lambda chunk: (chunk - 100) ** 2 + 5)

    seconds = step_cost(120, sandbox, serial_pool, timer)

    assert seconds == 405
    assert timer.chunks == [120]
    assert sandbox.executions == 2


def test_step_cost_clamps_the_chunk(tiny_model, tiny_geometry, serial_pool):
    domain = Domain(50, 216, integer=True)
    sandbox = MeasurementSandbox(tiny_model, tiny_geometry, domain)
    timer = CountingTimer(float)

    assert step_cost(1e9, sandbox, serial_pool, timer) == 216.0
    assert step_cost(3.4, sandbox, serial_pool, timer, executions=1) == 50.0
    assert sandbox.executions == 3


def test_sandbox_restores_state(tiny_model, tiny_geometry, pool):
    sandbox = MeasurementSandbox(tiny_model, tiny_geometry)
    initial = sandbox.fields.copy()
    assert np.count_nonzero(initial.u_curr) == 1

    sandbox.execute(7, pool)
    after_small = sandbox.fields.copy()
    sandbox.reset()
    np.testing.assert_array_equal(sandbox.fields.u_curr, initial.u_curr)
    np.testing.assert_array_equal(sandbox.fields.u_prev, initial.u_prev)

    sandbox.execute(150, pool)
    np.testing.assert_array_equal(sandbox.fields.u_curr, after_small.u_curr)
    assert sandbox.executions == 2


def test_evaluation_count(tiny_model, tiny_geometry, serial_pool):
    timer = CountingTimer(lambda chunk: abs(chunk - 120) + 1.0)
    samples = []
    cfg = TuneConfig(csa=CsaParams(m=4, n_iter=40))

    result = autotune(
        tiny_model,
        tiny_geometry,
        serial_pool,
        cfg,
        timer=timer,
        on_sample=samples.append,
    )

    assert result.evaluations == 320
    assert len(result.trace) == 160
    assert samples == result.trace
    assert len(timer.chunks) == 160
    assert all(50 <= s.chunk <= 216 for s in result.trace)
    assert result.cost == min(s.seconds for s in result.trace)
    assert result.cost == abs(result.chunk - 120) + 1.0
    assert result.policy == SchedulePolicy.dynamic(result.chunk)
    assert result.seconds > 0


def test_domain_bounded_by_thread_count(tiny_model, tiny_geometry):
    cfg = TuneConfig(csa=CsaParams(m=2, n_iter=2))
    timer = CountingTimer(lambda chunk: 1.0)

    with WorkerPool(3) as pool:
        autotune(tiny_model, tiny_geometry, pool, cfg, timer=timer)

    assert all(50 <= chunk <= 72 for chunk in timer.chunks)


def test_domain_empty(tiny_model, tiny_geometry, pool):
    cfg = TuneConfig(lo=100)
    timer = CountingTimer(float)

    with pytest.raises(TuneConfig.Error, match="domain empty"):
        autotune(tiny_model, tiny_geometry, pool, cfg, timer=timer)

    assert timer.chunks == []


def test_tune_config_validation():
    with pytest.raises(TuneConfig.Error):
        TuneConfig(lo=0)
    with pytest.raises(TuneConfig.Error):
        TuneConfig(executions_per_eval=0)

    domain = TuneConfig().domain(8192, 4)
    assert (domain.lo, domain.hi) == (50.0, 2048.0)
    assert domain.integer


def test_finds_mock_optimum(wide_model, wide_geometry, serial_pool):
    def mock(chunk, execute):
        return abs(chunk - 4000) + 3.0

    chunks = np.arange(50, 65537)
    assert int(chunks[np.argmin(np.abs(chunks - 4000) + 3.0)]) == 4000

    hits = 0
    for seed in range(20):
        cfg = TuneConfig(csa=CsaParams(seed=seed), executions_per_eval=1)
        result = autotune(
            wide_model, wide_geometry, serial_pool, cfg, timer=mock
        )
        if abs(result.chunk - 4000) <= 200:
            hits += 1

    assert hits >= 18


def test_same_seed_same_choice(tiny_model, tiny_geometry, serial_pool):
    cfg = TuneConfig(csa=CsaParams(t_gen0=5, n_iter=10, seed=8))

    def run():
        timer = CountingTimer(lambda chunk: (chunk - 90) ** 2)
        return autotune(tiny_model, tiny_geometry, serial_pool, cfg, timer)

    first = run()
    second = run()

    assert first.chunk == second.chunk
    assert first.trace == second.trace


def test_wall_clock_tuning(tiny_model, tiny_geometry, pool):
    cfg = TuneConfig(csa=CsaParams(m=2, n_iter=3))

    result = autotune(tiny_model, tiny_geometry, pool, cfg)

    assert result.evaluations == 12
    assert result.cost > 0
    assert 50 <= result.chunk <= 72


def test_wall_clock_timer_runs_once():
    calls = []

    seconds = wall_clock_timer(10, lambda: calls.append(1))

    assert calls == [1]
    assert seconds >= 0


def test_predicted_overhead():
    assert predicted_overhead(4, 40, 12_480) == pytest.approx(0.025)
    assert predicted_overhead(4, 40, 0) == 1.0
    assert predicted_overhead(4, 40, 320) == pytest.approx(0.5)


def _best_of(chunk, sandbox, pool, repeat=5):
    return min(step_cost(chunk, sandbox, pool) for _ in range(repeat))


@pytest.mark.slow
@pytest.mark.skipif(
    (os.cpu_count() or 1) < 4, reason="needs at least 4 cores"
)
def test_tuned_chunk_beats_random_chunks():
    model = build_homogeneous_model(
        Grid3(32, 32, 32, 10.0, 10.0, 10.0), 2000.0
    )
    geom = AcquisitionGeometry(RickerSource(20.0, (16, 16, 4)), [], 10, 0.001)
    rng = np.random.default_rng(77)

    wins = 0
    with WorkerPool(4) as pool:
        for seed in range(10):
            cfg = TuneConfig(csa=CsaParams(seed=seed))
            domain = cfg.domain(model.grid.n_loop, pool.n_threads)
            assert (domain.lo, domain.hi) == (50, 8192)

            tuned = autotune(model, geom, pool, cfg)

            sandbox = MeasurementSandbox(model, geom, domain)
            others = rng.integers(50, 8193, size=16)
            baseline = np.median(
                [_best_of(chunk, sandbox, pool) for chunk in others]
            )
            if _best_of(tuned.chunk, sandbox, pool) <= baseline:
                wins += 1

    assert wins >= 8
