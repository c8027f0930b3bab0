import math

import numpy as np
import pytest

from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    RickerSource,
    Seismogram,
    StabilityReport,
    VelocityModel,
    build_homogeneous_model,
    build_two_layer_model,
    check_stability,
    default_delay,
    interface_depth_index,
    load_velocity_model,
    ricker,
)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n1=0),
        dict(n2=-3),
        dict(dx1=0.0),
        dict(dx3=float("nan")),
        dict(wb=-1),
    ],
)
def test_grid_rejects_invalid_values(kwargs):
    args = dict(n1=4, n2=4, n3=4, dx1=10.0, dx2=10.0, dx3=10.0, wb=2)
    args.update(kwargs)
    with pytest.raises(Grid3.Error):
        Grid3(**args)


def test_grid_extent():
    grid = Grid3(3, 4, 5, 10.0, 10.0, 10.0, wb=2)

    assert grid.shape == (7, 8, 9)
    assert grid.n_loop == 7 * 8 * 9
    assert grid.n_interior == 60
    assert grid.padded_index((0, 1, 2)) == (2, 3, 4)


def test_grid_flat_index_roundtrip():
    grid = Grid3(3, 5, 4, 1.0, 1.0, 1.0, wb=1)
    s1, s2, s3 = grid.shape

    seen = set()
    for i1 in range(s1):
        for i2 in range(s2):
            for i3 in range(s3):
                flat = grid.flat_index(i1, i2, i3)
                assert grid.unflatten(flat) == (i1, i2, i3)
                seen.add(flat)

    assert seen == set(range(grid.n_loop))


def test_flat_index_is_x3_fastest():
    grid = Grid3(4, 4, 4, 1.0, 1.0, 1.0)

    assert grid.flat_index(0, 0, 1) == 1
    assert grid.flat_index(0, 1, 0) == 4
    assert grid.flat_index(1, 0, 0) == 16


def test_velocity_model_rejects_non_positive():
    grid = Grid3(2, 2, 2, 1.0, 1.0, 1.0)
    values = np.full(8, 1500.0)
    values[3] = 0.0

    with pytest.raises(VelocityModel.Error, match="non-positive velocity"):
        VelocityModel(grid, values)


def test_velocity_model_rejects_non_finite():
    grid = Grid3(2, 2, 2, 1.0, 1.0, 1.0)
    values = np.full(8, 1500.0)
    values[5] = np.inf

    with pytest.raises(VelocityModel.Error, match="non-finite velocity"):
        VelocityModel(grid, values)


def test_velocity_model_is_read_only():
    grid = Grid3(2, 2, 2, 1.0, 1.0, 1.0)
    model = VelocityModel(grid, np.full(8, 1500.0))

    with pytest.raises(ValueError):
        model.c[0] = 1.0


def test_velocity_model_bounds_hold_everywhere(rng):
    grid = Grid3(5, 4, 6, 1.0, 1.0, 1.0, wb=2)
    interior = rng.uniform(1000.0, 4000.0, size=grid.n_interior)

    model = VelocityModel.from_interior(grid, interior)

    assert model.cmin == interior.min()
    assert model.cmax == interior.max()
    assert np.all(model.c >= model.cmin)
    assert np.all(model.c <= model.cmax)


def test_band_replicates_nearest_interior_value():
    grid = Grid3(2, 2, 2, 1.0, 1.0, 1.0, wb=2)
    interior = np.arange(1, 9, dtype=np.float64).reshape(2, 2, 2)

    volume = VelocityModel.from_interior(grid, interior).as_volume()

    assert volume[0, 0, 0] == interior[0, 0, 0]
    assert volume[-1, -1, -1] == interior[-1, -1, -1]
    assert volume[0, 3, 5] == interior[0, 1, 1]
    np.testing.assert_array_equal(volume[2:4, 2:4, 2:4], interior)


def test_two_layer_split():
    grid = Grid3(3, 3, 4, 1.0, 1.0, 1.0, wb=1)

    model = build_two_layer_model(grid, 1400.0, 2000.0)

    assert model.cmin == 1400.0
    assert model.cmax == 2000.0
    for i3, expected in enumerate([1400.0, 1400.0, 2000.0, 2000.0]):
        assert model.at((1, 2, i3)) == expected
    assert interface_depth_index(grid) == 2


def test_two_layer_with_equal_velocities_is_homogeneous():
    grid = Grid3(3, 3, 5, 1.0, 1.0, 1.0)

    model = build_two_layer_model(grid, 2000.0, 2000.0)

    assert model.cmin == model.cmax == 2000.0
    np.testing.assert_array_equal(
        model.c, build_homogeneous_model(grid, 2000.0).c
    )


def test_ricker_peak_and_decay():
    src = RickerSource(20.0, (0, 0, 0))

    assert ricker(src.delay, src) == 1.0
    assert abs(ricker(src.delay + 1.5, src)) < 1e-12
    assert abs(ricker(src.delay - 1.0, src)) < 1e-12


def test_ricker_closed_form():
    src = RickerSource(20.0, (0, 0, 0), t0=0.0)
    a = (math.pi * 20.0 * 0.025) ** 2

    value = ricker(0.025, src)

    assert value == pytest.approx((1 - 2 * a) * math.exp(-a), rel=1e-14)
    assert value == pytest.approx(-0.3337, abs=1e-3)


def test_ricker_vectorized():
    src = RickerSource(15.0, (0, 0, 0))
    times = np.linspace(0, 0.3, 31)

    values = ricker(times, src)

    assert values.shape == (31,)
    assert values[10] == pytest.approx(ricker(float(times[10]), src))


def test_default_delay():
    assert default_delay(20.0) == pytest.approx(
        6 / (math.pi * 20 * math.sqrt(2))
    )
    assert RickerSource(20.0, (0, 0, 0)).delay == default_delay(20.0)


def test_source_rejects_invalid_values():
    with pytest.raises(RickerSource.Error):
        RickerSource(0.0, (0, 0, 0))
    with pytest.raises(RickerSource.Error):
        RickerSource(10.0, (0, 0, 0), t0=-1.0)


def test_geometry_checks_positions():
    grid = Grid3(4, 4, 4, 1.0, 1.0, 1.0, wb=3)
    source = RickerSource(20.0, (1, 1, 1))

    AcquisitionGeometry(source, [(3, 3, 3)], 10, 0.001).check_within(grid)

    with pytest.raises(AcquisitionGeometry.Error, match="outside"):
        outside = AcquisitionGeometry(source, [(4, 0, 0)], 10, 0.001)
        outside.check_within(grid)

    with pytest.raises(AcquisitionGeometry.Error, match="receiver list empty"):
        empty = AcquisitionGeometry(source, [], 10, 0.001)
        empty.check_within(grid, need_receivers=True)


def test_geometry_rejects_invalid_sampling():
    source = RickerSource(20.0, (1, 1, 1))

    with pytest.raises(AcquisitionGeometry.Error):
        AcquisitionGeometry(source, [], 0, 0.001)
    with pytest.raises(AcquisitionGeometry.Error):
        AcquisitionGeometry(source, [], 10, 0.0)


def test_seismogram_shape_must_match_geometry():
    source = RickerSource(20.0, (1, 1, 1))
    geom = AcquisitionGeometry(source, [(0, 0, 0), (1, 0, 0)], 5, 0.001)

    assert Seismogram.zeros(geom).traces.shape == (2, 5)
    with pytest.raises(Seismogram.Error):
        Seismogram(np.zeros((2, 4)), geom)
    with pytest.raises(Seismogram.Error):
        Seismogram(np.full((2, 5), np.nan), geom)


def _geometry(dt):
    return AcquisitionGeometry(RickerSource(20.0, (1, 1, 1)), [], 10, dt)


def test_stability_dispersion_bound_is_inclusive():
    grid = Grid3(4, 4, 4, 10.0, 10.0, 10.0)
    model = build_homogeneous_model(grid, 2000.0)

    report = check_stability(model, _geometry(0.001), f_max=50.0, W=4)

    assert report.dx_bound == 10.0
    assert report.dx_ok


def test_stability_time_step_bound():
    grid = Grid3(4, 4, 4, 10.0, 10.0, 10.0)
    model = build_homogeneous_model(grid, 2000.0)

    report = check_stability(model, _geometry(0.001), f_max=50.0)

    assert report.dt_bound == pytest.approx(1.838e-3, rel=1e-3)
    assert report.dt_ok
    assert report.ok


def test_stability_fast_model_violates_time_step():
    grid = Grid3(4, 4, 4, 10.0, 10.0, 10.0)
    model = build_homogeneous_model(grid, 4000.0)

    report = check_stability(model, _geometry(0.001), f_max=50.0)

    assert report.dt_bound == pytest.approx(0.919e-3, rel=1e-3)
    assert not report.dt_ok
    assert not report.ok
    with pytest.raises(StabilityReport.Error, match="stability"):
        report.require()
    report.require(force=True)


def test_stability_is_monotone_in_f_max_and_w():
    grid = Grid3(4, 4, 4, 10.0, 10.0, 10.0)
    model = build_two_layer_model(grid, 1400.0, 2000.0)
    geom = _geometry(0.001)

    f_values = [10.0, 20.0, 35.0, 50.0, 80.0]
    w_values = [4, 5, 8, 12]
    ok = {
        (f, w): check_stability(model, geom, f_max=f, W=w).dx_ok
        for f in f_values
        for w in w_values
    }

    for w in w_values:
        for lower, higher in zip(f_values, f_values[1:]):
            assert ok[(lower, w)] or not ok[(higher, w)]
    for f in f_values:
        for lower, higher in zip(w_values, w_values[1:]):
            assert ok[(f, lower)] or not ok[(f, higher)]

    assert check_stability(model, geom, f_max=35.0).dx_ok
    assert not check_stability(model, geom, f_max=50.0).dx_ok


def test_stability_rejects_invalid_arguments():
    grid = Grid3(4, 4, 4, 10.0, 10.0, 10.0)
    model = build_homogeneous_model(grid, 2000.0)

    with pytest.raises(ValueError):
        check_stability(model, _geometry(0.001), W=3)
    with pytest.raises(ValueError):
        check_stability(model, _geometry(0.001), f_max=0.0)


def test_load_velocity_model(tmp_path):
    path = tmp_path / "v.bin"
    np.full(8, 1500.0, dtype="<f4").tofile(path)

    model = load_velocity_model(path, Grid3(2, 2, 2, 1.0, 1.0, 1.0, wb=1))

    assert model.cmin == model.cmax == 1500.0
    assert model.c.size == 4 * 4 * 4


def test_velocity_file_is_float32_x3_fastest(tmp_path):
    path = tmp_path / "v.bin"
    values = np.arange(1, 9) * 100.0
    values.astype("<f4").tofile(path)
    grid = Grid3(2, 2, 2, 1.0, 1.0, 1.0)

    model = load_velocity_model(path, grid)

    np.testing.assert_array_equal(model.c, values)

    values.astype("<f8").tofile(path)
    with pytest.raises(VelocityModel.LoadError, match="expected 32"):
        load_velocity_model(path, grid)


def test_load_velocity_model_non_positive(tmp_path):
    path = tmp_path / "v.bin"
    values = np.full(8, 1500.0, dtype="<f4")
    values[6] = 0.0
    values.tofile(path)

    with pytest.raises(VelocityModel.LoadError, match="non-positive velocity"):
        load_velocity_model(path, Grid3(2, 2, 2, 1.0, 1.0, 1.0))


def test_load_velocity_model_size_mismatch(tmp_path):
    path = tmp_path / "v.bin"
    np.full(7, 1500.0, dtype="<f4").tofile(path)

    with pytest.raises(VelocityModel.LoadError, match="size mismatch"):
        load_velocity_model(path, Grid3(2, 2, 2, 1.0, 1.0, 1.0))


def test_load_velocity_model_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_velocity_model(
            tmp_path / "missing.bin", Grid3(2, 2, 2, 1.0, 1.0, 1.0)
        )
