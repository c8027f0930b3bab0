"""On-disk formats: raw volumes and traces, sidecar metadata and CSVs.

Volumes and seismograms are headerless little-endian float64 arrays,
``x3`` (or time) fastest.  Each comes with a ``.meta`` sidecar of
``key = value`` lines describing its shape.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from chunktune import debug
from chunktune.autotune import TuneSample
from chunktune.model import AcquisitionGeometry, Grid3, Seismogram
from chunktune.rtm import ImageVolume

TUNE_TRACE_HEADER = ("iteration", "optimizer", "chunk", "seconds")


class DataFileError(OSError):
    """A data file is missing, malformed or inconsistent."""


def shot_path(directory: Path, shot: int) -> Path:
    """Seismogram file of ``shot`` inside ``directory``."""
    return Path(directory) / f"shot_{shot:04d}.bin"


def sidecar_path(path: Path) -> Path:
    """Metadata file accompanying ``path``."""
    return path.with_name(path.name + ".meta")


def write_sidecar(path: Path, meta: Mapping[str, Any]):
    """Write ``meta`` next to ``path``."""
    lines = [f"{key} = {value}" for key, value in meta.items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path: Path) -> dict[str, str]:
    """Read the metadata written by ``write_sidecar``."""
    meta_path = sidecar_path(path)
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", maxsplit=1)
        meta[key.strip()] = value.strip()
    return meta


def _write_raw(path: Path, values: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(values, dtype="<f8").tofile(path)
    debug("Wrote {} ({} values)", path, values.size)


def _read_raw(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * 8
    size = path.stat().st_size
    if size != expected:
        msg = f"{path}: size mismatch, {size} bytes, expected {expected}"
        raise DataFileError(msg)
    return np.fromfile(path, dtype="<f8").reshape(shape)


def write_seismogram(path: Path, seismogram: Seismogram):
    """Write the traces, one receiver after another."""
    geom = seismogram.geometry
    _write_raw(path, seismogram.traces)
    write_sidecar(
        path,
        {
            "receivers": len(geom.receivers),
            "ns": geom.ns,
            "dt": repr(geom.dt),
            "source": ",".join(str(i) for i in geom.source.position),
            "f_peak": repr(geom.source.f_peak),
        },
    )


def read_seismogram(path: Path, geom: AcquisitionGeometry) -> Seismogram:
    """Read traces recorded with ``geom``."""
    traces = _read_raw(Path(path), (len(geom.receivers), geom.ns))
    return Seismogram(traces, geom)


def write_image(path: Path, image: ImageVolume):
    """Write the image over the interior grid with its metadata."""
    grid = image.grid
    _write_raw(path, image.values)
    write_sidecar(
        path,
        {
            "n1": grid.n1,
            "n2": grid.n2,
            "n3": grid.n3,
            "dx1": repr(grid.dx1),
            "dx2": repr(grid.dx2),
            "dx3": repr(grid.dx3),
            "shots": image.shots,
            "dtype": "float64 little-endian, x3 fastest",
            "sha256": image.checksum(),
        },
    )


def read_image(path: Path, grid: Grid3) -> ImageVolume:
    """Read an image written by ``write_image``.

    The values must match the checksum recorded in the sidecar.
    """
    path = Path(path)
    values = _read_raw(path, grid.interior_shape)
    meta = read_sidecar(path)
    try:
        shots = int(meta.get("shots", "0"))
    except ValueError as e:
        raise DataFileError(f"{path}: malformed shot count") from e

    image = ImageVolume(grid, values, shots)
    recorded = meta.get("sha256")
    if recorded is not None and recorded != image.checksum():
        raise DataFileError(f"{path}: checksum mismatch")
    return image


def write_csv(
    path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
):
    """Write ``rows`` below ``header``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    debug("Wrote {}", path)


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a CSV written by ``write_csv`` as dicts."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_tune_trace(path: Path, samples: Iterable[TuneSample]):
    """Write the tuner measurements."""
    write_csv(
        path,
        TUNE_TRACE_HEADER,
        (
            (s.iteration, s.optimizer, s.chunk, repr(s.seconds))
            for s in samples
        ),
    )


def write_trace_preview(path: Path, seismogram: Seismogram, receiver: int):
    """Write one trace as ``time,amplitude`` rows."""
    geom = seismogram.geometry
    trace = seismogram.traces[receiver]
    write_csv(
        path,
        ("time", "amplitude"),
        (
            ((k + 1) * geom.dt, repr(float(value)))
            for k, value in enumerate(trace)
        ),
    )
