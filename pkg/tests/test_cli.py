import re

import pytest

# isort: off
from chunktune.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_USAGE, cli
from chunktune.datafiles import read_csv
from click.testing import CliRunner, Result
from pathlib import Path

# isort: on


TINY = {
    "n1": 12,
    "n2": 12,
    "n3": 12,
    "wb": 4,
    "dx1": 10.0,
    "dx2": 10.0,
    "dx3": 10.0,
    "f_peak": 10.0,
    "dt": 0.001,
    "ns": 60,
    "source_depth": 2,
    "receiver_depth": 2,
    "receiver_step": 3,
}


def options(**overrides) -> list[str]:
    values = dict(TINY, **overrides)
    args = []
    for key, value in values.items():
        args += ["-o", f"{key}={value}"]
    return args


def invoke(command: str, out: Path, *args, **overrides) -> Result:
    runner = CliRunner()
    return runner.invoke(
        cli,
        [
            command,
            "--threads",
            "2",
            "--out",
            str(out),
            *options(**overrides),
            *args,
        ],
    )


def field(result: Result, name: str) -> str:
    match = re.search(rf"^{name}: (\S+)$", result.output, re.MULTILINE)
    assert match is not None, result.output
    return match.group(1)


def mse(result: Result) -> float:
    match = re.search(r"normalized MSE (\S+)", result.output)
    assert match is not None, result.output
    return float(match.group(1))


def test_help():
    result = CliRunner().invoke(cli, ["--help"])

    assert result.exit_code == 0
    for command in ["model", "migrate", "tune", "bench", "validate"]:
        assert command in result.output


def test_model(tmp_path):
    result = invoke("model", tmp_path, shots=2)

    assert result.exit_code == 0, result.output
    paths = [Path(p) for p in result.output.split() if p.endswith(".bin")]
    assert [p.name for p in paths] == ["shot_0000.bin", "shot_0001.bin"]
    assert (tmp_path / "shot_0000.bin").stat().st_size == 16 * 60 * 8
    meta = (tmp_path / "shot_0000.bin.meta").read_text().splitlines()
    assert [line.split(" = ")[0] for line in meta] == [
        "receivers",
        "ns",
        "dt",
        "source",
        "f_peak",
    ]

    preview = read_csv(tmp_path / "shot_0000_preview.csv")
    assert len(preview) == 60
    assert float(preview[0]["time"]) == pytest.approx(0.001)


def test_migrate(tmp_path):
    assert invoke("model", tmp_path).exit_code == 0

    result = invoke("migrate", tmp_path, scheduler="static")

    assert result.exit_code == 0, result.output
    assert len(field(result, "sha256")) == 64
    assert float(field(result, "total_seconds")) > 0
    assert (tmp_path / "image.bin").stat().st_size == 12**3 * 8

    assert (tmp_path / "timing.csv").read_text().splitlines()[0] == (
        "scheduler,chunk,shots,total_seconds,tuner_seconds,"
        "tuner_fraction,predicted_tuner_fraction,image_sha256"
    )
    shot_times = read_csv(tmp_path / "shot_times.csv")
    assert list(shot_times[0]) == ["shot", "seconds"]
    assert [r["shot"] for r in shot_times] == ["0"]

    timing = read_csv(tmp_path / "timing.csv")
    assert timing[0]["scheduler"] == "static"
    assert timing[0]["image_sha256"] == field(result, "sha256")
    assert float(timing[0]["tuner_seconds"]) == 0.0


def test_tuned_image_matches_static(tmp_path):
    assert invoke("model", tmp_path).exit_code == 0

    static = invoke("migrate", tmp_path, "--scheduler", "static")
    tuned = invoke(
        "migrate",
        tmp_path,
        "--scheduler",
        "tuned",
        "--csa-iters",
        "2",
        "--csa-m",
        "2",
    )

    assert static.exit_code == 0, static.output
    assert tuned.exit_code == 0, tuned.output
    assert field(tuned, "sha256") == field(static, "sha256")
    assert 50 <= int(field(tuned, "chunk")) <= 4000
    assert float(field(tuned, "tuner_seconds")) > 0

    timing = read_csv(tmp_path / "timing.csv")
    assert timing[0]["scheduler"] == "tuned"
    assert float(timing[0]["predicted_tuner_fraction"]) > 0


def test_tune_reports_evaluations(tmp_path):
    result = invoke("tune", tmp_path, "--csa-iters", "1", "--csa-m", "2")

    assert result.exit_code == 0, result.output
    assert field(result, "evaluations") == "4"
    assert 50 <= int(field(result, "chunk")) <= 4000

    rows = read_csv(tmp_path / "tune_trace.csv")
    assert len(rows) == 2
    assert list(rows[0]) == ["iteration", "optimizer", "chunk", "seconds"]


def test_tune_is_reproducible(tmp_path, monkeypatch):
    def fake_timer(chunk, execute):
        execute()
        return abs(chunk - 1234) + 1.0

    monkeypatch.setattr("chunktune.autotune.wall_clock_timer", fake_timer)

    first = invoke("tune", tmp_path / "a", "--seed", "7", csa_iters=6)
    second = invoke("tune", tmp_path / "b", "--seed", "7", csa_iters=6)

    assert first.exit_code == 0, first.output
    assert field(first, "chunk") == field(second, "chunk")
    assert (tmp_path / "a" / "tune_trace.csv").read_text() == (
        tmp_path / "b" / "tune_trace.csv"
    ).read_text()


def test_bench(tmp_path):
    result = invoke(
        "bench",
        tmp_path,
        "--csa-iters",
        "2",
        "--csa-m",
        "2",
        reps=1,
        bench_schedulers="static,guided,tuned",
    )

    assert result.exit_code == 0, result.output
    header = (tmp_path / "bench.csv").read_text().splitlines()[0]
    assert header == (
        "scheduler,chunk,shots,median_seconds,reps,"
        "tuner_overhead_seconds,threads"
    )
    rows = read_csv(tmp_path / "bench.csv")
    assert [r["scheduler"] for r in rows] == ["static", "guided", "tuned"]
    assert all(r["threads"] == "2" for r in rows)

    images = read_csv(tmp_path / "bench_images.csv")
    assert list(images[0]) == ["scheduler", "image_sha256"]
    assert [r["scheduler"] for r in images] == ["static", "guided", "tuned"]
    assert len({r["image_sha256"] for r in images}) == 1


def test_csa_sweep(tmp_path):
    result = invoke(
        "bench",
        tmp_path,
        "--csa-sweep",
        "--csa-m",
        "2",
        reps=1,
        sweep_iters="1,2",
        sweep_t_gen0="10",
    )

    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / "csa_sweep.csv")
    assert list(rows[0]) == [
        "n_iter",
        "t_gen0",
        "chunk",
        "median_seconds",
        "reps",
        "tuner_overhead_seconds",
    ]
    assert [(r["n_iter"], r["t_gen0"]) for r in rows] == [
        ("1", "10.0"),
        ("2", "10.0"),
    ]


def test_validate(tmp_path):
    result = invoke(
        "validate",
        tmp_path,
        n1=41,
        n2=41,
        n3=41,
        wb=10,
        f_peak=20.0,
        validate_offset=100.0,
    )

    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert mse(result) <= 1e-3
    assert len(read_csv(tmp_path / "validate.csv")) > 100


def test_validate_converges(tmp_path):
    coarse = invoke(
        "validate",
        tmp_path / "coarse",
        "--force",
        n1=21,
        n2=21,
        n3=21,
        wb=5,
        dx1=20.0,
        dx2=20.0,
        dx3=20.0,
        f_peak=20.0,
        validate_offset=100.0,
    )
    fine = invoke(
        "validate",
        tmp_path / "fine",
        n1=41,
        n2=41,
        n3=41,
        wb=10,
        f_peak=20.0,
        validate_offset=100.0,
    )

    assert coarse.exit_code == 0, coarse.output
    assert fine.exit_code == 0, fine.output
    assert mse(fine) < mse(coarse)


@pytest.mark.slow
def test_validate_full_size(tmp_path):
    result = invoke(
        "validate",
        tmp_path,
        n1=121,
        n2=121,
        n3=121,
        wb=20,
        f_peak=20.0,
        validate_offset=200.0,
    )

    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert mse(result) <= 1e-3


def test_validate_needs_offset(tmp_path):
    result = invoke("validate", tmp_path, validate_offset=0.0)

    assert result.exit_code == EXIT_USAGE
    assert "receiver coincides with source" in result.output


def test_unknown_option(tmp_path):
    result = invoke("model", tmp_path, "-o", "bogus=1")

    assert result.exit_code == EXIT_USAGE
    assert "Unknown option 'bogus'" in result.output


def test_dynamic_without_chunk(tmp_path):
    result = invoke("model", tmp_path, "--scheduler", "dynamic")

    assert result.exit_code == EXIT_USAGE
    assert "dynamic requires chunk" in result.output


def test_stability_violation(tmp_path):
    result = invoke("model", tmp_path, f_peak=40.0)

    assert result.exit_code == EXIT_USAGE
    assert "stability" in result.output
    assert not (tmp_path / "shot_0000.bin").exists()


def test_unstable_run(tmp_path):
    result = invoke("model", tmp_path, "--force", dt=0.02, ns=200)

    assert result.exit_code == EXIT_NUMERICAL
    assert "unstable" in result.output


def test_missing_seismograms(tmp_path):
    result = invoke("migrate", tmp_path / "empty")

    assert result.exit_code == EXIT_IO
    assert "not found" in result.output


def test_config_file(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text(
        "# tiny run\n"
        + "".join(f"{k} = {v}\n" for k, v in TINY.items())
        + "shots = 3\n"
    )

    result = CliRunner().invoke(
        cli,
        [
            "model",
            "-c",
            str(config),
            "-o",
            "shots=2",
            "--out",
            str(tmp_path / "out"),
            "-v",
        ],
    )

    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "shot_0001.bin").exists()
    assert not (tmp_path / "out" / "shot_0002.bin").exists()
    assert "thread(s)" in result.output


def test_malformed_config_file(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("n1 = many\n")

    result = CliRunner().invoke(cli, ["model", "-c", str(config)])

    assert result.exit_code == EXIT_USAGE
    assert "run.cfg:1" in result.output
