import json

import numpy as np
import pytest

from jsct.cli import EXIT_RUNTIME, EXIT_USAGE, main
from jsct.harness import read_csv, read_pgm, read_raw, read_sinogram

CONFIG = """\
[geometry]
rows = 8
cols = 8
views = 8
detectors = 12

[data]
phantom = uniform_disc
I0 = 1e4

[model]
lambda = 2
delta = 0.01

[experiment]
algorithms = full_js, os_js
subsets = 2
max_passes = 3
reference_passes = 20
output_dir = results

[reconstruct]
algorithm = os_js
subsets = 4
max_passes = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG)
    return path


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.mark.filterwarnings("ignore:reference run still descending")
def test_run(config, tmp_path, capsys):
    assert main(["run", str(config), "--reproducible", "--seed", "4"]) == 0
    status = last_json(capsys.readouterr().out)
    assert status["status"] == "ok" and status["runs"] == ["full_js_B1", "os_js_B2"]
    out = tmp_path / "results"
    assert read_csv(out / "os_js_B2.csv")[-1].passes == 3.0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["config"]["seed"] == 4 and meta["config"]["reproducible"] is True


@pytest.mark.filterwarnings("ignore:reference run still descending")
def test_run_output_dir_override(config, tmp_path, capsys):
    assert main(["run", str(config), "--output-dir", str(tmp_path / "elsewhere"),
                 "--threads", "1"]) == 0
    assert (tmp_path / "elsewhere" / "full_js_B1.csv").exists()


def test_phantom(tmp_path, config, capsys):
    assert main(["phantom", "blocks", str(tmp_path / "p.pgm"), "--config", str(config)]) == 0
    assert read_pgm(tmp_path / "p.pgm").shape == (8, 8)
    assert read_raw(tmp_path / "p.raw").shape == (8, 8)
    assert main(["phantom", "uniform_disc", "disc", "--output-dir", str(tmp_path / "o")]) == 0
    assert read_pgm(tmp_path / "o" / "disc.pgm").shape == (64, 64)


def test_simulate_then_reconstruct(config, tmp_path, capsys):
    sino = tmp_path / "s.bin"
    assert main(["simulate", str(config), str(sino), "--seed", "3"]) == 0
    data, meta = read_sinogram(sino)
    assert data.m == 96 and meta["views"] == "8"
    again = tmp_path / "s2.bin"
    main(["simulate", str(config), str(again), "--seed", "3"])
    assert again.read_bytes() == sino.read_bytes()
    capsys.readouterr()
    assert main(["reconstruct", str(config), str(sino), str(tmp_path / "rec")]) == 0
    status = last_json(capsys.readouterr().out)
    assert status["passes"] == 2.0
    img = read_raw(tmp_path / "rec.raw")
    assert img.shape == (8, 8) and np.all(img >= 0)


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "none.ini")]) == EXIT_USAGE
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError"


def test_invalid_config_value(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nalgorithms =\n")
    assert main(["run", str(path)]) == EXIT_USAGE
    assert "at least one algorithm" in json.loads(capsys.readouterr().err)["message"]


def test_bad_command_line(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "UsageError"
    assert main(["run", "x.ini", "--threads", "0"]) == EXIT_USAGE


def test_unreadable_sinogram(config, tmp_path, capsys):
    bad = tmp_path / "s.bin"
    bad.write_bytes(b"")
    assert main(["reconstruct", str(config), str(bad), str(tmp_path / "r")]) == EXIT_RUNTIME
    assert json.loads(capsys.readouterr().err)["error"] in ("FileNotFoundError", "ValueError")
