import json

import pytest

from ipsharp import cli

CONFIG = """[model]
d = 1
R = 1
kind = "contact"
lambda = 0.7

[run]
m = 1
T_grid = [0.5, 1.0]
h_grid = [0.2, 0.5]
reps = 1000
seed = 3

[knobs]
x = [0]
t = 0.3
u = 1.0
tail_reps = 100
time_nodes = 4
influence_reps = 100
"""

EXPECTED = {
    "validate": ["validate.txt"],
    "theta": ["theta.csv"],
    "sigma": ["sigma.csv"],
    "russo": ["russo.csv"],
    "pivotal": ["pivotal.csv"],
    "explore": ["revelation.csv", "determinism.json"],
    "osss-check": ["osss.json"],
    "diff-ineq": ["diff_ineq.csv"],
    "sharpness": ["sharpness_theta.csv", "sharpness_fits.csv", "sharpness.json"],
    "oracle": ["oracle.csv"],
    "brw-check": ["brw.json", "tail.csv"],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


@pytest.mark.parametrize("command", sorted(EXPECTED))
def test_every_command_writes_outputs(command, config, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    assert cli.main([command, "--config", str(config), "--out", str(out)]) == cli.EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert sorted(man["outputs"]) == sorted(EXPECTED[command])
    for name in EXPECTED[command]:
        assert (out / name).stat().st_size > 0
    assert man["command"] == command and man["seed"] == 3


def test_theta_header_and_reproducible(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert cli.main(["theta", "--config", str(config), "--out", str(a)]) == 0
    assert cli.main(["theta", "--config", str(config), "--out", str(b), "--threads", "3"]) == 0
    text = (a / "theta.csv").read_text()
    assert text.splitlines()[0] == ",".join(cli.ex.GRID_COLUMNS)
    assert text == (b / "theta.csv").read_text()


def test_json_format_and_stdout(config, capsys):
    assert cli.main(["oracle", "--config", str(config), "--format", "json"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# oracle.json\n")
    rows = json.loads(out.split("\n", 1)[1])
    assert len(rows) == 4 and "theta_exact" in rows[0]


def test_overrides_change_hash(config, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    cli.main(["theta", "--config", str(config), "--out", str(out)])
    h1 = json.loads((out / "manifest.json").read_text())["config_hash"]
    cli.main(["theta", "--config", str(config), "--out", str(out), "--reps", "500"])
    h2 = json.loads((out / "manifest.json").read_text())["config_hash"]
    assert h1 != h2


def test_missing_output_directory(config, tmp_path):
    assert cli.main(["theta", "--config", str(config), "--out", str(tmp_path / "missing")]) == cli.EXIT_IO
    assert not (tmp_path / "missing").exists()


def test_usage_errors(config, tmp_path):
    assert cli.main(["theta", "--config", str(tmp_path / "none.toml")]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate", "--config", str(config)]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text(CONFIG.replace('kind = "contact"', 'kind = "voter"'))
    assert cli.main(["theta", "--config", str(bad)]) == cli.EXIT_USAGE
    death = tmp_path / "death.toml"
    death.write_text('[model]\nd = 1\nR = 0\nkind = "pure_death"\ndelta = 1.0\n')
    assert cli.main(["validate", "--config", str(death)]) == cli.EXIT_USAGE


def test_numeric_error_exit(config, tmp_path):
    big = tmp_path / "big.toml"
    big.write_text(CONFIG + "m_grid = [12]\n")
    assert cli.main(["oracle", "--config", str(big)]) == cli.EXIT_NUMERIC


def test_help_lists_schema(capsys):
    assert cli.main(["sharpness", "--help"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "sharpness_fits.csv" in out and "r2_binomial" in out
