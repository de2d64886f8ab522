import json
from pathlib import Path

import pytest

from ekiconv import cli, experiment as ex

SCEN = Path(ex.__file__).parent / "scenarios"

SMALL = """
[problem]
kind = "linear"
A = [[1.0, 0.5, -0.3], [0.2, -0.8, 1.1]]
gamma = 1.0
y = [1.0, -0.5]

[ensemble]
J = 4
mean = [0.0, 0.0, 0.0]

[run]
levels = [2, 3, 4]
reference_level = 6
replicas = %d
seed = 1
"""


def test_run_and_order(tmp_path, capsys):
    f = tmp_path / "s.toml"
    f.write_text(SMALL % 8)
    assert cli.main(["run", str(f), "--out", str(tmp_path / "o"), "--jobs", "2"]) == 0
    rep = tmp_path / "o" / "report.json"
    assert rep.exists() and (tmp_path / "o" / "report.csv").exists()
    capsys.readouterr()
    assert cli.main(["order", str(rep)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["levels"] == [2, 3, 4]


def test_seed_override_changes_payload(tmp_path):
    f = tmp_path / "s.toml"
    f.write_text(SMALL % 4)
    digests = []
    for seed, sub in [(None, "a"), (None, "b"), (99, "c")]:
        args = ["run", str(f), "--out", str(tmp_path / sub)]
        if seed is not None:
            args += ["--seed", str(seed)]
        cli.main(args)
        digests.append(json.loads((tmp_path / sub / "report.json").read_text())["sha256"])
    assert digests[0] == digests[1] != digests[2]


def test_config_error_exit_code(tmp_path, capsys):
    f = tmp_path / "s.toml"
    f.write_text(SMALL % 0)
    assert cli.main(["run", str(f), "--out", str(tmp_path)]) == 2
    assert "run/replicas" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == 2


def test_order_unreadable_report(tmp_path):
    bad = tmp_path / "r.json"
    bad.write_text("{}")
    assert cli.main(["order", str(bad)]) == 2


def test_verify_exit_codes(tmp_path):
    assert cli.main(["verify", str(SCEN / "linear_small.toml"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "verify.json").exists()
    assert cli.main(["verify", str(SCEN / "cubic_em.toml"), "--out", str(tmp_path)]) == 2


def test_figure1(tmp_path, capsys):
    assert cli.main(["figure1", "--level", "9", "--out", str(tmp_path)]) == 0
    s = json.loads(capsys.readouterr().out)
    assert s["norm_max"] > s["norm_initial"] > s["norm_final"]
    assert (tmp_path / "figure1_mean.csv").read_text().startswith("schema_version,")


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        cli.main([])
