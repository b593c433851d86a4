import csv
import io
import json
from importlib import resources

import pytest

from podex import cli

DATA = resources.files("podex") / "data"
SCHEMA = json.loads((DATA / "csv_schema.json").read_text())

FLOW = """
task = "flow"
name = "line"
seed = 0

[hamiltonian]
expression = "{expr}"
n = 2

[params]
x0 = {x0}
window = [0.0, 2.0]

[output]
figures = {figures}
"""


def _scenario(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _flow(tmp_path, expr="(p1^2 + p2^2)/2 - 1/2", x0="[0.0, 0.0, 0.6, 0.8]", figures="false"):
    return _scenario(tmp_path, FLOW.format(expr=expr, x0=x0, figures=figures))


def _expand(columns, n):
    out = []
    for c in columns:
        if ".." in c:
            a, _ = c.split("..")
            stem = a.rstrip("0123456789")
            out += [f"{stem}{i}" for i in range(1, n + 1)]
        else:
            out.append(c)
    return out


def _header(path):
    return next(csv.reader(io.StringIO(path.read_text())))


def test_flow_writes_csv_json_and_figure(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", _flow(tmp_path, figures="true"), "--out", str(out)]) == cli.EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == ["line_orbit.csv", "line_orbit.png", "line_summary.json"]
    assert (out / "line_orbit.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert _header(out / "line_orbit.csv") == _expand(SCHEMA["orbit.csv"]["columns"], 2)
    summary = json.loads((out / "line_summary.json").read_text())
    assert "runtime" not in json.dumps(summary)


def test_repeated_runs_are_byte_identical(tmp_path):
    path = _flow(tmp_path)
    out = tmp_path / "out"
    blobs = []
    for _ in range(2):
        assert cli.main(["run", path, "--out", str(out)]) == 0
        blobs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert blobs[0] == blobs[1]


def test_malformed_expression_is_config_error(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", _flow(tmp_path, expr="(p1^2 + p2^2)/2 -"), "--out", str(out)])
    assert code == cli.EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_unknown_keys_are_config_errors(tmp_path):
    text = FLOW.format(expr="p1^2 - 1", x0="[0.0, 0.0, 1.0, 0.0]", figures="false")
    for bad in (text + "\nspeed = 3\n", text.replace("window =", "stepsize = 0.1\nwindow ="),
                text.replace('task = "flow"', 'task = "fly"')):
        assert cli.main(["run", _scenario(tmp_path, bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_off_level_start_is_numerical_failure(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", _flow(tmp_path, x0="[0.0, 0.0, 2.0, 0.0]"), "--out", str(out)])
    assert code == cli.EXIT_NUMERIC
    assert not out.exists()


def test_output_directory_precedence(tmp_path, monkeypatch):
    text = FLOW.format(expr="p1^2/2 + p2^2/2 - 1/2", x0="[0.0, 0.0, 1.0, 0.0]", figures="false")
    path = _scenario(tmp_path, text + f'dir = "{tmp_path / "file"}"\n')
    cfg, _ = cli.prepare(path)
    assert cfg["output"]["dir"] == str(tmp_path / "file")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.prepare(path)[0]["output"]["dir"] == str(tmp_path / "env")
    assert cli.prepare(path, out=str(tmp_path / "flag"))[0]["output"]["dir"] == str(tmp_path / "flag")
    assert cli.main(["run", path]) == 0
    assert (tmp_path / "env" / "line_orbit.csv").exists()


def test_validate_prints_resolved_config(tmp_path, capsys):
    assert cli.main(["validate", _flow(tmp_path)]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["task"] == "flow"
    assert cfg["params"]["order"] == cli.TASK_DEFAULTS["flow"]["order"]
    assert set(cfg["tolerances"]) == set(cli.TOLERANCES)


def test_library_scenarios_validate():
    for p in sorted(DATA.iterdir()):
        if p.name.endswith(".toml"):
            cfg, _ = cli.prepare(str(p))
            assert cfg["task"] in cli.TASKS


def test_jets_csv_matches_schema(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(DATA / "pendulum_jets.toml"), "--out", str(out)]) == 0
    assert _header(out / "pendulum_jets_jets.csv") == SCHEMA["jets.csv"]["columns"]


def test_heart_csv_matches_schema(tmp_path):
    text = (DATA / "heart.toml").read_text().replace("grid = 256", "grid = 64")
    out = tmp_path / "out"
    assert cli.main(["run", _scenario(tmp_path, text), "--out", str(out)]) == 0
    assert _header(out / "heart_heart.csv") == SCHEMA["heart.csv"]["columns"]
    summary = json.loads((out / "heart_heart.json").read_text())
    assert summary["component_count"] == 2


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
