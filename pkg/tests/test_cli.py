import json

import pytest

from vishape.cli import main, to_json
from vishape.config import ConfigError, list_demos, load_config, validate

SOLVE = """[run]
command = solve-vi
[mesh]
n = 4
[problem]
lambda = 1.0
density = u^3 + u - 1
obstacle = 0.3
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_solve_vi_writes_outputs(tmp_path, capsys):
    cfg = write(tmp_path, SOLVE)
    out = tmp_path / "out"
    assert main(["solve-vi", "--config", str(cfg), "--out", str(out)]) == 0
    assert "solve-vi:" in capsys.readouterr().out
    res = json.loads((out / "residuals.json").read_text())
    assert res["complementarity"] <= 1e-8
    assert (out / "solution.csv").read_text().startswith("node,x,y,")


def test_parse_error_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, "[mesh]\nn = 4\nthis is not ini\n")
    assert main(["solve-vi", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("vishape: config error:") and "line 3" in err[0]


def test_missing_key_and_range(tmp_path, capsys):
    cfg = write(tmp_path, "[mesh]\nn = 4\n")
    assert main(["solve-vi", "--config", str(cfg)]) == 2
    assert "problem.lambda" in capsys.readouterr().err
    cfg = write(tmp_path, SOLVE.replace("lambda = 1.0", "lambda = -1"))
    assert main(["solve-vi", "--config", str(cfg)]) == 2
    assert "out of range" in capsys.readouterr().err


def test_bad_expression_is_config_error(tmp_path, capsys):
    cfg = write(tmp_path, SOLVE.replace("u^3 + u - 1", "u^3 + (u"))
    assert main(["solve-vi", "--config", str(cfg)]) == 2
    assert "offset" in capsys.readouterr().err


def test_nonmonotone_density_is_solver_error(tmp_path, capsys):
    cfg = write(tmp_path, SOLVE.replace("u^3 + u - 1", "-u^3"))
    assert main(["solve-vi", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err.strip()
    assert err.startswith("vishape: solver error [fem]:")


def test_missing_file(tmp_path):
    assert main(["solve-vi", "--config", str(tmp_path / "nope.ini")]) == 2


def test_demos_all_validate():
    demos = list_demos()
    assert len(demos) == 7
    for path in demos.values():
        cfg = load_config(path)
        validate(cfg, cfg.command)


def test_validate_unknown_command(tmp_path):
    with pytest.raises(ConfigError):
        validate(load_config(write(tmp_path, SOLVE)), "frobnicate")


def test_list_demos(capsys):
    assert main(["list-demos"]) == 0
    assert "damage-run" in capsys.readouterr().out


def test_unknown_demo(capsys):
    assert main(["demo", "nope"]) == 2


def test_to_json_deterministic():
    assert to_json({"b": 0.1, "a": [1, float("inf"), True, None]}) == \
        '{"a": [1, "inf", true, null], "b": 0.10000000000000001}'


def test_material_demo_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["demo", "material-derivative", "--out", str(a)]) == 0
    assert main(["demo", "material-derivative", "--out", str(b)]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()
    info = json.loads((a / "material.json").read_text())
    assert info["monotone"] and info["cone_ok"]
