import json
import subprocess
import sys

from fourfem.cli import ConfigError, main, parse_config
from fourfem.harness import read_study_csv
from fourfem.mesh import build_structured_square, save_mesh

import pytest

RUN_CONFIG = """\
[study]
name = bh
kind = biharmonic
scheme = dg          ; inline comments are allowed
levels = 2-3
solution = sin2
norms = energy_pw, L2

[params]
sigma1 = 20
sigma2 = 20
"""


def test_parse_config_fields(tmp_path):
    path = tmp_path / "bh.ini"
    path.write_text(RUN_CONFIG)
    cfg, extras = parse_config(path)
    assert cfg.levels == (2, 3) and cfg.scheme == "dg" and cfg.norms == ("energy_pw", "L2")
    assert cfg.params.sigma1 == 20.0 and cfg.output == str(tmp_path)
    assert extras == {}


def test_run_writes_outputs(tmp_path, capsys):
    path = tmp_path / "bh.ini"
    path.write_text(RUN_CONFIG)
    assert main(["run", "--config", str(path)]) == 0
    levels, rates = read_study_csv(tmp_path / "bh.csv")
    assert [r["level"] for r in levels] == [2, 3]
    data = json.loads((tmp_path / "bh.json").read_text())
    assert data["levels"][0]["newton"]["iterations"] == 1
    assert "energy_pw: rate" in capsys.readouterr().out


def test_compare_writes_outputs(tmp_path):
    path = tmp_path / "cmp.ini"
    path.write_text("[study]\nname = cmp\nkind = ns\nlevels = 2 3\nschemes = morley, c0ip\n")
    assert main(["compare", "--config", str(path)]) == 0
    data = json.loads((tmp_path / "cmp.json").read_text())
    assert set(data["levels"][0]["errors"]) == {"morley", "c0ip", "best_approx"}


def test_mesh_info(tmp_path, capsys):
    path = tmp_path / "m.txt"
    save_mesh(build_structured_square(2), path)
    assert main(["mesh-info", str(path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["vertices"] == 9 and info["triangles"] == 8


@pytest.mark.parametrize("text", [
    "[params]\nsigma1 = 1\n",
    "[study]\nbogus = 1\n",
    "[study]\nlevels = two\n",
    "[study]\nkind = stokes\n",
    "[study]\npoint_load = 0.5 0.5\n",
])
def test_bad_config_exit_code_and_json(tmp_path, capsys, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        parse_config(path)
    assert main(["run", "--config", str(path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and err["message"]


def test_missing_file_and_failed_study(tmp_path, capsys):
    assert main(["mesh-info", str(tmp_path / "none.txt")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"
    path = tmp_path / "fail.ini"
    path.write_text("[study]\nkind = ns\nlevels = 2\nmax_iter = 1\ntol = 1e-300\n")
    assert main(["run", "--config", str(path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "StudyError" and err["cause"] == "NewtonNotConverged"
    assert err["level"] == 2


def test_module_entry_point(tmp_path):
    path = tmp_path / "m.txt"
    save_mesh(build_structured_square(1), path)
    out = subprocess.run([sys.executable, "-m", "fourfem", "mesh-info", str(path)],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["triangles"] == 2
