import filecmp
import json

import pytest

from fluctlab.cli import OUTPUTS, cli_main, resolve_seed
from fluctlab.config import ConfigError, DEFAULT_CONFIG, build_setup, load_config, validate


def test_default_config_is_valid():
    cfg = load_config("default")
    validate(cfg)
    s = build_setup(cfg)
    assert s.grid.n_cells == 128 and s.noise.n_modes == 8 and s.cfg.t_end == 1.0


@pytest.mark.parametrize("doc, path", [
    ({"grid": {"n_cells": 1}}, "$.grid.n_cells"),
    ({"noise": {"state_factor": "cubic"}}, "$.noise.state_factor"),
    ({"experiment": {"eps_grid": [0.1, 2.0]}}, "$.experiment.eps_grid[1]"),
    ({"bogus": 1}, "$"),
    ({"experiment": {"eps_grid": [1e-3, 1e-2, 1e-1]}}, "$.experiment.eps_grid"),
])
def test_schema_errors_name_the_path(doc, path):
    with pytest.raises(ConfigError) as err:
        load_config(doc)
    assert path in str(err.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_seed_precedence(monkeypatch):
    cfg = load_config({"experiment": {"seed": 5}})
    monkeypatch.delenv("FLUCTLAB_SEED", raising=False)
    assert resolve_seed(None, cfg) == 5
    monkeypatch.setenv("FLUCTLAB_SEED", "11")
    assert resolve_seed(None, cfg) == 11
    assert resolve_seed(3, cfg) == 3
    monkeypatch.setenv("FLUCTLAB_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None, cfg)
    with pytest.raises(ConfigError):
        resolve_seed(-1, cfg)


def test_usage_errors_exit_2(tmp_path):
    assert cli_main(["frobnicate"]) == 2
    assert cli_main(["selftest", "--bogus"]) == 2
    assert cli_main([]) == 2
    assert cli_main(["selftest", "--config", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli_main(["selftest", "--replicates", "0", "--out", str(tmp_path / "o")]) == 2


def test_selftest_exits_zero(tmp_path, capsys):
    assert cli_main(["selftest", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    doc = json.loads((tmp_path / "selftest.json").read_text())
    assert doc["passed"] is True


def _small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps({"grid": {"n_cells": 32},
                             "experiment": {"eps_grid": [1e-1, 1e-2, 1e-3, 1e-4],
                                            "gap_eps_grid": [1e-1, 1e-2, 1e-3]}}))
    return str(p)


def test_scaling_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, par in ((a, "1"), (b, "3")):
        assert cli_main(["scaling", "--config", "default", "--seed", "7", "--replicates", "30",
                         "--parallel", par, "--out", str(out)]) == 0
    for name in OUTPUTS["scaling"] + ["manifest.json"]:
        assert filecmp.cmp(a / name, b / name, shallow=False), name
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest["outputs"]) == set(OUTPUTS["scaling"]) | {"timing.txt"}
    assert manifest["seed"] == 7
    for name in manifest["outputs"]:
        assert (a / name).exists()


@pytest.mark.parametrize("command", ["check-hyp", "skeleton", "rate", "clt", "gaps", "mdp"])
def test_every_command_writes_its_outputs(tmp_path, command):
    out = tmp_path / command
    code = cli_main([command, "--config", _small_config(tmp_path), "--replicates", "8",
                     "--out", str(out)])
    assert code == 0
    for name in OUTPUTS[command] + ["manifest.json", "timing.txt"]:
        assert (out / name).exists(), name


def test_rate_json_reports_event_rate(tmp_path):
    cfg = tmp_path / "add.json"
    cfg.write_text(json.dumps({"noise": {"state_factor": "additive"}}))
    assert cli_main(["rate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "rate.json").read_text())
    assert doc["I_F"] == pytest.approx(2.0, rel=1e-8)


def test_default_config_not_mutated():
    before = json.dumps(DEFAULT_CONFIG, sort_keys=True)
    cfg = load_config({"grid": {"n_cells": 16}})
    cfg["experiment"]["eps_grid"].append(1e-9)
    assert json.dumps(DEFAULT_CONFIG, sort_keys=True) == before
