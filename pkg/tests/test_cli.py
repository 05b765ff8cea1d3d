import json
import os

import pytest
from typer.testing import CliRunner

from main import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_VERDICT_FAILED, app

runner = CliRunner()

CONCENTRATION = """\
n_factors = 2
seed = 11

[experiment]
count = 2000
"""

SIMULATE = """\
n_factors = 1
seed = 3

[[schedule.cycles]]
ergodic = 0.2
concentration = 0.1

[experiment]
count = 20
tau_end = 0.1
dtau = 0.05
"""

EXPANDING = """\
n_factors = 2

[schedule]
expansion_rate = 1.0

[[schedule.cycles]]
expansion = 1.0

[experiment]
count = 500
"""

WEP = """\
n_factors = 2

[experiment]
count = 200

[experiment.wep]
tau_end = 0.2
tau_points = 3
"""

LIPSCHITZ = """\
n_factors = 1

[experiment.lipschitz]
map = "concentration"
duration = 0.2
pairs = 200
refine_steps = 10
"""


@pytest.fixture(autouse=True)
def no_thread_env(monkeypatch):
    monkeypatch.delenv("DCRM_THREADS", raising=False)


def invoke(tmp_path, command, text, out="out", *extra):
    config = tmp_path / f"{command}.toml"
    config.write_text(text, encoding="utf-8")
    target = tmp_path / out
    result = runner.invoke(app, [command, "--config", str(config), "--out", str(target), *extra])
    return result, target


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def leftover_staging(target):
    return [name for name in os.listdir(target) if name.startswith(".staging-")] if target.exists() else []


def test_simulate_writes_trajectory(tmp_path):
    result, out = invoke(tmp_path, "simulate", SIMULATE)
    assert result.exit_code == EXIT_OK
    assert sorted(os.listdir(out)) == ["manifest.json", "summary.json", "trajectory.csv"]
    summary = read_json(out / "summary.json")
    assert summary["verdicts"] == {}
    assert summary["metrics"]["t_end"] == pytest.approx(0.3)
    manifest = read_json(out / "manifest.json")
    assert manifest["run_id"] == summary["run_id"]
    assert manifest["files"] == ["trajectory.csv"]


def test_concentration_passes_and_is_reproducible(tmp_path):
    first, out_a = invoke(tmp_path, "concentration", CONCENTRATION, "a")
    second, out_b = invoke(tmp_path, "concentration", CONCENTRATION, "b", "--threads", "4")
    assert first.exit_code == EXIT_OK
    assert second.exit_code == EXIT_OK
    assert (out_a / "concentration.csv").read_bytes() == (out_b / "concentration.csv").read_bytes()
    assert read_json(out_a / "summary.json")["run_id"] == read_json(out_b / "summary.json")["run_id"]
    assert read_json(out_a / "summary.json")["passed"] is True


def test_seed_override_changes_run(tmp_path):
    base, out_a = invoke(tmp_path, "concentration", CONCENTRATION, "a")
    seeded, out_b = invoke(tmp_path, "concentration", CONCENTRATION, "b", "--seed", "12")
    assert base.exit_code == seeded.exit_code == EXIT_OK
    assert read_json(out_b / "manifest.json")["seed"] == 12
    assert read_json(out_a / "summary.json")["run_id"] != read_json(out_b / "summary.json")["run_id"]


def test_failed_verdict_exits_one(tmp_path):
    result, out = invoke(tmp_path, "reduction", EXPANDING)
    assert result.exit_code == EXIT_VERDICT_FAILED
    summary = read_json(out / "summary.json")
    assert summary["verdicts"] == {"reduction": False}
    assert summary["metrics"]["predicted_ratio"] == 1.0


def test_wep_run(tmp_path):
    result, out = invoke(tmp_path, "wep", WEP)
    assert result.exit_code == EXIT_OK
    assert (out / "wep.csv").exists()
    assert read_json(out / "summary.json")["verdicts"] == {"wep": True}


def test_lipschitz_run(tmp_path):
    result, out = invoke(tmp_path, "lipschitz", LIPSCHITZ)
    assert result.exit_code == EXIT_OK
    summary = read_json(out / "summary.json")
    assert summary["metrics"]["pairs_tested"] == 200
    assert summary["metrics"]["estimate"] <= 1.0


def test_unknown_key_exits_two(tmp_path):
    result, out = invoke(tmp_path, "concentration", "n_factors = 2\nsed = 1\n")
    assert result.exit_code == EXIT_CONFIG_ERROR
    assert not out.exists()


def test_missing_config_exits_two(tmp_path):
    result = runner.invoke(app, ["simulate", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_domain_error_in_config_exits_two(tmp_path):
    text = "n_factors = 1\nt_horizon = 2.0\n[[schedule.cycles]]\nergodic = 1.0\n"
    result, out = invoke(tmp_path, "simulate", text)
    assert result.exit_code == EXIT_CONFIG_ERROR
    assert leftover_staging(out) == []


def test_runtime_error_exits_three_without_partial_files(tmp_path):
    text = "n_factors = 1\n[experiment]\ncount = 10\n"
    result, out = invoke(tmp_path, "concentration", text)
    assert result.exit_code == EXIT_RUNTIME_ERROR
    assert os.listdir(out) == []


@pytest.mark.parametrize("command, text", [
    ("concentration", "n_factors = 1\n[measure]\nmean = [0.0, 0.0, 0.0]\n"),
    ("wep", "n_factors = 2\n[experiment.wep.h]\nkind = \"piecewise\"\nbreakpoints = [0.5]\n"),
    ("wep", "n_factors = 4\n[experiment.wep]\nn_a = 2\nn_b = 3\n"),
])
def test_invalid_shapes_exit_two(tmp_path, command, text):
    result, out = invoke(tmp_path, command, text)
    assert result.exit_code == EXIT_CONFIG_ERROR
    assert "Traceback" not in result.output
    assert leftover_staging(out) == []


def test_expansion_map_fails_certification(tmp_path):
    text = LIPSCHITZ.replace('map = "concentration"', 'map = "expansion"')
    result, out = invoke(tmp_path, "lipschitz", text)
    assert result.exit_code == EXIT_VERDICT_FAILED
    summary = read_json(out / "summary.json")
    assert summary["verdicts"] == {"lipschitz": False}
    assert summary["metrics"]["estimate"] > 1.0
