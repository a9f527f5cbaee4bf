import json
from pathlib import Path

import numpy as np
import pytest

from gcrb_radar.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from gcrb_radar.config import ConfigDocument, ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = CONFIGS / "small_validate.toml"
REFERENCE_CFG = CONFIGS / "reference.toml"

MINIMAL = """
[stations]
num_tx = 2
num_rx = 3

[target]
position_m = [15150.0, 10127.5]
velocity_mps = [50.0, 30.0]
"""


def test_reference_config_builds_reference_scenario():
    doc = ConfigDocument.load(REFERENCE_CFG)
    sc = doc.scenario()
    assert sc.truth.as_array().tolist() == [15150.0, 10127.5, 50.0, 30.0]
    assert sc.num_tx == 2 and sc.num_rx == 3
    assert sc.gmsk.num_samples == 64
    np.testing.assert_allclose(sc.layout.rx_positions[0], [22000.0, 10000.0])
    assert np.isinf(sc.reflection.decay) and np.isinf(sc.noise.decay)
    plan = doc.plan()
    assert plan.trials == 200 and plan.bit_draws == 50 and plan.mismatch_variance == 0.0
    assert doc.plan(mismatch=True).mismatch_variance == 0.1
    assert doc.search().grid == (21, 21, 11, 11)


def test_round_trip_is_stable():
    doc = ConfigDocument.load(REFERENCE_CFG)
    again = ConfigDocument.parse(doc.to_toml())
    assert again.data == doc.data
    assert again.to_toml() == doc.to_toml()
    assert again.sha256() == doc.sha256()


def test_km_and_m_agree():
    km = ConfigDocument.parse(MINIMAL.replace("position_m = [15150.0, 10127.5]", "position_km = [15.15, 10.1275]"))
    m = ConfigDocument.parse(MINIMAL)
    assert km.data == m.data


def test_defaults_filled():
    doc = ConfigDocument.parse(MINIMAL)
    assert doc.data["waveform"]["freq_offset_hz"] == 300.0
    assert doc.search().x_range == (14500.0, 15500.0)
    assert doc.seed == 0


def test_unknown_key_reports_line():
    text = MINIMAL + "\n[waveform]\nnum_bits = 16\nbogus_key = 3\n"
    with pytest.raises(ConfigError, match=r"unknown key 'waveform.bogus_key' \(line 12\)"):
        ConfigDocument.parse(text)


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r"unknown section \[extra\] \(line 10\)"):
        ConfigDocument.parse(MINIMAL + "\n[extra]\nx = 1\n")


def test_missing_required_key_is_named():
    with pytest.raises(ConfigError, match="target.velocity_mps"):
        ConfigDocument.parse(MINIMAL.replace("velocity_mps = [50.0, 30.0]", ""))


@pytest.mark.parametrize("text,match", [
    (MINIMAL.replace("num_tx = 2", "num_tx = 0"), "num_tx"),
    (MINIMAL + "[search]\ngrid = [3, 3]\n", "four"),
    (MINIMAL + "[experiment]\nseries_var = 'speed'\n", "series_var"),
    (MINIMAL + "[waveform]\nnum_bits = 'many'\n", "integer"),
    ("[stations\n", "invalid TOML"),
    (MINIMAL.replace("[target]", "[target]\nposition_km = [15.0, 10.0]"), "twice"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        ConfigDocument.parse(text)


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(MINIMAL + "\n[noise]\nwrong = 1\n")
    assert main(["crb", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "line" in capsys.readouterr().err
    assert main(["crb", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert main(["crb", "--config", str(SMALL), "--threads", "0"]) == EXIT_CONFIG


def test_cli_numerical_error(tmp_path, capsys):
    cfg = tmp_path / "corr.toml"
    # an almost-constant noise correlation across receivers is not positive definite in floating point
    cfg.write_text(MINIMAL + "\n[noise]\ndecay_per_m = 1e-30\n")
    assert main(["crb", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_cli_crb_outputs(tmp_path):
    out = tmp_path / "crb"
    assert main(["crb", "--config", str(REFERENCE_CFG), "--out", str(out)]) == EXIT_OK
    assert (out / "crb.csv").read_text().startswith("block,i,j,value\n")
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "crb" and man["seed"] == 2024
    assert man["config_sha256"] == ConfigDocument.load(REFERENCE_CFG).sha256()
    assert "sqrt CRB x" in (out / "summary.txt").read_text()
    assert ConfigDocument.load(out / "config.toml").data == ConfigDocument.load(REFERENCE_CFG).data


def test_cli_seed_override(tmp_path):
    assert main(["ecrbob", "--config", str(SMALL), "--out", str(tmp_path / "a"), "--seed", "3"]) == EXIT_OK
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 3


def test_cli_validate_and_mle(tmp_path):
    assert main(["validate", "--config", str(SMALL), "--out", str(tmp_path / "v")]) == EXIT_OK
    rows = (tmp_path / "v" / "validate.csv").read_text().splitlines()
    assert rows[0] == "check,value,tolerance,passed"
    assert all(r.endswith(",pass") for r in rows[1:])
    assert main(["mle", "--config", str(SMALL), "--out", str(tmp_path / "m")]) == EXIT_OK
    assert "inside search box: True" in (tmp_path / "m" / "summary.txt").read_text()


def test_cli_validate_failure_exit_code(tmp_path, monkeypatch):
    from gcrb_radar import cli
    from gcrb_radar.validation import CheckResult

    monkeypatch.setattr(cli, "run_validation_suite", lambda *a, **k: [CheckResult("forced", 1.0, 0.5, False)])
    assert main(["validate", "--config", str(SMALL), "--out", str(tmp_path / "v")]) == EXIT_VALIDATION


def test_cli_sweep_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["sweep", "--config", str(SMALL), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("sweep.csv", "summary.txt", "manifest.json", "config.toml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
