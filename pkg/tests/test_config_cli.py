import json

import numpy as np
import pytest

from spinpair import cli
from spinpair.config import apply_overrides, example_config_text, load_config, parse_config, validate_text
from spinpair.errors import ConfigurationError, NumericError

DEFAULT = example_config_text()


def _line_of(text, needle):
    return next(i for i, line in enumerate(text.splitlines(), 1) if needle in line)


def test_default_config_is_clean():
    assert validate_text(DEFAULT) == []
    cfg = load_config()
    assert cfg.noise is not None and cfg.protocol == "odmr"
    assert cfg.system.t1_electron == pytest.approx(1.3e-4)


def test_negative_t1_reported_once_at_its_key():
    text = DEFAULT.replace("t1_electron: 1.30e-4", "t1_electron: -1.0")
    problems = validate_text(text)
    assert len(problems) == 1
    key, _, line = problems[0]
    assert key == "system.t1_electron"
    assert line == _line_of(text, "t1_electron")


def test_unknown_protocol_reported_once():
    problems = validate_text(DEFAULT.replace("protocol: odmr", "protocol: ramsey"))
    assert len(problems) == 1 and problems[0][0] == "protocol"


def test_several_problems_collected_together():
    text = DEFAULT.replace("shots: 2000", "shots: -5").replace("contrast: 0.3", "contrast: 2.0")
    keys = {p[0] for p in validate_text(text)}
    assert {"shots", "system.readout.contrast"} <= keys


def test_unknown_key_and_bad_yaml():
    assert validate_text(DEFAULT + "\nbogus: 1\n")[0][0] == "bogus"
    with pytest.raises(ConfigurationError):
        parse_config("seed: [1,\n")


def test_overrides_apply():
    cfg = parse_config(apply_overrides(DEFAULT, ["noise.enabled=false", "protocols.cpmg.n_pulses=16", "seed=7"]))
    assert cfg.noise is None and cfg.seed == 7
    assert cfg.protocol_params("cpmg")["n_pulses"] == 16
    with pytest.raises(ConfigurationError):
        apply_overrides(DEFAULT, ["no_equals_sign"])


# -- command line -------------------------------------------------------------------------


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


ODMR = ("odmr", "--points", "20", "--shots", "200", "--noise", "off")


def test_odmr_run_writes_artifacts(tmp_path, capsys):
    code, out, _ = _run(capsys, *ODMR, "--out", str(tmp_path))
    assert code == 0
    payload = json.loads(out)
    assert payload["status"] == "ok" and payload["protocol"] == "odmr"
    run_dir = tmp_path / "odmr"
    assert {p.name for p in run_dir.iterdir()} == {"data.csv", "fit.json", "manifest.txt", "plot.svg"}
    manifest = (run_dir / "manifest.txt").read_text()
    assert "protocol: odmr" in manifest and "figure: 1f" in manifest and "seed: 0" in manifest
    assert "<svg" in (run_dir / "plot.svg").read_text()


def test_identical_inputs_give_identical_csv(tmp_path, capsys):
    for sub in ("a", "b"):
        assert _run(capsys, *ODMR, "--seed", "5", "--out", str(tmp_path / sub))[0] == 0
    assert (tmp_path / "a/odmr/data.csv").read_bytes() == (tmp_path / "b/odmr/data.csv").read_bytes()


def test_different_seed_changes_counts(tmp_path, capsys):
    for seed in ("1", "2"):
        _run(capsys, *ODMR, "--seed", seed, "--out", str(tmp_path / seed))
    assert (tmp_path / "1/odmr/data.csv").read_bytes() != (tmp_path / "2/odmr/data.csv").read_bytes()


def test_config_error_exit_code_and_json(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(DEFAULT.replace("t1_electron: 1.30e-4", "t1_electron: -1.0"))
    code, _, err = _run(capsys, "odmr", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2
    payload = json.loads(err)
    assert payload["category"] == "config"
    assert payload["violations"][0]["key"] == "system.t1_electron"
    assert payload["violations"][0]["line"] == _line_of(bad.read_text(), "t1_electron")


def test_numeric_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(cfg):
        raise NumericError("quadrature did not converge")

    monkeypatch.setitem(cli.COMMANDS, "odmr", boom)
    code, _, err = _run(capsys, *ODMR, "--out", str(tmp_path))
    assert code == 3
    assert json.loads(err)["category"] == "numeric"


def test_validate_subcommand(tmp_path, capsys):
    assert _run(capsys, "validate")[0] == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(DEFAULT.replace("protocol: odmr", "protocol: ramsey"))
    code, out, _ = _run(capsys, "validate", str(bad))
    assert code == 0 and "protocol" in out
    assert _run(capsys, "validate", str(bad), "--strict")[0] == 2


def test_example_config_round_trip(capsys):
    code, out, _ = _run(capsys, "example-config")
    assert code == 0 and validate_text(out) == []


def test_cpmg_workers_do_not_change_output(tmp_path, capsys):
    common = ("cpmg", "--n", "2", "--points", "4", "--trajectories", "24", "--shots", "100")
    for w in ("1", "2"):
        assert _run(capsys, *common, "--workers", w, "--out", str(tmp_path / w))[0] == 0
    a, b = (tmp_path / "1/cpmg_2/data.csv").read_bytes(), (tmp_path / "2/cpmg_2/data.csv").read_bytes()
    assert a == b
    summary = json.loads((tmp_path / "1/cpmg_2/fit.json").read_text())
    assert np.isfinite(summary["t2_us"]) and summary["t2_analytic_us"] > 0
