import json
import os
import subprocess
import sys

import pytest

from mwdha import cli


def run_cli(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def strip_time(report):
    report = dict(report)
    report.pop("wall_time")
    return report


def test_ap_char_report(tmp_path, capsys):
    out = tmp_path / "r.json"
    code, _, _ = run_cli(["ap-char", "--weight", "power1d:0.5,-0.5", "--p", "2", "--level", "10",
                          "--out", str(out)], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["schema"] == 1 and rep["command"] == "ap-char"
    assert rep["config"]["weight"] == "power1d:0.5,-0.5"
    assert rep["config"]["lattice"]["L"] == 10
    # every default appears in the echo
    assert set(cli.DEFAULTS) <= set(rep["config"])
    assert set(cli.DEFAULTS["knobs"]) <= set(rep["config"]["knobs"])
    res = rep["results"]["ap_characteristic"]
    assert res["value"] > 1 and {"attaining_cube", "method", "distortion_bound", "truncation_deficit"} <= set(res)
    assert rep["passed"] and isinstance(rep["wall_time"], float)


@pytest.mark.parametrize("command", cli.COMMANDS)
def test_every_subcommand_runs(command, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lattice": {"L": 6}, "knobs": {"levels": [5, 6], "sample_count": 200}}))
    code, out, err = run_cli([command, "--config", str(cfg)], capsys)
    assert code in (0, 2), err
    rep = json.loads(out)
    assert rep["command"] == command and rep["schema"] == 1


def test_deterministic_modulo_wall_time(tmp_path, capsys):
    path = tmp_path / "a.json"
    reports = []
    for _ in range(2):
        assert run_cli(["norm-probe", "--level", "6", "--levels", "5,6", "--seed", "3", "--out", str(path)],
                       capsys)[0] == 0
        reports.append(json.loads(path.read_text()))
    ra, rb = reports
    assert strip_time(ra) == strip_time(rb)
    ra["wall_time"] = rb["wall_time"] = 0.0
    assert cli.dumps(ra) == cli.dumps(rb)


def test_report_round_trips(tmp_path, capsys):
    out = tmp_path / "r.json"
    run_cli(["t1", "--level", "6", "--out", str(out)], capsys)
    text = out.read_text()
    assert cli.dumps(json.loads(text)) == text


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"p": 3.0, "lattice": {"L": 5}, "weight": "identity"}))
    code, out, _ = run_cli(["ap-char", "--config", str(cfg), "--p", "1.5"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["config"]["p"] == 1.5 and rep["config"]["lattice"]["L"] == 5
    assert rep["results"]["ap_characteristic"]["value"] == pytest.approx(1.0)


@pytest.mark.parametrize("payload,path", [
    ({"lattice": {"L": "ten"}}, "lattice.L"),
    ({"knobs": {"bogus": 1}}, "knobs.bogus"),
    ({"nonsense": 1}, "nonsense"),
    ({"p": 0.5}, "p"),
])
def test_config_errors_name_field(tmp_path, capsys, payload, path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(payload))
    code, _, err = run_cli(["ap-char", "--config", str(cfg)], capsys)
    assert code == 1
    assert f"config error at {path}" in err


def test_missing_config_and_unknown_subcommand(tmp_path, capsys):
    code, _, err = run_cli(["ap-char", "--config", str(tmp_path / "none.json")], capsys)
    assert code == 1 and "does not exist" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 1


def test_unsupported_is_an_error(capsys):
    code, _, err = run_cli(["b2p", "--dim", "2", "--level", "3", "--weight", "identity"], capsys)
    assert code == 1 and "d = 1" in err


def test_advisory_failure_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lattice": {"L": 6}, "knobs": {"c_equiv": 1.0}}))
    code, out, _ = run_cli(["jn-equiv", "--config", str(cfg)], capsys)
    assert code == 2
    assert json.loads(out)["passed"] is False


def test_atomic_write_and_run_log(tmp_path, capsys):
    out = tmp_path / "r.json"
    out.write_text("old")
    log = tmp_path / "runs.jsonl"
    for _ in range(2):
        assert run_cli(["b2p", "--level", "6", "--out", str(out), "--run-log", str(log)], capsys)[0] == 0
    assert json.loads(out.read_text())["command"] == "b2p"
    lines = log.read_text().splitlines()
    assert len(lines) == 2 and all(json.loads(l)["command"] == "b2p" for l in lines)
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]


def test_console_entry_point(tmp_path):
    out = tmp_path / "r.json"
    proc = subprocess.run([sys.executable, "-m", "mwdha.cli", "b2p", "--level", "5", "--out", str(out)],
                          capture_output=True, text=True, env={**os.environ, "MWDHA_THREADS": "1"})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(out.read_text())["results"]["b2p_characteristic"]["value"] > 0
