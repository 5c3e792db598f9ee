import copy
import json

import pytest

from visservo import cli, harness
from visservo.acceptance import NOMINAL


def _write(tmp_path, **changes):
    data = copy.deepcopy(NOMINAL)
    data["run"]["duration"] = 4.0
    data["guidance"]["enabled"] = False
    for section, values in changes.items():
        data.setdefault(section, {}).update(values)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return p


def test_run_writes_outputs(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == cli.EXIT_OK
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["status"] in ("converged", "not-converged")
    log = harness.read_epochs(tmp_path / "out" / "epochs.csv")
    assert len(log) == 40
    assert harness.read_summary(tmp_path / "out" / "summary.json")["epochs"] == 40


def test_config_error_exit(tmp_path, capsys):
    cfg = _write(tmp_path, run={"dt": -1.0})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_exit(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_no_solution_exit(tmp_path, monkeypatch):
    def fail(*a, **k):
        raise harness.gd.NoSolution("forced")

    monkeypatch.setattr(harness.gd, "solve", fail)
    cfg = _write(tmp_path, guidance={"enabled": True})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_NO_SOLUTION
    assert harness.read_summary(tmp_path / "o" / "summary.json")["status"] == "no-solution"


def test_unwritable_output(tmp_path):
    cfg = _write(tmp_path)
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert cli.main(["run", "--config", str(cfg), "--out", str(blocker / "x")]) == cli.EXIT_FAIL


def test_mc(tmp_path, capsys):
    cfg = _write(tmp_path, cloud={"sensor": "pose"}, run={"duration": 1.0})
    assert cli.main(["mc", "--config", str(cfg), "--trials", "2", "--out", str(tmp_path / "mc")]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["trials"] == 2 and out["sigma_violations"] == 0
    assert (tmp_path / "mc" / "trial_0001" / "summary.json").is_file()


def test_mc_rejects_zero_trials(tmp_path):
    cfg = _write(tmp_path)
    assert cli.main(["mc", "--config", str(cfg), "--trials", "0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_verify_subset(capsys):
    assert cli.main(["verify", "3"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "[PASS] 3." in out and "1/1 criteria passed" in out


def test_verify_reports_failure(monkeypatch, capsys):
    from visservo import acceptance

    failing = acceptance.CriterionResult(99, "forced", False, "always fails")
    monkeypatch.setitem(acceptance.CHECKS, 99, lambda: failing)
    assert cli.main(["verify", "99"]) == cli.EXIT_FAIL
    assert "[FAIL] 99. forced" in capsys.readouterr().out


def test_verify_unknown_criterion(capsys):
    assert cli.main(["verify", "42"]) == cli.EXIT_CONFIG
    assert "unknown criteria [42]" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2
