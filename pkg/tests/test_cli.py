import csv
import json
import os

import pytest

from zrplab.cli import (
    RESULT_COLUMNS,
    Results,
    RunConfig,
    emit_outputs,
    main,
    read_config_file,
    resolve_config,
)
from zrplab.errors import ConfigurationError


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# a comment\nrho = 0.5\nobservers = 0, 0.25  # trailing\n\ncontrol = yes\nreplicas = 12\n")
    vals = read_config_file(p)
    assert vals == {"rho": 0.5, "observers": [0.0, 0.25], "control": True, "replicas": 12}


@pytest.mark.parametrize("text", ["rho 1\n", "colour = red\n", "replicas = 1.5\n", "control = maybe\n"])
def test_bad_config_file(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigurationError):
        read_config_file(p)


def test_precedence_defaults_file_flags(monkeypatch):
    monkeypatch.delenv("ZRPLAB_OUT_DIR", raising=False)
    cfg = resolve_config("verify", {"replicas": 50, "rho": 0.5}, {"rho": "2", "seed": None})
    assert cfg.replicas == 50 and cfg.rho == 2.0 and cfg.t == 200.0
    assert cfg.out_dir == "zrplab_out" and cfg.experiment == "verify"
    assert resolve_config("twopoint", {}, {}).margin_factor == 20.0


def test_out_dir_from_environment(monkeypatch):
    monkeypatch.setenv("ZRPLAB_OUT_DIR", "/tmp/somewhere")
    assert resolve_config("simulate", {}, {}).out_dir == "/tmp/somewhere"
    assert resolve_config("simulate", {}, {"out_dir": "x"}).out_dir == "x"


@pytest.mark.parametrize("flags", [{"replicas": "0"}, {"rho": "-1"}, {"margin_factor": "0.5"}, {"workers": "0"}])
def test_invalid_resolved_values(flags):
    with pytest.raises(ConfigurationError):
        resolve_config("simulate", {}, flags)


def test_empty_results_write_headers_only(tmp_path):
    res = Results(RunConfig())
    emit_outputs(res, tmp_path)
    assert (tmp_path / "results.csv").read_text() == ",".join(RESULT_COLUMNS) + "\n"
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pass"] is True and report["criteria"] == []
    assert not (tmp_path / "plotdata").exists()
    assert "rho = 1\n" in (tmp_path / "config.txt").read_text()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["bogus"]) == 2
    assert main(["simulate", "--rho", "-1", "--out-dir", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["offchar", "--V", "0.25", "--t", "10", "--replicas", "5", "--out-dir", str(tmp_path)]) == 2


def test_simulate_writes_outputs(tmp_path):
    out = tmp_path / "sim"
    code = main(["simulate", "--kind", "muhat_pair", "--rho", "1", "--horizon", "10",
                 "--checkpoints", "5,10", "--observers", "0", "--replicas", "20", "--seed", "3",
                 "--out-dir", str(out)])
    assert code == 0
    rows = _rows(out / "results.csv")
    assert {r["experiment"] for r in rows} == {"current[config=0]", "current[config=1]", "defect[Q_a]"}
    assert len(rows) == 6 and all(r["seed"] == "3" for r in rows)
    cfg = (out / "config.txt").read_text()
    assert "checkpoints = 5,10\n" in cfg and "replicas = 20\n" in cfg
    report = json.loads((out / "report.json").read_text())
    assert report["pass"] and [c["name"] for c in report["criteria"]] == ["truncation_aborts", "coupling_violations"]


def test_simulate_is_byte_identical(tmp_path):
    args = ["simulate", "--kind", "three_process", "--rho", "1", "--lam", "0.5", "--horizon", "8",
            "--replicas", "10", "--seed", "5"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    for f in ("results.csv", "report.json", "config.txt"):
        a = (tmp_path / "a" / f).read_bytes()
        b = (tmp_path / "b" / f).read_bytes().replace(b"/b", b"/a")
        assert a == b


def test_verify_reports_three_checks(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "--rho", "0", "--t", "5", "--replicas", "50", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["criteria"]) == 3 and report["pass"]


def test_scaling_writes_plot_data(tmp_path):
    out = tmp_path / "s"
    code = main(["scaling", "--rho", "0", "--m", "1", "--t-grid", "4,8,16,32", "--replicas", "200",
                 "--out-dir", str(out)])
    # at zero density the first moment grows like sqrt(t): outside the band, so the check fails
    assert code == 1
    lines = (out / "plotdata" / "moment_m1.csv").read_text().splitlines()
    assert lines[0] == "log_t,log_estimate" and len(lines) == 5
    report = json.loads((out / "report.json").read_text())
    assert report["fits"][0]["slope"] == pytest.approx(0.5, abs=0.1)


def test_tasep_command(tmp_path):
    out = tmp_path / "tasep"
    code = main(["tasep", "--alpha", "0.5", "--particles", "10", "--horizon", "3",
                 "--bijection-replicas", "3", "--out-dir", str(out)])
    assert code == 0
    rows = _rows(out / "results.csv")
    assert rows[0]["experiment"] == "tasep_bijection_mismatches" and rows[0]["estimate"] == "0"


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["simulate", "--kind", "stationary", "--horizon", "1", "--replicas", "1",
                 "--out-dir", str(blocker / "sub")])
    assert code == 1


def test_segment_command_with_control(tmp_path):
    out = tmp_path / "l"
    code = main(["lemma41", "--t", "20", "--replicas", "200", "--control", "--seed", "2", "--out-dir", str(out)])
    report = json.loads((out / "report.json").read_text())
    names = [c["name"] for c in report["criteria"]]
    assert names == ["lemma41[V=0.25]", "lemma41_control[V=0.25]"]
    assert report["criteria"][0]["pass"]
    assert code == (0 if report["pass"] else 1)
