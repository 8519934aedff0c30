import logging

import pytest

from core.parser import TraceWriter
from core.report import CHART_NAME
from main import EXIT_CHECK_FAILED, EXIT_INPUT_ERROR, EXIT_OK, build_parser, main

pytestmark = pytest.mark.usefixtures("restore_logging")


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--dims", "2", "--seeds", "1", "--check", "meta_sqrt", "--check", "ortho_loss"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "meta_sqrt" in out
    assert "2 of 8 registered checks executed, 2 cases" in out


def test_gradcheck_zero_tolerance_fails(capsys):
    code = main(["gradcheck", "--dims", "2", "--seeds", "1", "--tol", "0", "--check", "meta_sqrt"])
    assert code == EXIT_CHECK_FAILED
    assert "FAILED: meta_sqrt" in capsys.readouterr().out


def test_gradcheck_rejects_large_dimension():
    assert main(["gradcheck", "--dims", "32", "--check", "ortho_loss"]) == EXIT_INPUT_ERROR


@pytest.mark.parametrize("argv", [
    ["report"],
    ["gradcheck", "--dims", "two"],
    ["gradcheck", "--seeds", "0"],
    ["gradcheck", "--check", "unknown"],
    ["frobnicate"],
])
def test_argument_errors_exit_with_usage(argv):
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(argv)
    assert excinfo.value.code == 2


def test_report_missing_directory(tmp_path):
    assert main(["report", "--dir", str(tmp_path / "absent")]) == EXIT_INPUT_ERROR


def test_report_empty_directory(tmp_path):
    assert main(["report", "--dir", str(tmp_path)]) == EXIT_INPUT_ERROR


def test_report_malformed_trace(tmp_path):
    (tmp_path / "none").mkdir()
    (tmp_path / "none" / "seed_0.csv").write_text("step,loss\n1,0.5\n")
    assert main(["report", "--dir", str(tmp_path)]) == EXIT_INPUT_ERROR


def test_report_prints_table(tmp_path, capsys):
    TraceWriter().write(tmp_path / "none" / "seed_0.csv", [])
    assert main(["report", "--dir", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("policy")


def test_run_with_invalid_config(write_config):
    path = write_config({"schema_version": 1, "policy": "sn+ow"})
    assert main(["run", "--config", str(path)]) == EXIT_INPUT_ERROR


def test_run_with_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == EXIT_INPUT_ERROR


def test_run_then_report(tmp_path, write_config, monkeypatch, capsys):
    monkeypatch.delenv("ORTHOCOND_SEED_OVERRIDE", raising=False)
    out = tmp_path / "runs"
    path = write_config({
        "schema_version": 1,
        "d": 4,
        "classes": 2,
        "samples_per_class": 20,
        "batch_size": 8,
        "epochs": 1,
        "trace_interval": 2,
        "policy": ["none", "nog", "ow"],
        "seeds": [0],
        "output_dir": str(out),
        "log_level": "warning",
    })
    assert main(["run", "--config", str(path)]) == EXIT_OK
    assert (out / "summary.json").exists()

    assert main(["report", "--dir", str(out), "--chart"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "OW < NOG < none:" in printed
    assert (out / CHART_NAME).exists()


@pytest.mark.parametrize("flag,expected", [([], logging.WARNING), (["--log-level", "INFO"], logging.INFO)])
def test_log_level_flag_overrides_config(tmp_path, write_config, monkeypatch, flag, expected):
    monkeypatch.delenv("ORTHOCOND_SEED_OVERRIDE", raising=False)
    path = write_config({
        "schema_version": 1,
        "d": 4,
        "classes": 2,
        "samples_per_class": 20,
        "batch_size": 8,
        "epochs": 1,
        "policy": ["none"],
        "seeds": [0],
        "output_dir": str(tmp_path / "runs"),
        "log_level": "warning",
    })
    assert main([*flag, "run", "--config", str(path)]) == EXIT_OK
    assert logging.getLogger().level == expected


def test_log_level_defaults_to_unset():
    assert build_parser().parse_args(["report", "--dir", "x"]).log_level is None
