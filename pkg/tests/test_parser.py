import json
import math

import pytest

from core.errors import TraceFormatError
from core.parser import TRACE_HEADER, TraceParser, TraceWriter, format_float, write_atomic, write_json
from models.data_classes import TraceRecord

HEADER_LINE = "step,epoch,loss,val_error,log10_kappa,eta_used,grad_ortho_residual,weight_ortho_residual,svd_failures"


def record(step, kappa=1.5, failures=0):
    return TraceRecord(
        step=step,
        epoch=1,
        loss=0.6931471805599453,
        val_error=33.333333333333336,
        log10_kappa=kappa,
        eta_used=0.1,
        grad_ortho_residual=math.nan,
        weight_ortho_residual=2.5e-15,
        svd_failures=failures,
    )


def test_format_float():
    assert format_float(1 / 3) == "0.333333333"
    assert format_float(math.inf) == "inf"
    assert format_float(-math.inf) == "-inf"
    assert format_float(math.nan) == "nan"
    assert format_float(2.5e-15) == "2.5e-15"


def test_render_layout():
    text = TraceWriter().render([record(10), record(20, kappa=math.inf, failures=1)])
    lines = text.splitlines()
    assert lines[0] == HEADER_LINE
    assert lines[1] == "10,1,0.693147181,33.3333333,1.5,0.1,nan,2.5e-15,0"
    assert lines[2] == "20,1,0.693147181,33.3333333,inf,0.1,nan,2.5e-15,1"
    assert text.endswith("\n")


def test_parse_what_was_written(tmp_path):
    path = tmp_path / "seed_0.csv"
    TraceWriter().write(path, [record(10), record(20, kappa=math.inf, failures=1)])
    records = TraceParser().parse_file(path)
    assert [r.step for r in records] == [10, 20]
    assert records[1].log10_kappa == math.inf
    assert math.isnan(records[0].grad_ortho_residual)
    assert records[0].loss == pytest.approx(0.693147181)
    assert records[1].svd_failures == 1


@pytest.mark.parametrize("content,line", [
    ("step,epoch\n1,1\n", 1),
    ("", 1),
    (HEADER_LINE + "\n1,1,0.5,10,1,0.1,0,0,0\n2,1,0.5,10\n", 3),
    (HEADER_LINE + "\n1,1,0.5,10,abc,0.1,0,0,0\n", 2),
    (HEADER_LINE + "\n1.5,1,0.5,10,1,0.1,0,0,0\n", 2),
    (HEADER_LINE + "\n4,1,0.5,10,1,0.1,0,0,0\n4,1,0.5,10,1,0.1,0,0,0\n", 3),
])
def test_malformed_files(tmp_path, content, line):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(TraceFormatError) as excinfo:
        TraceParser().parse_file(path)
    assert excinfo.value.line == line
    assert str(excinfo.value).startswith(f"{path}:{line}:")


def test_parse_directory_groups_by_subdirectory(tmp_path):
    writer = TraceWriter()
    writer.write(tmp_path / "none" / "seed_0.csv", [record(1)])
    writer.write(tmp_path / "none" / "seed_1.csv", [record(1), record(2)])
    writer.write(tmp_path / "ow" / "seed_0.csv", [record(1)])
    writer.write(tmp_path / "loose.csv", [record(1)])
    (tmp_path / "summary.json").write_text("{}")
    groups = TraceParser().parse_directory(tmp_path)
    assert sorted(groups) == [".", "none", "ow"]
    assert sorted(groups["none"]) == ["seed_0.csv", "seed_1.csv"]
    assert len(groups["none"]["seed_1.csv"]) == 2


def test_parse_directory_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        TraceParser().parse_directory(tmp_path / "absent")


def test_write_json_is_sorted_and_strict(tmp_path):
    path = tmp_path / "out" / "summary.json"
    write_json(path, {"b": math.inf, "a": [1.0, math.nan], "c": {"z": 1, "y": 2}})
    text = path.read_text()
    assert json.loads(text) == {"a": [1.0, "nan"], "b": "inf", "c": {"y": 2, "z": 1}}
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert text.index('"y"') < text.index('"z"')


def test_write_atomic_leaves_no_temporary(tmp_path):
    path = tmp_path / "trace.csv"
    write_atomic(path, "first\n")
    write_atomic(path, "second\n")
    assert path.read_text() == "second\n"
    assert [p.name for p in tmp_path.iterdir()] == ["trace.csv"]


def test_header_constant_matches_file_format():
    assert ",".join(TRACE_HEADER) == HEADER_LINE
