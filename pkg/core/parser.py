import csv
import io
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable

from core.errors import TraceFormatError
from models.data_classes import TraceRecord

logger = logging.getLogger(__name__)

TRACE_HEADER = (
    "step",
    "epoch",
    "loss",
    "val_error",
    "log10_kappa",
    "eta_used",
    "grad_ortho_residual",
    "weight_ortho_residual",
    "svd_failures",
)
INT_FIELDS = frozenset({"step", "epoch", "svd_failures"})


def format_float(value: float) -> str:
    """9 significant digits; infinities as inf / -inf and NaN as nan."""
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".9g")


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return format_float(value)
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_atomic(path: str | Path, text: str) -> None:
    """Write text to a temporary sibling and rename it over path.

    Raises:
        OSError: the directory is not writable; the temporary file is removed.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp_file = target.with_name(target.name + ".tmp")
    try:
        with open(temp_file, "w", newline="") as f:
            f.write(text)
        os.replace(temp_file, target)
        logger.debug("Wrote %s", target)
    except OSError:
        if temp_file.exists():
            temp_file.unlink()
        raise


def write_json(path: str | Path, data: Any) -> None:
    """Deterministic JSON: sorted keys, non-finite floats as strings."""
    write_atomic(path, json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


class TraceWriter:
    """Serializes conditioning traces as CSV"""

    def render(self, records: Iterable[TraceRecord]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for record in records:
            writer.writerow([
                str(getattr(record, name)) if name in INT_FIELDS else format_float(float(getattr(record, name)))
                for name in TRACE_HEADER
            ])
        return buffer.getvalue()

    def write(self, path: str | Path, records: Iterable[TraceRecord]) -> None:
        write_atomic(path, self.render(records))


class TraceParser:
    """Parses trace CSV files written by TraceWriter"""

    def parse_row(self, path: str, line_number: int, row: list[str]) -> TraceRecord:
        if len(row) != len(TRACE_HEADER):
            raise TraceFormatError(path, line_number, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
        values: dict[str, Any] = {}
        for name, raw in zip(TRACE_HEADER, row):
            try:
                values[name] = int(raw) if name in INT_FIELDS else float(raw)
            except ValueError:
                raise TraceFormatError(path, line_number, f"bad value {raw!r} for {name}") from None
        return TraceRecord(**values)

    def parse_file(self, file_path: str | Path) -> list[TraceRecord]:
        """Parse one trace file.

        Raises:
            TraceFormatError: wrong header, field count or value.
            OSError: the file cannot be read.
        """
        path = str(file_path)
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_HEADER:
                raise TraceFormatError(path, 1, "header does not match the trace format")
            records = []
            for row in reader:
                if not row:
                    continue
                record = self.parse_row(path, reader.line_num, row)
                if records and record.step <= records[-1].step:
                    raise TraceFormatError(path, reader.line_num, "step index is not increasing")
                records.append(record)
        logger.debug("Parsed %d records from %s", len(records), path)
        return records

    def parse_directory(self, root: str | Path) -> dict[str, dict[str, list[TraceRecord]]]:
        """Parse every *.csv below root, grouped by parent directory relative to root.

        Files directly in root form the group ".".
        """
        base = Path(root)
        if not base.is_dir():
            raise FileNotFoundError(f"trace directory not found: {base}")
        groups: dict[str, dict[str, list[TraceRecord]]] = {}
        for path in sorted(base.rglob("*.csv")):
            group = path.parent.relative_to(base).as_posix()
            groups.setdefault(group, {})[path.name] = self.parse_file(path)
        return groups
