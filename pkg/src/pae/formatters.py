"""Output formatters for reports and status records."""

import csv
import io
import math
from typing import Any, Mapping, Protocol, Sequence

from .errors import UsageError
from .model import ReportFormat


def format_value(value: Any) -> str:
    """Render one cell: floats in shortest round-trip form, enums by value."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return str(value)
        return repr(value)
    if hasattr(value, "value") and not isinstance(value, (int, str)):
        return str(value.value)
    return str(value)


def format_record(event: str, fields: Mapping[str, Any]) -> str:
    """Single-line ``event=<name> key=value ...`` status record."""
    parts = [f"event={event}"]
    for key, value in fields.items():
        text = format_value(value)
        if any(c.isspace() for c in text) or "=" in text or text == "":
            text = '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'
        parts.append(f"{key}={text}")
    return " ".join(parts)


class FormatterInterface(Protocol):
    """Protocol for tabular report formatters."""

    def format(self, columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
        """Render rows; every row is read in ``columns`` order."""
        ...


class CsvFormatter:
    """Comma-separated values with a header row."""

    def format(self, columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, "")) for c in columns])
        return buffer.getvalue()


class TableFormatter:
    """Aligned plain-text table."""

    def format(self, columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
        cells = [[format_value(row.get(c, "")) for c in columns] for row in rows]
        widths = [
            max([len(c)] + [len(line[i]) for line in cells]) for i, c in enumerate(columns)
        ]
        lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for line in cells:
            lines.append("  ".join(v.rjust(w) for v, w in zip(line, widths)))
        return "\n".join(lines) + "\n"


def get_formatter(report_format: ReportFormat) -> FormatterInterface:
    """Get formatter by type."""
    formatters = {
        ReportFormat.CSV: CsvFormatter(),
        ReportFormat.TABLE: TableFormatter(),
    }
    if report_format not in formatters:
        raise UsageError(f"Unknown report format: {report_format}")
    return formatters[report_format]


def parse_report_format(value: str) -> ReportFormat:
    try:
        return ReportFormat(value.strip().lower())
    except ValueError as e:
        choices = ", ".join(f.value for f in ReportFormat)
        raise UsageError(f"Unknown report format: {value!r} (choose from {choices})") from e
