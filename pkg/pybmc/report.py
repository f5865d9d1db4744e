"""
Sweep reports and their JSON / CSV forms.

A report is a config dict plus one SweepPoint per (policy, T). Both
formats carry the point fields in the order of ``COLUMNS``. Floats are
written with ``repr()`` precision, so reading a report back reproduces
the in-memory values exactly.
"""

import os
import io
import csv
import json
import tempfile
from dataclasses import dataclass, field, fields


COLUMNS = (
    "policy",
    "T",
    "r",
    "wall_s",
    "copy_elems",
    "append_elems",
    "sdpa_macs",
    "alloc_events",
    "tokens_per_s",
    "model_time_s",
)

FORMATS = ("json", "csv")


@dataclass
class SweepPoint:
    """The measurements of one (policy, T) sweep point."""

    policy: str
    T: int
    r: int
    wall_s: float
    copy_elems: int
    append_elems: int
    sdpa_macs: int
    alloc_events: int
    tokens_per_s: float
    model_time_s: float

    def to_dict(self):
        return {name: getattr(self, name) for name in COLUMNS}

    @classmethod
    def from_dict(cls, d):
        missing = [name for name in COLUMNS if name not in d]
        if missing:
            raise ValueError(f"Sweep point misses the columns {missing}.")
        # Convert per field type, so values parsed from CSV text fit too
        kwargs = {}
        for f in fields(cls):
            value = d[f.name]
            kwargs[f.name] = value if f.type is str else f.type(value)
        return cls(**kwargs)


@dataclass
class SweepReport:
    """The result of a sweep: the configuration and the points."""

    config: dict = field(default_factory=dict)
    points: list = field(default_factory=list)

    def to_dict(self):
        return {"config": self.config, "points": [p.to_dict() for p in self.points]}


# %% Codecs


def to_json(report):
    """Get the JSON text of a report."""
    return json.dumps(report.to_dict(), indent=2) + "\n"


def from_json(text):
    """Read a report from JSON text."""
    d = json.loads(text)
    if not isinstance(d, dict) or "points" not in d:
        raise ValueError("A JSON report needs a 'points' list.")
    points = [SweepPoint.from_dict(p) for p in d["points"]]
    return SweepReport(d.get("config", {}), points)


def to_csv(report):
    """Get the CSV text of a report: a header and one row per point.
    The config is not part of the CSV.
    """
    f = io.StringIO()
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(COLUMNS)
    for p in report.points:
        writer.writerow([_cell(getattr(p, name)) for name in COLUMNS])
    return f.getvalue()


def _cell(value):
    return repr(value) if isinstance(value, float) else value


def from_csv(text, config=None):
    """Read a report from CSV text."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"CSV report must have the columns {COLUMNS}.")
    points = [SweepPoint.from_dict(row) for row in reader]
    return SweepReport(dict(config or {}), points)


def dumps(report, fmt="json"):
    """Get the text of a report in the given format."""
    if fmt == "json":
        return to_json(report)
    elif fmt == "csv":
        return to_csv(report)
    raise ValueError(f"Unknown report format {fmt!r}, use one of {FORMATS}.")


def loads(text, fmt="json"):
    """Read a report from text in the given format."""
    if fmt == "json":
        return from_json(text)
    elif fmt == "csv":
        return from_csv(text)
    raise ValueError(f"Unknown report format {fmt!r}, use one of {FORMATS}.")


# %% Files


def write_report(report, path, fmt=None):
    """Write a report atomically: the text goes to a temporary file in the
    same directory, which then replaces path. The format defaults to the
    file extension.
    """
    fmt = fmt or _format_from_path(path)
    return write_atomic(dumps(report, fmt), path)


def write_atomic(text, path):
    """Write text to path via a temporary file and a rename."""
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=dirname, prefix=".pybmc-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def read_report(path, fmt=None):
    fmt = fmt or _format_from_path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        return loads(f.read(), fmt)


def _format_from_path(path):
    ext = os.path.splitext(str(path))[1].lstrip(".").lower()
    return ext if ext in FORMATS else "json"
