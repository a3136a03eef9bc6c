"""Machine-readable result records (JSON lines or CSV) with atomic appends.

Every sink starts with one metadata line carrying the artifact version and
the fingerprint of the experiment config. Each record is then written with a
single ``write`` on an ``O_APPEND`` descriptor followed by ``fsync``, so an
interrupted sweep leaves only whole lines behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from . import __version__
from .errors import ConfigError, DataError

FORMATS = ("json-lines", "csv")
METRIC_FIELDS = ("utility_auc", "adversary_auc", "privacy_gap", "wall_time")
CSV_FIELDS = ("fingerprint", "experiment", "axes", "seed") + METRIC_FIELDS + ("extra", "traces_ref")


def _canonical(value):
    # ints and floats that compare equal hash equal: 1 and 1.0 are the same beta
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def fingerprint(obj) -> str:
    blob = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def sig6(x):
    """Round a number to 6 significant digits; other values pass through."""
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        return x
    if isinstance(x, int):
        return x
    return float(f"{x:.6g}")


@dataclass
class ResultRecord:
    fingerprint: str
    experiment: str
    axes: Dict[str, object]
    seed: int
    utility_auc: float
    adversary_auc: float
    privacy_gap: float
    wall_time: float
    extra: Dict[str, object] = field(default_factory=dict)
    traces_ref: str = ""

    def __post_init__(self):
        for name in ("utility_auc", "adversary_auc"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise DataError(f"{name}={val} is outside [0, 1]")
        if not 0.0 <= self.privacy_gap <= 0.5:
            raise DataError(f"privacy_gap={self.privacy_gap} is outside [0, 0.5]")

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint, "experiment": self.experiment,
            "axes": {k: sig6(v) for k, v in self.axes.items()}, "seed": self.seed,
            **{k: sig6(getattr(self, k)) for k in METRIC_FIELDS},
            "extra": {k: sig6(v) for k, v in self.extra.items()},
            "traces_ref": self.traces_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(d["fingerprint"], d["experiment"], dict(d["axes"]), int(d["seed"]),
                   float(d["utility_auc"]), float(d["adversary_auc"]),
                   float(d["privacy_gap"]), float(d["wall_time"]),
                   dict(d.get("extra") or {}), d.get("traces_ref", ""))


def header(config_fingerprint: str, fmt: str) -> str:
    meta = {"gpp_results": 1, "artifact_version": __version__,
            "config_fingerprint": config_fingerprint}
    if fmt == "json-lines":
        return json.dumps({"_meta": meta}, sort_keys=True) + "\n"
    return "# " + json.dumps(meta, sort_keys=True) + "\n" + ",".join(CSV_FIELDS) + "\n"


def format_record(rec: ResultRecord, fmt: str) -> str:
    d = rec.to_dict()
    if fmt == "json-lines":
        return json.dumps(d, sort_keys=True) + "\n"
    buf = io.StringIO()
    row = dict(d, axes=json.dumps(d["axes"], sort_keys=True),
               extra=json.dumps(d["extra"], sort_keys=True))
    csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n").writerow(row)
    return buf.getvalue()


def _append(path: str, text: str):
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, text.encode("utf-8"))
        os.fsync(fd)
    finally:
        os.close(fd)


class ResultSink:
    """Append-only results file; the single writer for a sweep."""

    def __init__(self, path: str, fmt: str = "json-lines", config_fingerprint: str = ""):
        if fmt not in FORMATS:
            raise ConfigError(f"unknown results format {fmt!r}; choose from {FORMATS}")
        self.path = path
        self.fmt = fmt
        directory = os.path.dirname(os.path.abspath(path))
        try:
            os.makedirs(directory, exist_ok=True)
            if not os.path.exists(path) or os.path.getsize(path) == 0:
                _append(path, header(config_fingerprint, fmt))
        except OSError as exc:
            raise ConfigError(f"results sink {path} is not writable: {exc}") from None

    def completed(self) -> set:
        return {r.fingerprint for r in read_results(self.path)}

    def write(self, rec: ResultRecord):
        try:
            _append(self.path, format_record(rec, self.fmt))
        except OSError as exc:
            raise ConfigError(f"results sink {self.path} is not writable: {exc}") from None


def emit_results(records: Iterable[ResultRecord], path: str, fmt: str = "json-lines",
                 config_fingerprint: str = "") -> ResultSink:
    sink = ResultSink(path, fmt, config_fingerprint)
    for rec in records:
        sink.write(rec)
    return sink


def read_header(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# "):
        return json.loads(first[2:])
    return json.loads(first)["_meta"]


def read_results(path: str) -> List[ResultRecord]:
    """Parse a sink file; a torn final line (no newline) is ignored."""
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]
    lines = [l for l in lines if l]
    if not lines:
        return []
    out = []
    if lines[0].startswith("# "):
        for row in csv.DictReader(lines[1:]):
            row = dict(row, axes=json.loads(row["axes"]), extra=json.loads(row["extra"]))
            out.append(ResultRecord.from_dict(row))
    else:
        for line in lines:
            d = json.loads(line)
            if "_meta" not in d:
                out.append(ResultRecord.from_dict(d))
    return out


def find_record(records: List[ResultRecord], fp: str) -> Optional[ResultRecord]:
    for r in records:
        if r.fingerprint == fp:
            return r
    return None
