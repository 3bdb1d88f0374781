"""
Readers and writers for every on-disk artifact of the pipeline.

File formats
------------
signal      UTF-8 text, one voltage sample (µV) per line, no header. The
            sample rate travels out-of-band (default 24 kHz).
annotation  ``<time_s> <unit_id>`` per line, time with 6 decimals.
manifest    CSV with header ``path,label,muscle``.
templates   one waveform per line, comma-separated µV; line k is unit k.
model       JSON record, see :func:`write_model`.
report      JSON record, see :func:`write_report`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RATE_HZ = 24000.0
MODEL_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1


class SignalIOError(ValueError):
    """Base class for malformed or unreadable artifacts."""


class EmptySignal(SignalIOError):
    pass


class UnknownLabel(SignalIOError):
    pass


class VersionMismatch(SignalIOError):
    pass


class Label(str, Enum):
    HEALTHY = "healthy"
    MYOPATHIC = "myopathic"
    NEUROPATHIC = "neuropathic"

    @property
    def index(self) -> int:
        return CLASSES.index(self)

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise UnknownLabel(f"unknown label {text!r}; expected one of "
                               f"{', '.join(c.value for c in cls)}") from None


# Canonical class order; used for confusion matrices and tie-breaking.
CLASSES: tuple[Label, ...] = (Label.HEALTHY, Label.MYOPATHIC, Label.NEUROPATHIC)


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled voltage trace in µV."""

    id: str
    samples: np.ndarray
    sample_rate_hz: float = DEFAULT_RATE_HZ
    label: Optional[Label] = None
    muscle: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FiringAnnotation:
    """Firing events as parallel arrays, sorted by time."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    unit_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        units = np.asarray(self.unit_ids, dtype=int).reshape(-1)
        if times.shape != units.shape:
            raise ValueError("times and unit_ids must have equal length")
        if times.size and (not np.all(np.isfinite(times)) or times.min() < 0):
            raise ValueError("event times must be finite and nonnegative")
        if units.size and units.min() < 1:
            raise ValueError("unit ids must be positive")
        order = np.argsort(times, kind="stable")
        times, units = times[order], units[order]
        times.setflags(write=False)
        units.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "unit_ids", units)

    @classmethod
    def from_events(cls, events: Iterable[tuple[float, int]]) -> "FiringAnnotation":
        events = list(events)
        if not events:
            return cls()
        times, units = zip(*events)
        return cls(np.array(times, dtype=float), np.array(units, dtype=int))

    @property
    def events(self) -> list[tuple[float, int]]:
        return [(float(t), int(u)) for t, u in zip(self.times, self.unit_ids)]

    @property
    def units(self) -> list[int]:
        return sorted(set(int(u) for u in self.unit_ids))

    def times_for(self, unit_id: int) -> np.ndarray:
        return self.times[self.unit_ids == unit_id]

    def normalized(self) -> "FiringAnnotation":
        """Renumber unit ids to the contiguous set 1..K, preserving their order."""
        mapping = {u: k for k, u in enumerate(self.units, start=1)}
        return FiringAnnotation(self.times, np.array([mapping[int(u)] for u in self.unit_ids], dtype=int))

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiringAnnotation):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.unit_ids, other.unit_ids)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    muscle: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        paths = [e.path for e in entries]
        if len(set(paths)) != len(paths):
            raise SignalIOError("manifest paths must be distinct")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def class_counts(self) -> dict[Label, int]:
        return {c: sum(e.label is c for e in self.entries) for c in CLASSES}


# ---------------------------------------------------------------------------
# signals

def read_signal(path, sample_rate_hz: float = DEFAULT_RATE_HZ,
                label: Optional[Label] = None, muscle: Optional[str] = None) -> Signal:
    """
    Read a headerless one-sample-per-line text file.

    Blank lines are skipped with a warning. The signal id is the file stem.

    Raises
    ------
    EmptySignal
        If the file holds no samples.
    SignalIOError
        If a line does not parse as a decimal number (the message carries
        the 1-based line number).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SignalIOError(f"cannot read signal file {path}: {exc}") from exc
    values = []
    blank = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        token = line.strip()
        if not token:
            blank += 1
            continue
        try:
            value = float(token)
        except ValueError:
            raise SignalIOError(f"{path}:{lineno}: cannot parse {token!r} as a number") from None
        if not math.isfinite(value):
            raise SignalIOError(f"{path}:{lineno}: non-finite sample {token!r}")
        values.append(value)
    if blank:
        logger.warning("%s: skipped %d blank line(s)", path, blank)
    if not values:
        raise EmptySignal(f"{path}: no samples")
    return Signal(path.stem, np.array(values), sample_rate_hz, label, muscle)


def write_signal(signal: Signal, path) -> None:
    """Write samples at 0.01 µV resolution."""
    Path(path).write_text("".join(f"{v:.2f}\n" for v in _clean_zero(np.round(signal.samples, 2))),
                          encoding="utf-8")


def _clean_zero(values: np.ndarray) -> np.ndarray:
    # avoid "-0.00" in output
    return values + 0.0


# ---------------------------------------------------------------------------
# annotations

def read_annotation(path) -> FiringAnnotation:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SignalIOError(f"cannot read annotation file {path}: {exc}") from exc
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise SignalIOError(f"{path}:{lineno}: expected '<time_s> <unit_id>', got {line!r}")
        try:
            t = float(parts[0])
            unit_f = float(parts[1])  # EMGLAB-style tables write "5.0000"
        except ValueError:
            raise SignalIOError(f"{path}:{lineno}: malformed line {line!r}") from None
        if not math.isfinite(t) or t < 0:
            raise SignalIOError(f"{path}:{lineno}: negative or non-finite time {parts[0]!r}")
        if unit_f != int(unit_f) or unit_f < 1:
            raise SignalIOError(f"{path}:{lineno}: unit id must be a positive integer, got {parts[1]!r}")
        events.append((t, int(unit_f)))
    return FiringAnnotation.from_events(events)


def write_annotation(annotation: FiringAnnotation, path) -> None:
    lines = [f"{t:.6f} {u}\n" for t, u in annotation.events]
    try:
        Path(path).write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise SignalIOError(f"cannot write annotation file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests

MANIFEST_HEADER = ("path", "label", "muscle")


def read_manifest(path) -> DatasetManifest:
    """Read a ``path,label,muscle`` CSV. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise SignalIOError(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise SignalIOError(f"{path}: missing header")
    header = [h.strip().lower() for h in rows[0]]
    if tuple(header[:2]) != MANIFEST_HEADER[:2]:
        raise SignalIOError(f"{path}: header must start with 'path,label', got {rows[0]}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise SignalIOError(f"{path}:{lineno}: expected path,label[,muscle]")
        try:
            label = Label.parse(row[1])
        except UnknownLabel as exc:
            raise UnknownLabel(f"{path}:{lineno}: {exc}") from None
        muscle = row[2].strip() if len(row) > 2 else ""
        entries.append(ManifestEntry(row[0].strip(), label, muscle))
    return DatasetManifest(tuple(entries))


def resolve_entry_path(manifest_path, entry: ManifestEntry) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def write_manifest(manifest: DatasetManifest, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest:
            writer.writerow([e.path, e.label.value, e.muscle])


# ---------------------------------------------------------------------------
# templates dump

def write_templates(waveforms: Sequence[np.ndarray], path) -> None:
    """One waveform per line, comma-separated µV at full float precision."""
    lines = [",".join(repr(float(v)) for v in w) + "\n" for w in waveforms]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_templates(path) -> list[np.ndarray]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(np.array([float(v) for v in line.split(",")]))
        except ValueError:
            raise SignalIOError(f"{path}:{lineno}: malformed template line") from None
    if len({w.size for w in out}) > 1:
        raise SignalIOError(f"{path}: templates differ in length")
    return out


# ---------------------------------------------------------------------------
# features table

def write_features_table(rows: Sequence[tuple[str, Optional[Label], Sequence[float]]],
                         columns: Sequence[str], path) -> None:
    """Write ``signal_id,label,<columns...>``; values at full float precision."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["signal_id", "label", *columns])
        for sid, label, values in rows:
            writer.writerow([sid, label.value if label else "", *(repr(float(v)) for v in values)])


def read_features_table(path) -> tuple[list[str], list[tuple[str, Optional[Label], np.ndarray]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["signal_id", "label"]:
        raise SignalIOError(f"{path}: expected header 'signal_id,label,...'")
    columns = rows[0][2:]
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(columns) + 2:
            raise SignalIOError(f"{path}:{lineno}: expected {len(columns) + 2} fields, got {len(row)}")
        label = Label.parse(row[1]) if row[1].strip() else None
        try:
            values = np.array([float(v) for v in row[2:]])
        except ValueError:
            raise SignalIOError(f"{path}:{lineno}: non-numeric feature") from None
        out.append((row[0], label, values))
    return columns, out


# ---------------------------------------------------------------------------
# models and reports

def _dump_json(record: dict, path) -> None:
    text = json.dumps(record, indent=2, sort_keys=True, allow_nan=False) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise SignalIOError(f"cannot write {path}: {exc}") from exc


def _load_json(path, fmt: str, version: int) -> dict:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SignalIOError(f"cannot read {fmt} file {path}: {exc}") from exc
    if record.get("format") != fmt:
        raise SignalIOError(f"{path}: not a {fmt} file")
    if record.get("version") != version:
        raise VersionMismatch(f"{path}: {fmt} version {record.get('version')!r}, expected {version}")
    return record


def write_model(model, path) -> None:
    """
    Serialize a trained classifier.

    The record is ``{"format": "emgdiag-model", "version": 1, "kind": ...,
    "classes": [...], "standardization": {"mean": [...], "std": [...]},
    "params": {...}, "config": {...}, "train_seed": int}``. Floats are
    written with ``repr`` precision so predictions replay bit-identically.
    """
    record = {"format": "emgdiag-model", "version": MODEL_FORMAT_VERSION, **model.to_record()}
    _dump_json(record, path)


def read_model(path):
    from .classify import TrainedModel

    record = _load_json(path, "emgdiag-model", MODEL_FORMAT_VERSION)
    return TrainedModel.from_record(record)


def write_report(report, path, include_timing: bool = True) -> None:
    """
    Serialize an evaluation report.

    Wall-clock latency is the only non-reproducible field; pass
    ``include_timing=False`` to obtain a byte-reproducible file.
    """
    record: dict[str, Any] = {"format": "emgdiag-report", "version": REPORT_FORMAT_VERSION,
                              **report.to_record()}
    if not include_timing:
        record.pop("predict_time_ms", None)
    _dump_json(record, path)


def read_report(path):
    from .classify import EvalReport

    return EvalReport.from_record(_load_json(path, "emgdiag-report", REPORT_FORMAT_VERSION))
