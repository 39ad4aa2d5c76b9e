"""Data model and persistence for features, probabilities, annotations, and events.

Frame intervals are half-open ``[start, end)`` everywhere, so lengths and
IoU stay integer arithmetic.

File formats:

* probability / feature matrices -- CSV with a header row (class names for
  probabilities, ``f0..f{D-1}`` for features), or a compact binary container
  for large videos: magic ``VSTA``, uint32 version, uint32 rows, uint32 cols,
  uint32 name-block byte length, UTF-8 newline-joined column names (empty for
  features), then rows*cols little-endian float32 values in row-major order.
* events -- JSON array of ``{video_id, label, start_frame, end_frame, score}``
  records; ``score`` is omitted for ground truth.
* annotations -- JSON ``{video_id, frames, intervals: [{label, start_frame,
  end_frame}]}``.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, FormatError, ShapeError, ValidationError
from .taxonomy import LabelTaxonomy

_MAGIC = b"VSTA"
_CONTAINER_VERSION = 1


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class FeatureTable:
    """Per-frame feature matrix for one video (T x D)."""

    video_id: str
    values: np.ndarray
    backbone_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ShapeError(f"feature table must be T x D with T,D >= 1, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class ProbabilityMatrix:
    """Per-frame class probabilities for one video (T x C, values in [0, 1])."""

    video_id: str
    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"probability matrix must be 2-D, got {self.values.ndim}-D")
        if self.values.shape[1] != len(self.class_names):
            raise ShapeError(
                f"{len(self.class_names)} class names but {self.values.shape[1]} columns"
            )
        if not np.isfinite(self.values).all():
            raise ValidationError("probability matrix contains non-finite values")
        if (self.values < 0).any() or (self.values > 1).any():
            bad = self.values[(self.values < 0) | (self.values > 1)][0]
            raise ValidationError(f"probability {bad} outside [0, 1]")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.class_names.index(name)]

    def check_taxonomy(self, taxonomy: LabelTaxonomy) -> None:
        if self.class_names != taxonomy.classes:
            raise ShapeError(
                f"class order mismatch with taxonomy for video {self.video_id!r}"
            )


@dataclass
class BinaryMatrix:
    """Per-frame boolean class indicators for one video (T x C)."""

    video_id: str
    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.class_names):
            raise ShapeError("binary matrix shape inconsistent with class names")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.class_names.index(name)]


@dataclass(frozen=True, order=True)
class Event:
    """One labeled temporal interval, [start, end) in frames."""

    label: str
    start: int
    end: int
    score: float | None = None

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValidationError(f"bad event interval [{self.start}, {self.end})")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"event score {self.score} outside [0, 1]")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class EventSet:
    """Scored (predictions) or unscored (ground truth) events for one video."""

    video_id: str
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.label, e.start, e.end))
        prev: Event | None = None
        for ev in self.events:
            if prev is not None and prev.label == ev.label and ev.start < prev.end:
                raise ValidationError(
                    f"overlapping {ev.label!r} events in video {self.video_id!r}: "
                    f"[{prev.start},{prev.end}) and [{ev.start},{ev.end})"
                )
            prev = ev

    def for_label(self, label: str) -> list[Event]:
        return [e for e in self.events if e.label == label]

    def labels(self) -> set[str]:
        return {e.label for e in self.events}

    def check_bounds(self, frames: int) -> None:
        for ev in self.events:
            if ev.end > frames:
                raise BoundsError(
                    f"event [{ev.start},{ev.end}) exceeds video length {frames}"
                )


@dataclass
class AnnotationSet:
    """Ground-truth intervals for one video; unscored, with known length."""

    video_id: str
    frames: int
    intervals: list[Event] = field(default_factory=list)

    def __post_init__(self):
        if self.frames < 1:
            raise ValidationError("frames must be >= 1")
        self.intervals = sorted(self.intervals, key=lambda e: (e.label, e.start, e.end))
        for iv in self.intervals:
            if iv.end > self.frames:
                raise BoundsError(f"interval [{iv.start},{iv.end}) outside [0, {self.frames})")


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------


def frames_from_intervals(ann: AnnotationSet, taxonomy: LabelTaxonomy) -> BinaryMatrix:
    """Rasterize interval annotations to a T x C boolean matrix.

    Cell (t, c) is true iff frame t lies inside some interval of class c.
    """
    values = np.zeros((ann.frames, taxonomy.num_classes), dtype=bool)
    for iv in ann.intervals:
        c = taxonomy.class_index(iv.label)
        values[iv.start : iv.end, c] = True
    return BinaryMatrix(ann.video_id, taxonomy.classes, values)


def events_from_annotations(ann: AnnotationSet) -> EventSet:
    """Merge touching/overlapping same-class intervals into unscored events."""
    by_label: dict[str, list[Event]] = {}
    for iv in ann.intervals:
        by_label.setdefault(iv.label, []).append(iv)
    merged: list[Event] = []
    for label, items in by_label.items():
        items.sort(key=lambda e: e.start)
        cur_s, cur_e = items[0].start, items[0].end
        for iv in items[1:]:
            if iv.start <= cur_e:
                cur_e = max(cur_e, iv.end)
            else:
                merged.append(Event(label, cur_s, cur_e))
                cur_s, cur_e = iv.start, iv.end
        merged.append(Event(label, cur_s, cur_e))
    return EventSet(ann.video_id, merged)


# ---------------------------------------------------------------------------
# matrix containers (CSV + binary)
# ---------------------------------------------------------------------------


def _store_csv(path: Path, header: Sequence[str], values: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.asarray(values, dtype=np.float64):
            writer.writerow([f"{v:.9g}" for v in row])


def _load_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise FormatError(f"{path}: empty file")
        header = next(csv.reader([header_line]))
        try:
            values = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if values.size and values.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows ({values.shape[1]} columns vs {len(header)} names)")
    return header, values


def write_container(fh, names: Sequence[str], values: np.ndarray) -> None:
    """Append one binary matrix block to an open binary stream."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    name_block = "\n".join(names).encode("utf-8") if names else b""
    fh.write(_MAGIC)
    fh.write(struct.pack("<IIII", _CONTAINER_VERSION, arr.shape[0], arr.shape[1], len(name_block)))
    fh.write(name_block)
    fh.write(arr.tobytes())


def read_container(fh, where: str = "stream") -> tuple[list[str], np.ndarray]:
    """Read one binary matrix block from an open binary stream."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r}")
    header = fh.read(16)
    if len(header) != 16:
        raise FormatError(f"{where}: truncated header")
    version, rows, cols, name_len = struct.unpack("<IIII", header)
    if version != _CONTAINER_VERSION:
        raise FormatError(f"{where}: unsupported container version {version}")
    name_block = fh.read(name_len)
    names = name_block.decode("utf-8").split("\n") if name_len else []
    payload = fh.read(4 * rows * cols)
    if len(payload) != 4 * rows * cols:
        raise FormatError(f"{where}: truncated payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return names, np.asarray(values)


def _store_binary(path: Path, names: Sequence[str], values: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_container(fh, names, values)


def _load_binary(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        return read_container(fh, str(path))


def _is_binary(path: Path) -> bool:
    if path.suffix == ".vsta":
        return True
    if path.suffix == ".csv":
        return False
    with open(path, "rb") as fh:
        return fh.read(4) == _MAGIC


def store_probability_matrix(pm: ProbabilityMatrix, path: str | Path, fmt: str | None = None) -> None:
    """Write a probability matrix as CSV (default) or binary container.

    ``fmt`` in {"csv", "binary"}; inferred from the extension when None.
    """
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix == ".vsta" else "csv"
    if fmt == "csv":
        _store_csv(path, pm.class_names, pm.values)
    elif fmt == "binary":
        _store_binary(path, pm.class_names, pm.values)
    else:
        raise ValidationError(f"unknown matrix format {fmt!r}")


def load_probability_matrix(path: str | Path, video_id: str | None = None) -> ProbabilityMatrix:
    """Read a probability matrix; ``video_id`` defaults to the file stem."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    names, values = _load_binary(path) if _is_binary(path) else _load_csv(path)
    return ProbabilityMatrix(video_id or path.stem, tuple(names), values)


def store_feature_table(ft: FeatureTable, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix == ".vsta" else "csv"
    if fmt == "csv":
        _store_csv(path, [f"f{i}" for i in range(ft.dim)], ft.values)
    elif fmt == "binary":
        _store_binary(path, [], ft.values)
    else:
        raise ValidationError(f"unknown matrix format {fmt!r}")


def load_feature_table(path: str | Path, video_id: str | None = None, backbone_tag: str = "") -> FeatureTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    _, values = _load_binary(path) if _is_binary(path) else _load_csv(path)
    return FeatureTable(video_id or path.stem, values, backbone_tag)


# ---------------------------------------------------------------------------
# events + annotations (JSON)
# ---------------------------------------------------------------------------


def store_events(event_sets: Iterable[EventSet], path: str | Path) -> None:
    """Write events from one or more videos into a single JSON array."""
    records = []
    for es in sorted(event_sets, key=lambda s: s.video_id):
        for ev in es.events:
            rec: dict = {
                "video_id": es.video_id,
                "label": ev.label,
                "start_frame": ev.start,
                "end_frame": ev.end,
            }
            if ev.score is not None:
                rec["score"] = float(ev.score)
            records.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")


def load_events(path: str | Path) -> dict[str, EventSet]:
    """Read an events JSON file; events come back canonically sorted per video."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(records, list):
        raise FormatError(f"{path}: expected a JSON array of event records")
    by_video: dict[str, list[Event]] = {}
    for rec in records:
        try:
            ev = Event(
                label=rec["label"],
                start=int(rec["start_frame"]),
                end=int(rec["end_frame"]),
                score=float(rec["score"]) if "score" in rec else None,
            )
            vid = rec["video_id"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed event record {rec!r}") from exc
        by_video.setdefault(vid, []).append(ev)
    return {vid: EventSet(vid, evs) for vid, evs in sorted(by_video.items())}


def store_annotations(ann: AnnotationSet, path: str | Path) -> None:
    doc = {
        "video_id": ann.video_id,
        "frames": ann.frames,
        "intervals": [
            {"label": iv.label, "start_frame": iv.start, "end_frame": iv.end}
            for iv in ann.intervals
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_annotations(path: str | Path) -> AnnotationSet:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    try:
        intervals = [
            Event(rec["label"], int(rec["start_frame"]), int(rec["end_frame"]))
            for rec in doc["intervals"]
        ]
        return AnnotationSet(doc["video_id"], int(doc["frames"]), intervals)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed annotation document") from exc
