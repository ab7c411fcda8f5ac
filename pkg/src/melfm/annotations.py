"""Annotation types and the JSON formats real datasets are converted into.

Formats:
  beat file       {"beats": [seconds...], "downbeats": [seconds...]}
  interval file   [[start, end, label], ...]   (chords, structure, keys)
  tag file        {"tags": ["tag", ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

PITCH_CLASSES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
NONE_LABEL = "none"

# 12 major + 12 minor + none; shared by the chord and key vocabularies
CHORD_LABELS = (
    [f"{root}:maj" for root in PITCH_CLASSES]
    + [f"{root}:min" for root in PITCH_CLASSES]
    + [NONE_LABEL]
)
KEY_LABELS = list(CHORD_LABELS)

STRUCTURE_LABELS = ["intro", "verse", "chorus", "bridge", "inst", "outro", "silence"]

_FLAT_TO_SHARP = {"Db": "C#", "Eb": "D#", "Gb": "F#", "Ab": "G#", "Bb": "A#"}


def parse_chord_label(label: str) -> tuple[int, str] | None:
    """Return (pitch class index, mode) or None for the no-chord label.

    Accepts flat spellings (Db:maj) and normalizes them to sharps.
    """
    if label == NONE_LABEL:
        return None
    if ":" not in label:
        raise ValueError(f"unknown chord/key label {label!r}")
    root, mode = label.split(":", 1)
    root = _FLAT_TO_SHARP.get(root, root)
    if root not in PITCH_CLASSES or mode not in ("maj", "min"):
        raise ValueError(f"unknown chord/key label {label!r}")
    return PITCH_CLASSES.index(root), mode


def canonical_label(label: str) -> str:
    parsed = parse_chord_label(label)
    if parsed is None:
        return NONE_LABEL
    pc, mode = parsed
    return f"{PITCH_CLASSES[pc]}:{mode}"


@dataclass
class BeatAnnotation:
    """Beat and downbeat timestamps; downbeats are a subset of beats."""

    beat_times: list[float]
    downbeat_times: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.beat_times = [float(t) for t in self.beat_times]
        self.downbeat_times = [float(t) for t in self.downbeat_times]
        if any(b >= a for a, b in zip(self.beat_times[1:], self.beat_times)):
            raise ValueError("beat times must be strictly ascending")
        if any(b >= a for a, b in zip(self.downbeat_times[1:], self.downbeat_times)):
            raise ValueError("downbeat times must be strictly ascending")
        for t in self.downbeat_times:
            if not any(abs(t - b) <= 1e-9 for b in self.beat_times):
                raise ValueError(f"downbeat {t} is not a beat")


@dataclass
class IntervalAnnotation:
    """Non-overlapping ascending (start, end, label) intervals."""

    intervals: list[tuple[float, float, str]]

    def __post_init__(self):
        cleaned = []
        prev_end = None
        for start, end, label in self.intervals:
            start, end = float(start), float(end)
            if end <= start:
                raise ValueError(f"interval ({start}, {end}) has nonpositive length")
            if prev_end is not None and start < prev_end - 1e-9:
                raise ValueError("intervals overlap or are out of order")
            cleaned.append((start, end, str(label)))
            prev_end = end
        self.intervals = cleaned

    @property
    def duration(self) -> float:
        return self.intervals[-1][1] if self.intervals else 0.0

    def label_at(self, time: float) -> str | None:
        for start, end, label in self.intervals:
            if start <= time < end:
                return label
        return None


# chord, structure and key annotations all share the interval form
ChordAnnotation = IntervalAnnotation


@dataclass
class TagAnnotation:
    tags: list[str]

    def __post_init__(self):
        self.tags = sorted(set(str(t) for t in self.tags))


def save_beats(path: str | Path, ann: BeatAnnotation) -> None:
    payload = {"beats": ann.beat_times, "downbeats": ann.downbeat_times}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_beats(path: str | Path) -> BeatAnnotation:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return BeatAnnotation(payload["beats"], payload.get("downbeats", []))


def save_intervals(path: str | Path, ann: IntervalAnnotation) -> None:
    payload = [[s, e, label] for s, e, label in ann.intervals]
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_intervals(path: str | Path) -> IntervalAnnotation:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return IntervalAnnotation([(row[0], row[1], row[2]) for row in payload])


def save_tags(path: str | Path, ann: TagAnnotation) -> None:
    Path(path).write_text(json.dumps({"tags": ann.tags}), encoding="utf-8")


def load_tags(path: str | Path) -> TagAnnotation:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return TagAnnotation(payload["tags"])
