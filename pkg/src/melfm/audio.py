"""Audio loading, resampling, and labeled synthetic corpora.

WAV support is a deliberately small RIFF parser covering PCM16 and float32,
mono or stereo. The synthesizers exist so every downstream task has exactly
labeled data without licensed datasets: click tracks carry beat/downbeat
annotations, triad sequences carry chord annotations, and composed tracks
add structure, key, and tag labels on top.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from melfm.annotations import (
    NONE_LABEL,
    PITCH_CLASSES,
    BeatAnnotation,
    IntervalAnnotation,
    TagAnnotation,
    parse_chord_label,
)

DEFAULT_SR = 24_000

CLICK_SECONDS = 0.010
DOWNBEAT_GAIN = 2.0


@dataclass
class AudioBuffer:
    """Mono samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio (1-D samples)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain NaN or Inf")

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path: str | Path) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file, downmixing stereo by channel mean."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_len,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_len]
        if chunk_id == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise ValueError(f"{path}: unsupported channel count {channels}")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise ValueError(
            f"{path}: unsupported encoding (format tag {audio_format}, {bits}-bit); "
            "only 16-bit PCM and 32-bit float are supported"
        )
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioBuffer(samples, sample_rate)


def save_wav(path: str | Path, buf: AudioBuffer, encoding: str = "float32") -> None:
    if encoding == "float32":
        payload = np.ascontiguousarray(buf.samples, dtype="<f4").tobytes()
        audio_format, bits = 3, 32
    elif encoding == "pcm16":
        clipped = np.clip(buf.samples, -1.0, 32767.0 / 32768.0)
        payload = (np.round(clipped * 32768.0).astype("<i2")).tobytes()
        audio_format, bits = 1, 16
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    byte_rate = buf.sample_rate * bits // 8
    header = b"".join(
        [
            b"RIFF",
            struct.pack("<I", 36 + len(payload)),
            b"WAVE",
            b"fmt ",
            struct.pack("<IHHIIHH", 16, audio_format, 1, buf.sample_rate, byte_rate, bits // 8, bits),
            b"data",
            struct.pack("<I", len(payload)),
        ]
    )
    Path(path).write_bytes(header + payload)


def resample(buf: AudioBuffer, target_sr: int) -> AudioBuffer:
    """Linear-interpolation resampler; output length = round(len * target/source).

    Adequate here because synthetic corpora are generated natively at 24 kHz;
    not a bandlimited resampler.
    """
    if target_sr <= 0:
        raise ValueError(f"target_sr must be positive, got {target_sr}")
    if target_sr == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)
    src = buf.samples
    out_len = int(round(len(src) * target_sr / buf.sample_rate))
    if out_len == 0 or len(src) == 0:
        return AudioBuffer(np.zeros(0), target_sr)
    positions = np.arange(out_len) * (buf.sample_rate / target_sr)
    positions = np.clip(positions, 0.0, len(src) - 1.0)
    lo = np.floor(positions).astype(np.int64)
    hi = np.minimum(lo + 1, len(src) - 1)
    frac = positions - lo
    out = src[lo] * (1.0 - frac) + src[hi] * frac
    return AudioBuffer(out, target_sr)


def _click(rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(round(CLICK_SECONDS * sr))
    envelope = np.exp(-np.arange(n) / (n / 5.0))
    return rng.uniform(-1.0, 1.0, size=n) * envelope


def synth_click_track(
    bpm: float,
    beats_per_bar: int = 4,
    duration: float = 10.0,
    sr: int = DEFAULT_SR,
    seed: int = 0,
) -> tuple[AudioBuffer, BeatAnnotation]:
    """Decaying noise bursts at the beat grid; every bar start is a 2x louder downbeat."""
    if bpm <= 0 or duration <= 0:
        raise ValueError("bpm and duration must be positive")
    rng = np.random.default_rng(seed)
    num_samples = int(round(duration * sr))
    out = np.zeros(num_samples)
    beats: list[float] = []
    downbeats: list[float] = []
    k = 0
    while True:
        t = k * 60.0 / bpm
        if t >= duration:
            break
        beats.append(t)
        is_down = beats_per_bar > 0 and k % beats_per_bar == 0
        if is_down:
            downbeats.append(t)
        burst = _click(rng, sr) * (0.5 * (DOWNBEAT_GAIN if is_down else 1.0))
        start = int(round(t * sr))
        end = min(start + len(burst), num_samples)
        out[start:end] += burst[: end - start]
        k += 1
    np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(out, sr), BeatAnnotation(beats, downbeats)


def chord_frequencies(label: str) -> list[float]:
    """Root/third/fifth frequencies in equal temperament with A4 = 440 Hz.

    Roots are placed in octave 4 (C4 = MIDI 60); major third = +4 semitones,
    minor third = +3, fifth = +7.
    """
    parsed = parse_chord_label(label)
    if parsed is None:
        return []
    pc, mode = parsed
    root_midi = 60 + pc
    third = 4 if mode == "maj" else 3
    return [440.0 * 2.0 ** ((m - 69) / 12.0) for m in (root_midi, root_midi + third, root_midi + 7)]


def synth_chord_sequence(
    progression: list[str],
    seconds_per_chord: float = 2.0,
    sr: int = DEFAULT_SR,
    seed: int = 0,
    noise_std: float = 0.01,
) -> tuple[AudioBuffer, IntervalAnnotation]:
    """Render each chord as three sinusoids plus mild noise; "none" is noise only."""
    if seconds_per_chord <= 0:
        raise ValueError("seconds_per_chord must be positive")
    rng = np.random.default_rng(seed)
    chunk = int(round(seconds_per_chord * sr))
    pieces = []
    intervals = []
    for i, label in enumerate(progression):
        freqs = chord_frequencies(label)  # validates the label
        t = np.arange(chunk) / sr
        x = rng.normal(scale=noise_std, size=chunk)
        for f in freqs:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            x += 0.2 * np.sin(2.0 * math.pi * f * t + phase)
        pieces.append(x)
        intervals.append((i * seconds_per_chord, (i + 1) * seconds_per_chord, label))
    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioBuffer(samples, sr), IntervalAnnotation(intervals)


# degree -> (semitone offset, mode) for diatonic triads used by the composer
_MAJOR_DEGREES = [(0, "maj"), (5, "maj"), (7, "maj"), (9, "min"), (2, "min")]
_MINOR_DEGREES = [(0, "min"), (8, "maj"), (3, "maj"), (10, "maj"), (5, "min")]

_SECTION_TEMPLATES = ["intro", "verse", "chorus", "verse", "chorus", "bridge", "outro"]


@dataclass
class TrackAnnotations:
    beats: BeatAnnotation
    chords: IntervalAnnotation
    structure: IntervalAnnotation
    key: IntervalAnnotation
    tags: TagAnnotation


def synth_track(
    seed: int,
    sr: int = DEFAULT_SR,
    min_sections: int = 3,
    max_sections: int = 5,
) -> tuple[AudioBuffer, TrackAnnotations]:
    """Compose a structured track with beat, chord, structure, key, and tag labels.

    Sections are bar-aligned so structural boundaries coincide with downbeats;
    chords follow diatonic progressions in a sampled key, which ties the key
    label to the chord content.
    """
    rng = np.random.default_rng(seed)
    bpm = float(rng.choice([80, 100, 120, 140, 160]))
    beats_per_bar = 4
    key_pc = int(rng.integers(12))
    key_mode = "maj" if rng.random() < 0.5 else "min"
    degrees = _MAJOR_DEGREES if key_mode == "maj" else _MINOR_DEGREES

    num_sections = int(rng.integers(min_sections, max_sections + 1))
    start_idx = int(rng.integers(len(_SECTION_TEMPLATES) - num_sections + 1))
    labels = _SECTION_TEMPLATES[start_idx : start_idx + num_sections]
    if rng.random() < 0.25:
        labels[-1] = "silence"

    bar_seconds = beats_per_bar * 60.0 / bpm
    seconds_per_chord = bar_seconds / 2.0

    pieces: list[np.ndarray] = []
    chord_intervals: list[tuple[float, float, str]] = []
    structure_intervals: list[tuple[float, float, str]] = []
    cursor = 0.0
    for label in labels:
        bars = int(rng.integers(2, 4))
        section_len = bars * bar_seconds
        chunk = int(round(section_len * sr))
        if label == "silence":
            pieces.append(rng.normal(scale=0.002, size=chunk))
        else:
            chords = []
            for _ in range(bars * 2):
                offset, mode = degrees[int(rng.integers(len(degrees)))]
                chords.append(f"{PITCH_CLASSES[(key_pc + offset) % 12]}:{mode}")
            section_audio, section_chords = synth_chord_sequence(
                chords, seconds_per_chord, sr, seed=int(rng.integers(2**31))
            )
            samples = section_audio.samples[:chunk]
            if len(samples) < chunk:
                samples = np.pad(samples, (0, chunk - len(samples)))
            pieces.append(samples)
            for s, e, c in section_chords.intervals:
                if s + cursor < cursor + section_len - 1e-9:
                    chord_intervals.append((s + cursor, min(e, section_len) + cursor, c))
        structure_intervals.append((cursor, cursor + section_len, label))
        cursor += section_len

    samples = np.concatenate(pieces)
    duration = len(samples) / sr

    # clicks over the non-silent part keep the beat grid learnable
    beats: list[float] = []
    downbeats: list[float] = []
    silent = [(s, e) for s, e, lab in structure_intervals if lab == "silence"]
    k = 0
    rng_clicks = np.random.default_rng((seed, 0xC11C))
    while True:
        t = k * 60.0 / bpm
        if t >= duration:
            break
        in_silence = any(s <= t < e for s, e in silent)
        if not in_silence:
            beats.append(t)
            is_down = k % beats_per_bar == 0
            if is_down:
                downbeats.append(t)
            burst = _click(rng_clicks, sr) * (0.4 * (DOWNBEAT_GAIN if is_down else 1.0))
            start = int(round(t * sr))
            end = min(start + len(burst), len(samples))
            samples[start:end] += burst[: end - start]
        k += 1
    np.clip(samples, -1.0, 1.0, out=samples)

    key_label = f"{PITCH_CLASSES[key_pc]}:{key_mode}"
    tags = ["major" if key_mode == "maj" else "minor"]
    tags.append("slow" if bpm < 100 else ("fast" if bpm > 140 else "mid"))
    tags.append("percussive")
    if any(lab != "silence" for lab in labels):
        tags.append("harmonic")
    if silent:
        tags.append("sparse")

    ann = TrackAnnotations(
        beats=BeatAnnotation(beats, downbeats),
        chords=IntervalAnnotation(chord_intervals),
        structure=IntervalAnnotation(structure_intervals),
        key=IntervalAnnotation([(0.0, duration, key_label)]),
        tags=TagAnnotation(tags),
    )
    return AudioBuffer(samples, sr), ann


__all__ = [
    "AudioBuffer",
    "DEFAULT_SR",
    "NONE_LABEL",
    "TrackAnnotations",
    "chord_frequencies",
    "load_wav",
    "resample",
    "save_wav",
    "synth_chord_sequence",
    "synth_click_track",
    "synth_track",
]
