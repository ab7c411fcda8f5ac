"""Log-mel feature frontend: STFT, triangular mel filterbank, normalization.

The mel hop is chosen as sample_rate / token_rate so the frame rate of the
features equals the encoder token rate directly (960 samples at 25 Hz for
24 kHz audio, 480 at 50 Hz, 320 at 75 Hz).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

from melfm.audio import AudioBuffer

LOG_FLOOR = 1e-7
STD_FLOOR = 1e-5

MEL_MAGIC = b"MELF"


@dataclass
class MelFrameSequence:
    """T x d matrix of natural-log mel energies at a fixed frame rate."""

    frames: np.ndarray
    frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bands(self) -> int:
        return self.frames.shape[1]


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the standard analysis window for STFT
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft(buf: AudioBuffer, n_fft: int = 2048, hop: int = 960) -> np.ndarray:
    """Short-time Fourier transform, frames starting at k*hop, zero-padded tail.

    Returns a complex (floor(len/hop), n_fft//2 + 1) matrix. A buffer shorter
    than one hop yields zero frames.
    """
    if n_fft <= 0 or (n_fft & (n_fft - 1)) != 0:
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if hop <= 0 or hop > n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")
    samples = np.asarray(buf.samples, dtype=np.float64)
    num_frames = len(samples) // hop
    if num_frames == 0:
        return np.zeros((0, n_fft // 2 + 1), dtype=np.complex128)
    padded = np.pad(samples, (0, (num_frames - 1) * hop + n_fft - len(samples)))
    strides = (padded.strides[0] * hop, padded.strides[0])
    frames = np.lib.stride_tricks.as_strided(
        padded, shape=(num_frames, n_fft), strides=strides, writeable=False
    )
    return np.fft.rfft(frames * hann_window(n_fft), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, num_bands: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters (peak 1) on the HTK mel scale, (num_bands, n_fft//2+1)."""
    if num_bands < 1:
        raise ValueError("need at least one mel band")
    if not (0 <= fmin < fmax <= sr / 2):
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_bands + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sr / n_fft)
    bank = np.zeros((num_bands, len(bin_freqs)))
    for b in range(num_bands):
        lo, center, hi = edges[b], edges[b + 1], edges[b + 2]
        rise = (bin_freqs - lo) / max(center - lo, 1e-12)
        fall = (hi - bin_freqs) / max(hi - center, 1e-12)
        bank[b] = np.clip(np.minimum(rise, fall), 0.0, None)
    return bank


def log_mel(
    spec: np.ndarray,
    sr: int,
    num_bands: int = 128,
    fmin: float = 0.0,
    fmax: float = 12000.0,
    frame_rate: float = 25.0,
) -> MelFrameSequence:
    """Map a magnitude-squared STFT onto log mel energies, floored at 1e-7."""
    n_fft = (spec.shape[1] - 1) * 2
    bank = mel_filterbank(sr, n_fft, num_bands, fmin, fmax)
    power = np.abs(spec) ** 2
    energies = power @ bank.T
    return MelFrameSequence(np.log(np.maximum(energies, LOG_FLOOR)), frame_rate)


def compute_mel(
    buf: AudioBuffer,
    token_rate: float = 25.0,
    n_fft: int = 2048,
    num_bands: int = 128,
    fmin: float = 0.0,
    fmax: float = 12000.0,
) -> MelFrameSequence:
    """Full frontend: STFT at hop sr/token_rate, then log-mel."""
    hop = int(round(buf.sample_rate / token_rate))
    spec = stft(buf, n_fft=n_fft, hop=hop)
    return log_mel(spec, buf.sample_rate, num_bands, fmin, fmax, frame_rate=token_rate)


@dataclass
class RunningMoments:
    """Streaming per-band mean/variance (Welford), mergeable across shards."""

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def update(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.size == 0:
            return
        if self.count == 0:
            self.mean = np.zeros(rows.shape[1])
            self.m2 = np.zeros(rows.shape[1])
        n_b = rows.shape[0]
        mean_b = rows.mean(axis=0)
        m2_b = ((rows - mean_b) ** 2).sum(axis=0)
        delta = mean_b - self.mean
        total = self.count + n_b
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta * delta * (self.count * n_b / total)
        self.count = total

    def merge(self, other: "RunningMoments") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return
        delta = other.mean - self.mean
        total = self.count + other.count
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / total)
        self.count = total

    def variance(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.m2 / self.count


@dataclass
class Normalizer:
    """Per-band shift/scale fitted on a corpus; std clamped at 1e-5."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, mf: MelFrameSequence) -> MelFrameSequence:
        frames = (mf.frames - self.mean) / self.std
        return MelFrameSequence(frames, mf.frame_rate)


def fit_normalizer(corpus: Iterable[MelFrameSequence]) -> Normalizer:
    """Fit zero-mean/unit-variance statistics over all frames of a corpus."""
    moments = RunningMoments()
    for mf in corpus:
        moments.update(mf.frames)
    if moments.count == 0:
        raise ValueError("cannot fit a normalizer on an empty corpus")
    std = np.sqrt(moments.variance())
    return Normalizer(mean=moments.mean, std=np.maximum(std, STD_FLOOR))


def apply_normalizer(normalizer: Normalizer, mf: MelFrameSequence) -> MelFrameSequence:
    return normalizer.apply(mf)


def write_mel(fp: IO[bytes], mf: MelFrameSequence) -> None:
    """Little-endian float32 dump with a 16-byte header (magic, T, d, frame_rate)."""
    t, d = mf.frames.shape
    fp.write(MEL_MAGIC)
    fp.write(struct.pack("<IIf", t, d, float(mf.frame_rate)))
    fp.write(np.ascontiguousarray(mf.frames, dtype="<f4").tobytes())


def read_mel(fp: IO[bytes]) -> MelFrameSequence:
    magic = fp.read(4)
    if magic != MEL_MAGIC:
        raise ValueError(f"not a mel feature file (magic {magic!r})")
    t, d, frame_rate = struct.unpack("<IIf", fp.read(12))
    data = np.frombuffer(fp.read(t * d * 4), dtype="<f4").reshape(t, d)
    return MelFrameSequence(data.astype(np.float64), frame_rate)


def iter_corpus_mels(
    buffers: Iterable[AudioBuffer], token_rate: float, **kwargs
) -> Iterator[MelFrameSequence]:
    for buf in buffers:
        yield compute_mel(buf, token_rate=token_rate, **kwargs)
