"""Waveform container, WAV I/O, and normalization."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class EmptyAudio(ValueError):
    pass


@dataclass
class AudioSegment:
    samples: np.ndarray  # float64 amplitudes
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


class NormalizedAudio(NamedTuple):
    segment: AudioSegment
    constant: bool  # ConstantSignal flag: input variance below floor, zeros returned


def normalize_waveform(seg: AudioSegment) -> NormalizedAudio:
    """Zero-mean, unit-variance normalization of the raw waveform.

    A (numerically) constant input cannot be scaled to unit variance; it is
    mapped to zeros and flagged instead.
    """
    if len(seg) == 0:
        raise EmptyAudio(seg.id or "<unnamed>")
    x = seg.samples
    var = x.var()
    if var < 1e-30:
        return NormalizedAudio(AudioSegment(np.zeros_like(x), seg.sample_rate, seg.id), True)
    y = (x - x.mean()) / np.sqrt(var)
    return NormalizedAudio(AudioSegment(y, seg.sample_rate, seg.id), False)


def read_wav(path, id=""):
    """Read mono 16-bit PCM WAV into [-1, 1) float amplitudes."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError("only mono WAV supported")
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSegment(samples, rate, id=id or str(path))


def write_wav(path, seg: AudioSegment):
    scaled = np.clip(seg.samples, -1.0, 1.0 - 1.0 / 32768.0)
    pcm = np.round(scaled * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(seg.sample_rate)
        w.writeframes(pcm.tobytes())
