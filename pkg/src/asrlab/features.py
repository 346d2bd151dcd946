"""Deterministic DSP front-ends: MFCC and Gammatone feature extraction.

All stages are pure functions so each one can be checked against a direct
oracle (naive DFT, filter-weight sums, the framing formula).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import gammatone, lfilter

from .audio import AudioSegment, EmptyAudio

LOG_FLOOR = 1e-10
FEAT_MAGIC = b"FEAT"


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [T, D]
    frame_shift_ms: float
    frame_len_ms: float

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise ValueError("features must be finite")

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def D(self):
        return self.frames.shape[1]

    def save(self, path):
        """Little-endian binary container: magic, u32 T, u32 D, f32 row-major."""
        t, d = self.frames.shape
        with open(path, "wb") as f:
            f.write(FEAT_MAGIC)
            f.write(struct.pack("<II", t, d))
            f.write(self.frames.astype("<f4").tobytes())

    @staticmethod
    def load(path, frame_shift_ms=10.0, frame_len_ms=25.0):
        with open(path, "rb") as f:
            if f.read(4) != FEAT_MAGIC:
                raise ValueError("not a FEAT file")
            t, d = struct.unpack("<II", f.read(8))
            data = np.frombuffer(f.read(4 * t * d), dtype="<f4").reshape(t, d)
        return FeatureMatrix(data.astype(np.float64), frame_shift_ms, frame_len_ms)

    def to_csv(self, path):
        np.savetxt(path, self.frames, delimiter=",", fmt="%.8g")


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    preemph_coeff: float = 0.97
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    n_mel_filters: int = 40
    n_ceps: int = 13
    add_deltas: bool = True
    window: str = "hamming"
    fmin_hz: float = 20.0
    fmax_hz: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.preemph_coeff < 1.0):
            raise ValueError("preemph_coeff must be in [0, 1)")
        if self.n_ceps > self.n_mel_filters:
            raise ValueError("n_ceps must be <= n_mel_filters")
        if self.frame_shift_ms > self.frame_len_ms:
            raise ValueError("frame_shift_ms must be <= frame_len_ms")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")


@dataclass
class GammatoneConfig:
    sample_rate: int = 16000
    n_channels: int = 69
    window_ms: float = 25.0
    shift_ms: float = 10.0
    spectral_window: int = 9
    spectral_shift: int = 4
    compression: str = "tenth_root"  # or "log"
    n_ceps: int = 16
    preemph_coeff: float = 0.97  # not given by the recipe; documented default
    fmin_hz: float = 100.0
    fmax_hz: float | None = None

    def n_bands(self):
        return 1 + (self.n_channels - self.spectral_window) // self.spectral_shift

    def __post_init__(self):
        if self.compression not in ("tenth_root", "log"):
            raise ValueError("compression must be tenth_root or log")
        if self.n_ceps > self.n_bands():
            raise ValueError("n_ceps exceeds band count after spectral integration")


# -- stages -------------------------------------------------------------------


def pre_emphasize(samples, coeff):
    """y[0] = x[0]; y[t] = x[t] - coeff*x[t-1]."""
    if not (0.0 <= coeff <= 1.0):
        raise ValueError("pre-emphasis coefficient must be in [0, 1]")
    x = np.asarray(samples, dtype=np.float64)
    y = x.copy()
    y[1:] -= coeff * x[:-1]
    return y


def frame_count(n_samples, frame_len, shift):
    return 0 if n_samples < frame_len else 1 + (n_samples - frame_len) // shift


_WINDOWS = {
    "hann": lambda n: 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1 if n > 1 else 1)),
    "hamming": lambda n: 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1 if n > 1 else 1)),
    "rect": np.ones,
}


def frame_and_window(samples, rate, frame_len_ms, shift_ms, window="hann"):
    """Slice into overlapping frames, each multiplied by the window."""
    x = np.asarray(samples, dtype=np.float64)
    frame_len = int(round(rate * frame_len_ms / 1000.0))
    shift = int(round(rate * shift_ms / 1000.0))
    if frame_len < shift:
        raise ValueError("frame length must be >= shift")
    n_frames = frame_count(x.size, frame_len, shift)
    if n_frames == 0:
        return np.zeros((0, frame_len))
    idx = np.arange(n_frames)[:, None] * shift + np.arange(frame_len)[None, :]
    return x[idx] * _WINDOWS[window](frame_len)[None, :]


def magnitude_spectrum(frames, n_fft):
    """Magnitude of the zero-padded DFT, bins 0..n_fft/2."""
    frames = np.atleast_2d(frames)
    if frames.shape[1] > n_fft:
        raise ValueError("frame length exceeds n_fft")
    # unnormalized forward DFT: X[k] = sum_n x[n] exp(-2 pi i k n / N)
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def mel_scale(f_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_inverse(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, rate, fmin_hz, fmax_hz):
    """Triangular filters, uniformly spaced on the Mel scale.  [F, n_fft/2+1]."""
    if not (0 <= fmin_hz < fmax_hz <= rate / 2):
        raise ValueError("need 0 <= fmin < fmax <= rate/2")
    edges = mel_inverse(np.linspace(mel_scale(fmin_hz), mel_scale(fmax_hz), n_filters + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    weights = np.zeros((n_filters, bin_freqs.size))
    for i in range(n_filters):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        weights[i] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


def mel_filterbank_energies(spectrum, n_filters, fmin_hz, fmax_hz, rate):
    spectrum = np.atleast_2d(spectrum)
    n_fft = 2 * (spectrum.shape[1] - 1)
    weights = mel_filterbank(n_filters, n_fft, rate, fmin_hz, fmax_hz)
    return spectrum @ weights.T


def dct_matrix(n_out, n_in):
    """Orthonormal DCT-II rows; C @ C.T = I when n_out == n_in."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    c = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    c[0] /= np.sqrt(2.0)
    return c


def delta_features(ceps, window=2):
    """Regression deltas over +-window frames with edge replication."""
    t = ceps.shape[0]
    padded = np.concatenate([np.repeat(ceps[:1], window, axis=0), ceps,
                             np.repeat(ceps[-1:], window, axis=0)], axis=0)
    denom = 2 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(ceps)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + t] - padded[window - n : window - n + t])
    return out / denom


def mfcc(seg: AudioSegment, cfg: MfccConfig) -> FeatureMatrix:
    """Pre-emphasis, framing, |DFT|, Mel filterbank, log, DCT, deltas."""
    if seg.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {seg.sample_rate} != config {cfg.sample_rate}")
    emphasized = pre_emphasize(seg.samples, cfg.preemph_coeff)
    frames = frame_and_window(emphasized, cfg.sample_rate, cfg.frame_len_ms,
                              cfg.frame_shift_ms, cfg.window)
    if frames.shape[0] == 0:
        raise EmptyAudio(f"{seg.id}: no complete frame")
    spectrum = magnitude_spectrum(frames, cfg.n_fft)
    fmax = cfg.fmax_hz if cfg.fmax_hz is not None else cfg.sample_rate / 2
    energies = mel_filterbank_energies(spectrum, cfg.n_mel_filters, cfg.fmin_hz,
                                       fmax, cfg.sample_rate)
    logmel = np.log(energies + LOG_FLOOR)
    ceps = logmel @ dct_matrix(cfg.n_ceps, cfg.n_mel_filters).T
    if cfg.add_deltas:
        d1 = delta_features(ceps)
        d2 = delta_features(d1)
        ceps = np.concatenate([ceps, d1, d2], axis=1)
    return FeatureMatrix(ceps, cfg.frame_shift_ms, cfg.frame_len_ms)


def greenwood_center_frequencies(n_channels, fmin_hz, fmax_hz, a_const=165.4,
                                 alpha=2.1, k_const=0.88):
    """Center frequencies sampled uniformly in Greenwood cochlear position."""
    def position(f):
        return np.log10(f / a_const + k_const) / alpha

    x = np.linspace(position(fmin_hz), position(fmax_hz), n_channels)
    return a_const * (10.0 ** (alpha * x) - k_const)


def gammatone_filterbank_outputs(samples, rate, centers):
    """Apply 4th-order IIR gammatone filters; returns [N, channels] magnitudes."""
    outs = np.zeros((len(samples), len(centers)))
    for i, fc in enumerate(centers):
        b, a = gammatone(fc, "iir", fs=rate)
        outs[:, i] = np.abs(lfilter(b, a, samples))
    return outs


def gammatone_features(seg: AudioSegment, cfg: GammatoneConfig) -> FeatureMatrix:
    """Gammatone filterbank, temporal/spectral integration, compression, DCT.

    Final coefficients are mean/variance normalized per utterance.
    """
    if seg.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {seg.sample_rate} != config {cfg.sample_rate}")
    fmax = cfg.fmax_hz if cfg.fmax_hz is not None else 0.45 * cfg.sample_rate
    emphasized = pre_emphasize(seg.samples, cfg.preemph_coeff)
    centers = greenwood_center_frequencies(cfg.n_channels, cfg.fmin_hz, fmax)
    magnitudes = gammatone_filterbank_outputs(emphasized, cfg.sample_rate, centers)
    integrated = temporal_integration(magnitudes, cfg.sample_rate, cfg.window_ms, cfg.shift_ms)
    if integrated.shape[0] == 0:
        raise EmptyAudio(f"{seg.id}: no complete frame")
    bands = spectral_integration(integrated, cfg.spectral_window, cfg.spectral_shift)
    if cfg.compression == "tenth_root":
        compressed = bands ** 0.1
    else:
        compressed = np.log(bands + LOG_FLOOR)
    ceps = compressed @ dct_matrix(cfg.n_ceps, bands.shape[1]).T
    std = ceps.std(axis=0)
    std[std < 1e-12] = 1.0
    normed = (ceps - ceps.mean(axis=0)) / std
    return FeatureMatrix(normed, cfg.shift_ms, cfg.window_ms)


def temporal_integration(magnitudes, rate, window_ms, shift_ms):
    """Hanning-weighted mean of channel magnitudes per analysis frame."""
    frame_len = int(round(rate * window_ms / 1000.0))
    shift = int(round(rate * shift_ms / 1000.0))
    n_frames = frame_count(magnitudes.shape[0], frame_len, shift)
    win = _WINDOWS["hann"](frame_len)
    win = win / win.sum()
    out = np.zeros((n_frames, magnitudes.shape[1]))
    for t in range(n_frames):
        out[t] = win @ magnitudes[t * shift : t * shift + frame_len]
    return out


def spectral_integration(frames, window, shift):
    """Mean over sliding channel windows; [T, C] -> [T, 1+(C-window)//shift]."""
    c = frames.shape[1]
    n_bands = 1 + (c - window) // shift
    out = np.zeros((frames.shape[0], n_bands))
    for b in range(n_bands):
        out[:, b] = frames[:, b * shift : b * shift + window].mean(axis=1)
    return out
