"""MFCC frontend and posterior smoothing.

A clip of ``clip_len_ms`` is cut into frames of ``frame_len_ms`` advanced by
``frame_stride_ms``; each frame goes through Hann window, magnitude spectrum,
triangular mel filterbank, log, and an orthonormal DCT-II, keeping the first
``num_mfcc`` coefficients.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class InvalidParamsError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class LengthMismatchError(InvalidInputError):
    pass


class WavFormatError(InvalidInputError):
    pass


@dataclass(frozen=True)
class FeatureParams:
    clip_len_ms: int = 1000
    frame_len_ms: int = 40
    frame_stride_ms: int = 20
    num_mfcc: int = 40
    sample_rate_hz: int = 16000
    num_mel_filters: int = 40
    fmin_hz: float = 20.0
    fmax_hz: float | None = None
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.frame_len_ms > self.clip_len_ms:
            raise InvalidParamsError("frame length exceeds clip length")
        if self.frame_len_ms <= 0 or self.frame_stride_ms < 1:
            raise InvalidParamsError("frame length and stride must be positive")
        if not 1 <= self.num_mfcc <= self.num_mel_filters:
            raise InvalidParamsError("need 1 <= num_mfcc <= num_mel_filters")
        if not 0 <= self.fmin_hz < self.upper_hz <= self.sample_rate_hz / 2:
            raise InvalidParamsError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise InvalidParamsError("log_floor must be positive")

    @property
    def upper_hz(self) -> float:
        return self.sample_rate_hz / 2 if self.fmax_hz is None else float(self.fmax_hz)

    @property
    def num_frames(self) -> int:
        return frame_count(self.clip_len_ms, self.frame_len_ms, self.frame_stride_ms)

    @property
    def clip_samples(self) -> int:
        return self.clip_len_ms * self.sample_rate_hz // 1000

    @property
    def frame_samples(self) -> int:
        return self.frame_len_ms * self.sample_rate_hz // 1000

    @property
    def stride_samples(self) -> int:
        return self.frame_stride_ms * self.sample_rate_hz // 1000

    @property
    def n_fft(self) -> int:
        return 1 << (self.frame_samples - 1).bit_length()

    @classmethod
    def from_config(cls, path, **overrides) -> "FeatureParams":
        """Load ``key = value`` lines; keyword overrides win over the file."""
        values = parse_key_values(Path(path).read_text(encoding="utf-8"))
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise InvalidParamsError(f"unknown feature parameter {key!r}")
            if raw.lower() == "none":
                kwargs[key] = None
            elif key in ("fmin_hz", "fmax_hz", "log_floor"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def with_(self, **changes) -> "FeatureParams":
        return replace(self, **changes)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParamsError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def frame_count(clip_len_ms: int, frame_len_ms: int, frame_stride_ms: int) -> int:
    if frame_stride_ms <= 0 or frame_len_ms > clip_len_ms:
        raise InvalidParamsError(
            f"invalid framing L={clip_len_ms} l={frame_len_ms} s={frame_stride_ms}"
        )
    return (clip_len_ms - frame_len_ms) // frame_stride_ms + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, n_fft: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters of peak 1 on the rfft bin grid, shape (num_filters, n_fft//2+1).

    Adjacent triangles share edges, so the weights at any bin sum to at most 1.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an (n, n) matrix acting on column vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def hann_window(n: int) -> np.ndarray:
    # periodic form
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(signal: np.ndarray, params: FeatureParams) -> np.ndarray:
    starts = np.arange(params.num_frames) * params.stride_samples
    idx = starts[:, None] + np.arange(params.frame_samples)[None, :]
    return signal[idx]


def extract_mfcc(signal, params: FeatureParams | None = None) -> np.ndarray:
    """Return the (num_frames, num_mfcc) MFCC matrix of one clip."""
    params = params or FeatureParams()
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("signal must be mono (1-d)")
    if x.shape[0] != params.clip_samples:
        raise LengthMismatchError(
            f"expected {params.clip_samples} samples, got {x.shape[0]}"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("signal contains non-finite samples")

    frames = frame_signal(x, params) * hann_window(params.frame_samples)
    spectrum = np.abs(np.fft.rfft(frames, n=params.n_fft, axis=1))
    fb = mel_filterbank(params.num_mel_filters, params.n_fft, params.sample_rate_hz,
                        params.fmin_hz, params.upper_hz)
    log_mel = np.log(spectrum @ fb.T + params.log_floor)
    return log_mel @ dct_matrix(params.num_mel_filters)[: params.num_mfcc].T


def smooth_posteriors(window: Sequence) -> np.ndarray:
    """Element-wise mean of a window of class-probability vectors."""
    probs = np.asarray(window, dtype=np.float64)
    if probs.size == 0:
        raise InvalidInputError("empty posterior window")
    if probs.ndim != 2:
        raise InvalidInputError("window must be a sequence of equal-length vectors")
    return probs.mean(axis=0)


def read_wav(path, sample_rate: int = 16000) -> np.ndarray:
    """Read mono 16-bit PCM into floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getframerate() != sample_rate:
                raise WavFormatError(
                    f"{path}: expected {sample_rate} Hz, got {w.getframerate()} Hz"
                )
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, signal, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(signal) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
