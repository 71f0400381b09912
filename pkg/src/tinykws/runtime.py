"""Clip and streaming keyword decisions on top of the float or integer path."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels, quant
from .features import FeatureParams, InvalidInputError, InvalidParamsError, extract_mfcc, smooth_posteriors
from .model import ModelSpec
from .weights_io import is_quantized, unpack_quantized


@dataclass
class KeywordDecision:
    label: str
    probability: float
    probs: np.ndarray
    latency_ms: float
    start_ms: int = 0

    def to_dict(self) -> dict:
        return {"label": self.label, "probability": self.probability,
                "probs": [float(p) for p in self.probs], "latency_ms": self.latency_ms,
                "start_ms": self.start_ms}


def feature_params_for(model: ModelSpec, base: FeatureParams | None = None) -> FeatureParams:
    """Frontend settings matching the model's (T, F) input.

    ``num_mfcc`` comes from the model; the stride is solved from T when the
    base settings would give a different frame count.
    """
    base = base or FeatureParams()
    t, f = model.input_shape[:2]
    params = base.with_(num_mfcc=f, num_mel_filters=max(base.num_mel_filters, f))
    if params.num_frames == t:
        return params
    span = params.clip_len_ms - params.frame_len_ms
    if t > 1 and span % (t - 1) == 0:
        params = params.with_(frame_stride_ms=span // (t - 1))
        if params.num_frames == t:
            return params
    raise InvalidParamsError(f"no frame stride gives {t} frames for a {params.clip_len_ms} ms clip "
                             f"with {params.frame_len_ms} ms frames")


class Detector:
    """One model plus weights; float32 when weights are real, integer when 8-bit."""

    def __init__(self, model: ModelSpec, weights: dict, params: FeatureParams | None = None):
        self.model = model
        self.params = feature_params_for(model, params)
        self.quantized = is_quantized(weights)
        if self.quantized:
            self.qweights, self.act_formats = unpack_quantized(weights)
            missing = set(quant.activation_points(model)) - set(self.act_formats)
            if missing:
                raise ValueError(f"quantized weights lack activation formats {sorted(missing)}")
            kernels.check_weights(model, self.qweights)
        else:
            kernels.check_weights(model, weights)
            self.weights = weights

    def probabilities(self, features) -> np.ndarray:
        if self.quantized:
            return quant.q_model_forward(self.model, self.qweights, self.act_formats, features)
        return kernels.model_forward(self.model, features, self.weights)

    def _decide(self, probs, latency_ms, start_ms=0) -> KeywordDecision:
        k = int(np.argmax(probs))  # ties go to the lowest index
        return KeywordDecision(self.model.labels[k], float(probs[k]), np.asarray(probs),
                               latency_ms, start_ms)

    def classify_features(self, features) -> KeywordDecision:
        t0 = time.perf_counter()
        probs = self.probabilities(features)
        return self._decide(probs, (time.perf_counter() - t0) * 1e3)

    def classify_clip(self, signal) -> KeywordDecision:
        t0 = time.perf_counter()
        probs = self.probabilities(extract_mfcc(signal, self.params))
        return self._decide(probs, (time.perf_counter() - t0) * 1e3)

    def stream(self, signal, hop_ms: int = 100, smooth: int = 10):
        """Yield one smoothed decision per hop of a sliding clip-length window."""
        if hop_ms < 1 or smooth < 1:
            raise InvalidParamsError("hop and smoothing window must be positive")
        signal = np.asarray(signal, dtype=np.float64)
        clip = self.params.clip_samples
        hop = hop_ms * self.params.sample_rate_hz // 1000
        if signal.shape[0] < clip:
            raise InvalidInputError(f"stream shorter than one {self.params.clip_len_ms} ms window")
        recent = deque(maxlen=smooth)
        for start in range(0, signal.shape[0] - clip + 1, hop):
            t0 = time.perf_counter()
            recent.append(self.probabilities(extract_mfcc(signal[start:start + clip], self.params)))
            probs = smooth_posteriors(recent)
            yield self._decide(probs, (time.perf_counter() - t0) * 1e3,
                               start * 1000 // self.params.sample_rate_hz)


def stream_steps(num_samples: int, clip_samples: int, hop_samples: int) -> int:
    if num_samples < clip_samples:
        return 0
    return (num_samples - clip_samples) // hop_samples + 1
