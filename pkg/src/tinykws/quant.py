"""8-bit fixed-point quantization and integer inference.

An 8-bit two's-complement code ``q`` with fraction length ``N`` stands for
``q * 2**-N``; ``N`` may be negative.  Each weight tensor and each activation
point carries its own ``N``.

The integer path multiplies 8-bit codes, accumulates, aligns operands of
different fraction lengths by exact left shifts, and requantizes with a
round-half-to-even right shift and saturation.  Gate pre-activations are
requantized to a Q8 index (clipped to +-8) into 4096-entry sigmoid/tanh
tables that return Q7 codes.  GRU and unprojected LSTM hidden states are Q7;
the LSTM cell state is a 16-bit code with 8 extra fraction bits.  Output
logits stay at accumulator precision since only softmax reads them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import (AvgPool, BasicLSTM, BatchNorm, Conv2D, DepthwiseSeparable, FullyConnected,
                    GRU, LSTM, LowRankLinear, ModelSpec, SoftmaxOutput)

QMIN, QMAX = -128, 127
N_MIN, N_MAX = -16, 16
GATE_FRAC = 8
GATE_LIMIT = 1 << 11  # gate inputs saturate at +-8.0
STATE_FRAC = 7
CELL_EXTRA_BITS = 8  # cell state is kept as a 16-bit code
MAX_TERMS = 1 << 16


@dataclass(frozen=True)
class QFormat:
    frac_bits: int

    def __post_init__(self):
        if not N_MIN <= self.frac_bits <= N_MAX:
            raise ValueError(f"fraction length {self.frac_bits} outside [{N_MIN}, {N_MAX}]")

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return QMIN * self.step

    @property
    def max_value(self) -> float:
        return QMAX * self.step


@dataclass
class QTensor:
    codes: np.ndarray
    frac_bits: int

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < QMIN or codes.max() > QMAX):
            raise ValueError("codes outside int8 range")
        self.codes = codes.astype(np.int8)

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return q_dequantize(self.codes, self.frac_bits)

    def __eq__(self, other):
        return (isinstance(other, QTensor) and self.frac_bits == other.frac_bits
                and self.codes.shape == other.codes.shape and np.array_equal(self.codes, other.codes))


def q_dequantize(code, frac_bits: int):
    return np.asarray(code, dtype=np.float64) * 2.0 ** -frac_bits


def q_quantize(value, frac_bits: int):
    """Round half to even, saturate to [-128, 127]."""
    v = np.asarray(value, dtype=np.float64)
    codes = np.clip(np.rint(v * 2.0 ** frac_bits), QMIN, QMAX).astype(np.int8)
    return codes if codes.ndim else codes[()]


def quantize_tensor(values, frac_bits: int) -> QTensor:
    return QTensor(q_quantize(values, frac_bits), frac_bits)


def choose_fraction_length(values, objective: str = "range") -> QFormat:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values to fit")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite values")
    if not np.any(v):
        return QFormat(7)
    candidates = range(N_MAX, N_MIN - 1, -1)
    if objective == "range":
        hi, lo = v.max(), v.min()
        for n in candidates:
            scale = 2.0 ** n
            if np.rint(hi * scale) <= QMAX and np.rint(lo * scale) >= QMIN:
                return QFormat(n)
        return QFormat(N_MIN)
    if objective == "sqnr":
        best, best_err = N_MAX, np.inf
        for n in candidates:  # descending, so ties keep the larger N
            err = np.sum((v - q_dequantize(q_quantize(v, n), n)) ** 2)
            if err < best_err:
                best, best_err = n, err
        return QFormat(best)
    raise ValueError(f"unknown objective {objective!r}")


# -- integer primitives -------------------------------------------------------

def rshift_round(x, shift: int):
    """Arithmetic right shift with round half to even."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << -shift
    q = x >> shift
    rem = x - (q << shift)
    half = np.int64(1) << (shift - 1)
    return q + ((rem > half) | ((rem == half) & (q & 1 == 1)))


def div_round(x, d: int):
    q, r = np.divmod(np.asarray(x, dtype=np.int64), d)
    return q + ((2 * r > d) | ((2 * r == d) & (q & 1 == 1)))


def saturate(x):
    return np.clip(x, QMIN, QMAX).astype(np.int64)


def _check_range(acc):
    if acc.size and np.abs(acc).max() >= (1 << 62):
        raise OverflowError("accumulator exceeds 64-bit headroom")
    return acc


def align_sum(*terms):
    """Sum (codes, frac) operands exactly at the largest fraction length."""
    target = max(n for _, n in terms)
    acc = 0
    for codes, n in terms:
        if target - n > 62:
            raise OverflowError("fraction lengths too far apart to align")
        acc = acc + (np.asarray(codes, dtype=np.int64) << (target - n))
    return _check_range(np.asarray(acc, dtype=np.int64)), target


def requantize(acc, acc_frac: int, out_frac: int):
    return saturate(rshift_round(acc, acc_frac - out_frac))


def int_matmul(W, x):
    W = np.asarray(W, dtype=np.int64)
    if W.shape[-1] > MAX_TERMS:
        raise OverflowError(f"{W.shape[-1]} accumulation terms exceed {MAX_TERMS}")
    return W @ np.asarray(x, dtype=np.int64)


def saturate16(x):
    return np.clip(x, -(1 << 15), (1 << 15) - 1).astype(np.int64)


def _lut(fn):
    x = np.arange(-GATE_LIMIT, GATE_LIMIT) * 2.0 ** -GATE_FRAC
    return q_quantize(fn(x), STATE_FRAC).astype(np.int64)


SIGMOID_LUT = _lut(kernels.sigmoid)
TANH_LUT = _lut(np.tanh)


def gate_code(acc, acc_frac: int):
    """Requantize a gate pre-activation to the table index format."""
    return np.clip(rshift_round(acc, acc_frac - GATE_FRAC), -GATE_LIMIT, GATE_LIMIT - 1)


def q_sigmoid(acc, acc_frac: int):
    return SIGMOID_LUT[gate_code(acc, acc_frac) + GATE_LIMIT]


def q_tanh(acc, acc_frac: int):
    return TANH_LUT[gate_code(acc, acc_frac) + GATE_LIMIT]


# -- activation points ---------------------------------------------------------

def activation_points(model: ModelSpec) -> list[str]:
    """Keys of activation tensors whose fraction length is chosen by calibration."""
    keys = ["input"]
    for ls in model.shapes:
        layer, i = ls.layer, ls.index
        if isinstance(layer, (FullyConnected, LowRankLinear, Conv2D)):
            if i != len(model.layers) - 2:
                keys.append(str(i))
        elif isinstance(layer, DepthwiseSeparable):
            keys += [f"{i}.dw", str(i)]
        elif isinstance(layer, (BasicLSTM, LSTM)):
            keys.append(f"{i}.c")
            if isinstance(layer, LSTM) and layer.projection is not None:
                keys.append(str(i))
    return keys


def observe_activations(model: ModelSpec, weights: dict, features) -> dict[str, np.ndarray]:
    """Float64 values at every activation point for one input."""
    seen = {}
    x = np.asarray(features, dtype=np.float64).reshape(model.input_shape)
    seen["input"] = x
    w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    for ls in model.shapes[:-1]:
        layer, i = ls.layer, ls.index
        p = kernels.layer_params(w, i)
        if isinstance(layer, DepthwiseSeparable):
            mid = kernels.depthwise_forward(x, p["dw"], p["dw_b"], layer.stride)
            seen[f"{i}.dw"] = mid
            x = kernels.relu(mid @ p["pw"] + p["pw_b"])
            seen[str(i)] = x
        elif isinstance(layer, (BasicLSTM, LSTM)):
            seq = x.reshape(ls.in_shape)
            peep = p.get("peep") if isinstance(layer, LSTM) else None
            proj = p.get("P") if isinstance(layer, LSTM) else None
            n_h = layer.output_size if isinstance(layer, LSTM) else layer.cells
            state = kernels.RnnState(np.zeros(n_h), np.zeros(layer.cells))
            hs, cs = [], []
            for f_t in seq:
                h, c = kernels.lstm_step(f_t, state, p["W"], p["b"], peep, proj)
                state = kernels.RnnState(h, c)
                hs.append(h)
                cs.append(c)
            seen[f"{i}.c"] = np.stack(cs)
            hs = np.stack(hs)
            if proj is not None:
                seen[str(i)] = hs
            x = hs if len(ls.out_shape) == 2 else hs[-1]
        else:
            x = kernels.forward_layer(ls, x, p, np.float64)
            if not isinstance(layer, (AvgPool, BatchNorm, GRU)):
                seen[str(i)] = x
    return seen


def range_formats(model: ModelSpec, weights: dict, calibration) -> dict[str, int]:
    peaks: dict[str, list] = {}
    for feats in calibration:
        for key, val in observe_activations(model, weights, feats).items():
            lo, hi = float(val.min()), float(val.max())
            cur = peaks.setdefault(key, [lo, hi])
            cur[0], cur[1] = min(cur[0], lo), max(cur[1], hi)
    return {key: choose_fraction_length(np.array(peaks[key]), "range").frac_bits
            for key in activation_points(model)}


# -- integer inference -----------------------------------------------------------

def _codes(qweights, i, name):
    t = qweights[f"{i}/{name}"]
    return t.codes.astype(np.int64), t.frac_bits


def _q_recurrent(layer, i, seq, x_frac, qw, fmt):
    W, nw = _codes(qw, i, "W")
    b, nb = _codes(qw, i, "b")
    n_in = seq.shape[1]
    Wx, Wh = W[:, :n_in], W[:, n_in:]
    if isinstance(layer, GRU):
        n = layer.cells
        h = np.zeros(n, dtype=np.int64)
        out = []
        for x in seq:
            zr, zr_n = align_sum((int_matmul(Wx[:2 * n], x), nw + x_frac),
                                 (int_matmul(Wh[:2 * n], h), nw + STATE_FRAC), (b[:2 * n], nb))
            gates = q_sigmoid(zr, zr_n)
            z, r = gates[:n], gates[n:]
            rh = requantize(r * h, 2 * STATE_FRAC, STATE_FRAC)
            c_acc, c_n = align_sum((int_matmul(Wx[2 * n:], x), nw + x_frac),
                                   (int_matmul(Wh[2 * n:], rh), nw + STATE_FRAC), (b[2 * n:], nb))
            cand = q_tanh(c_acc, c_n)
            h = requantize((128 - z) * cand + z * h, 2 * STATE_FRAC, STATE_FRAC)
            out.append(h)
        return np.stack(out), STATE_FRAC

    n = layer.cells
    c_frac = fmt[f"{i}.c"] + CELL_EXTRA_BITS
    projected = isinstance(layer, LSTM) and layer.projection is not None
    h_frac = fmt[str(i)] if projected else STATE_FRAC
    if isinstance(layer, LSTM):
        peep, npeep = _codes(qw, i, "peep")
    h = np.zeros(Wh.shape[1], dtype=np.int64)
    c = np.zeros(n, dtype=np.int64)
    out = []
    for x in seq:
        pre, pre_n = align_sum((int_matmul(Wx, x), nw + x_frac),
                               (int_matmul(Wh, h), nw + h_frac), (b, nb))
        parts = [pre[:n], pre[n:2 * n], pre[2 * n:3 * n], pre[3 * n:]]
        fracs = [pre_n] * 4
        if isinstance(layer, LSTM):
            for g, row in ((0, 0), (1, 1)):
                parts[g], fracs[g] = align_sum((parts[g], fracs[g]), (peep[row] * c, npeep + c_frac))
        ig = q_sigmoid(parts[0], fracs[0])
        fg = q_sigmoid(parts[1], fracs[1])
        gg = q_tanh(parts[2], fracs[2])
        c_acc, c_n = align_sum((fg * c, STATE_FRAC + c_frac), (ig * gg, 2 * STATE_FRAC))
        c = saturate16(rshift_round(c_acc, c_n - c_frac))
        o_acc, o_n = parts[3], fracs[3]
        if isinstance(layer, LSTM):
            o_acc, o_n = align_sum((o_acc, o_n), (peep[2] * c, npeep + c_frac))
        og = q_sigmoid(o_acc, o_n)
        tc = q_tanh(c, c_frac)
        m = requantize(og * tc, 2 * STATE_FRAC, STATE_FRAC)
        if projected:
            P, npj = _codes(qw, i, "P")
            h = requantize(int_matmul(P, m), npj + STATE_FRAC, h_frac)
        else:
            h = m
        out.append(h)
    return np.stack(out), h_frac


def q_model_logits(model: ModelSpec, qweights: dict, act_formats: dict, features):
    """Integer forward pass; returns (logit codes, logit fraction length)."""
    fmt = act_formats
    x = q_quantize(np.asarray(features, dtype=np.float64).reshape(model.input_shape),
                   fmt["input"]).astype(np.int64)
    frac = fmt["input"]
    output_index = len(model.layers) - 2
    for ls in model.shapes[:-1]:
        layer, i = ls.layer, ls.index
        if isinstance(layer, (FullyConnected, LowRankLinear)):
            W, nw = _codes(qweights, i, "W")
            b, nb = _codes(qweights, i, "b")
            acc, acc_n = align_sum((int_matmul(W, x.reshape(-1)), nw + frac), (b, nb))
            if i == output_index:
                # logits feed the real-valued softmax only; keep accumulator precision
                return acc, acc_n
            x = requantize(acc, acc_n, fmt[str(i)])
            if isinstance(layer, FullyConnected) and layer.relu:
                x = np.maximum(x, 0)
            frac = fmt[str(i)]
        elif isinstance(layer, Conv2D):
            W, nw = _codes(qweights, i, "W")
            b, nb = _codes(qweights, i, "b")
            win = kernels.patches(x, layer.kernel_t, layer.kernel_f, layer.stride_t,
                                  layer.stride_f, layer.padding)
            if W.shape[0] * W.shape[1] * W.shape[2] > MAX_TERMS:
                raise OverflowError("too many accumulation terms")
            acc = np.einsum("tfcij,ijco->tfo", win, W)
            acc, acc_n = align_sum((acc, nw + frac), (b, nb))
            x = np.maximum(requantize(acc, acc_n, fmt[str(i)]), 0)
            frac = fmt[str(i)]
        elif isinstance(layer, DepthwiseSeparable):
            dw, ndw = _codes(qweights, i, "dw")
            dwb, ndwb = _codes(qweights, i, "dw_b")
            pw, npw = _codes(qweights, i, "pw")
            pwb, npwb = _codes(qweights, i, "pw_b")
            win = kernels.patches(x, layer.kernel, layer.kernel, layer.stride, layer.stride, "same")
            acc, acc_n = align_sum((np.einsum("tfcij,ijc->tfc", win, dw), ndw + frac), (dwb, ndwb))
            mid_frac = fmt[f"{i}.dw"]
            mid = requantize(acc, acc_n, mid_frac)
            if pw.shape[0] > MAX_TERMS:
                raise OverflowError("too many accumulation terms")
            acc, acc_n = align_sum((mid @ pw, npw + mid_frac), (pwb, npwb))
            x = np.maximum(requantize(acc, acc_n, fmt[str(i)]), 0)
            frac = fmt[str(i)]
        elif isinstance(layer, AvgPool):
            count = x.shape[0] * x.shape[1]
            x = saturate(div_round(x.sum(axis=(0, 1)), count))
        elif isinstance(layer, (GRU, BasicLSTM, LSTM)):
            seq, frac = _q_recurrent(layer, i, x.reshape(ls.in_shape), frac, qweights, fmt)
            x = seq if len(ls.out_shape) == 2 else seq[-1]
        elif isinstance(layer, (BatchNorm, SoftmaxOutput)):
            pass
    return x, frac


def q_model_forward(model: ModelSpec, qweights: dict, act_formats: dict, features):
    codes, frac = q_model_logits(model, qweights, act_formats, features)
    return kernels.softmax(q_dequantize(codes, frac))


# -- progressive flow ----------------------------------------------------------------

def quantize_weights(weights: dict, formats: dict[str, int]) -> dict:
    return {name: quantize_tensor(np.asarray(w, dtype=np.float64), formats[name])
            for name, w in weights.items()}


def dequantize_weights(qweights: dict) -> dict:
    return {name: t.dequantize() for name, t in qweights.items()}


@dataclass
class LayerQuantReport:
    index: int
    layer: str
    weight_fracs: dict
    act_fracs: dict
    metric_before: float
    metric_after: float


@dataclass
class QuantResult:
    qweights: dict
    act_formats: dict
    float_metric: float
    quant_metric: float
    metric_name: str
    layers: list = field(default_factory=list)

    def table(self) -> str:
        rows = [f"metric: {self.metric_name}; float {self.float_metric:.6g} -> "
                f"quantized {self.quant_metric:.6g}",
                f"{'#':>3} {'layer':<22} {'weight N':<28} {'act N':<22} {'before':>10} {'after':>10}"]
        for r in self.layers:
            wn = ",".join(f"{k}={v}" for k, v in r.weight_fracs.items()) or "-"
            an = ",".join(f"{k}={v}" for k, v in r.act_fracs.items()) or "-"
            rows.append(f"{r.index:>3} {r.layer:<22} {wn:<28} {an:<22} "
                        f"{r.metric_before:>10.6g} {r.metric_after:>10.6g}")
        return "\n".join(rows)


class Calibration:
    """Scores a set of probability outputs against labels or a float reference."""

    def __init__(self, features, labels=None, reference=None):
        self.features = [np.asarray(f, dtype=np.float64) for f in features]
        if not self.features:
            raise ValueError("empty calibration set")
        self.labels = None if labels is None else np.asarray(labels)
        self.reference = None if reference is None else np.asarray(reference)
        if self.labels is None and self.reference is None:
            raise ValueError("need labels or reference outputs")

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.labels is not None else "neg_mse"

    def score(self, probs) -> float:
        probs = np.asarray(probs)
        if self.labels is not None:
            return float(np.mean(np.argmax(probs, axis=1) == self.labels))
        return -float(np.mean((probs - self.reference) ** 2))


def float_outputs(model, weights, features) -> np.ndarray:
    return np.stack([kernels.model_forward(model, f, weights, dtype=np.float64) for f in features])


def quant_outputs(model, qweights, act_formats, features) -> np.ndarray:
    return np.stack([q_model_forward(model, qweights, act_formats, f) for f in features])


def _sweep(center: int, window: int, evaluate):
    """Best N in [center-window, center+window]; ties go to the larger N."""
    lo, hi = max(N_MIN, center - window), min(N_MAX, center + window)
    best_n, best = None, -np.inf
    for n in range(hi, lo - 1, -1):
        score = evaluate(n)
        if score > best:
            best_n, best = n, score
    return best_n, best


def quantize_model_progressive(model: ModelSpec, weights: dict, calibration, labels=None,
                               window: int = 2) -> QuantResult:
    """Quantize weights one layer at a time, then activations, by calibration metric.

    With ``labels`` the metric is top-1 accuracy; otherwise it is the negative
    mean squared error of the output probabilities against the float model.
    """
    feats = list(calibration)
    ref = float_outputs(model, weights, feats)
    calib = Calibration(feats, labels, ref)
    float_metric = calib.score(ref)

    current = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    weight_fracs: dict[str, int] = {}
    per_layer: dict[int, LayerQuantReport] = {}
    for name in kernels.weight_shapes(model):
        i = int(name.split("/")[0])
        rep = per_layer.setdefault(i, LayerQuantReport(i, type(model.layers[i]).__name__, {}, {},
                                                       calib.score(float_outputs(model, current, feats)), 0.0))
        original = current[name]
        center = choose_fraction_length(original, "range").frac_bits

        def evaluate(n, name=name, original=original):
            trial = dict(current)
            trial[name] = q_dequantize(q_quantize(original, n), n)
            return calib.score(float_outputs(model, trial, feats))

        n, score = _sweep(center, window, evaluate)
        weight_fracs[name] = n
        current[name] = q_dequantize(q_quantize(original, n), n)
        rep.weight_fracs[name.split("/")[1]] = n
        rep.metric_after = score

    qweights = quantize_weights(weights, weight_fracs)
    formats = range_formats(model, current, feats)
    for key in activation_points(model):

        def evaluate(n, key=key):
            return calib.score(quant_outputs(model, qweights, {**formats, key: n}, feats))

        n, score = _sweep(formats[key], window, evaluate)
        formats[key] = n
        i = key.split(".")[0]
        if i != "input":
            rep = per_layer[int(i)]
            rep.act_fracs[key.split(".")[1] if "." in key else "out"] = n
            rep.metric_after = score

    quant_metric = calib.score(quant_outputs(model, qweights, formats, feats))
    result = QuantResult(qweights, formats, float_metric, quant_metric, calib.metric_name,
                         [per_layer[i] for i in sorted(per_layer)])
    return result
