"""Floating-point reference kernels and full-model inference.

Kernels keep the dtype of their inputs (float64 in, float64 out), so the same
code serves the float32 deployment reference and float64 checks.  Convolution
is cross-correlation; image tensors are laid out (time, freq, channels).

Weights for a model live in a flat ``dict`` keyed ``"<layer>/<name>"``:

=================  ==========================================================
layer              tensors
=================  ==========================================================
FC / L / output    ``W`` (out, in), ``b`` (out,)
Conv2D             ``W`` (kt, kf, cin, cout), ``b`` (cout,)
DepthwiseSeparable ``dw`` (k, k, c), ``dw_b`` (c,), ``pw`` (c, f), ``pw_b`` (f,)
GRU                ``W`` (3n, in+n) rows z|r|h, ``b`` (3n,)
BasicLSTM          ``W`` (4n, in+n) rows i|f|g|o, ``b`` (4n,)
LSTM               as BasicLSTM with ``in+p`` columns, ``peep`` (3, n) for
                   i|f|o and, if projected, ``P`` (p, n)
=================  ==========================================================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import (AvgPool, BasicLSTM, BatchNorm, Conv2D, DepthwiseSeparable, FullyConnected,
                    GRU, LSTM, LowRankLinear, ModelSpec, SoftmaxOutput, ShapeError)


class DimensionError(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def fc_forward(x, weights, bias, relu_: bool = False):
    x = np.asarray(x)
    if weights.ndim != 2 or weights.shape[1] != x.shape[-1] or bias.shape != (weights.shape[0],):
        raise DimensionError(f"fc: W {weights.shape}, b {bias.shape}, x {x.shape}")
    y = weights @ x + bias
    return relu(y) if relu_ else y


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pad_image(x, kernel_t, kernel_f, stride_t, stride_f, padding):
    if padding == "valid":
        return x
    pt = same_padding(x.shape[0], kernel_t, stride_t)
    pf = same_padding(x.shape[1], kernel_f, stride_f)
    return np.pad(x, (pt, pf, (0, 0)))


def patches(x, kernel_t, kernel_f, stride_t, stride_f, padding="valid"):
    """Sliding patches, shape (t_out, f_out, c, kt, kf)."""
    x = _pad_image(x, kernel_t, kernel_f, stride_t, stride_f, padding)
    if x.shape[0] < kernel_t or x.shape[1] < kernel_f:
        raise DimensionError(f"kernel {kernel_t}x{kernel_f} larger than input {x.shape[:2]}")
    win = sliding_window_view(x, (kernel_t, kernel_f), axis=(0, 1))
    return win[::stride_t, ::stride_f]


def conv2d_forward(x, kernel, bias, stride=(1, 1), padding="valid", relu_: bool = True):
    x = np.asarray(x)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"conv: x {x.shape}, kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise DimensionError(f"conv: bias {bias.shape} for {kernel.shape[3]} filters")
    kt, kf = kernel.shape[:2]
    win = patches(x, kt, kf, stride[0], stride[1], padding)
    y = np.einsum("tfcij,ijco->tfo", win, kernel, optimize=True) + bias
    return relu(y) if relu_ else y


def depthwise_forward(x, kernel, bias, stride: int = 1, padding="same"):
    x = np.asarray(x)
    if x.ndim != 3 or kernel.ndim != 3 or kernel.shape[2] != x.shape[2] or bias.shape != (x.shape[2],):
        raise DimensionError(f"depthwise: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    k = kernel.shape[0]
    win = patches(x, k, kernel.shape[1], stride, stride, padding)
    return np.einsum("tfcij,ijc->tfc", win, kernel, optimize=True) + bias


def ds_conv_forward(x, dw, pw, dw_bias, pw_bias, stride: int = 1):
    """Depthwise (same padding) then pointwise 1x1 then ReLU."""
    if pw.ndim != 2 or pw.shape[0] != dw.shape[2] or pw_bias.shape != (pw.shape[1],):
        raise DimensionError(f"pointwise: {pw.shape}, bias {pw_bias.shape}")
    mid = depthwise_forward(x, dw, dw_bias, stride)
    return relu(mid @ pw + pw_bias)


def ds_as_conv(dw, pw, dw_bias, pw_bias):
    """Equivalent dense kernel and bias of a depthwise + pointwise pair."""
    kernel = dw[:, :, :, None] * pw[None, None, :, :]
    return kernel, dw_bias @ pw + pw_bias


def avg_pool_global(x):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] * x.shape[1] == 0:
        raise DimensionError(f"avg pool needs a non-empty 3-d tensor, got {x.shape}")
    return x.mean(axis=(0, 1))


def fold_batchnorm(W, b, gamma, beta, mean, var, eps: float = 1e-3):
    """Fold per-output-channel batch norm into the preceding layer.

    ``W`` has output channels on its last axis (conv kernels) or first axis
    when 2-d (FC rows); ``b`` is per output channel.
    """
    var = np.asarray(var)
    if np.any(var < 0):
        raise ValueError("negative variance")
    scale = gamma / np.sqrt(var + eps)
    if W.ndim == 2:
        W2 = W * scale[:, None]
    else:
        W2 = W * scale
    return W2, (b - mean) * scale + beta


@dataclass
class RnnState:
    h: np.ndarray
    c: np.ndarray | None = None


def gru_step(f_t, h_prev, W, b):
    n, n_in = h_prev.shape[0], f_t.shape[0]
    if W.shape != (3 * n, n_in + n) or b.shape != (3 * n,):
        raise DimensionError(f"gru: W {W.shape}, b {b.shape}, in {n_in}, cells {n}")
    xz = np.concatenate([f_t, h_prev])
    z = sigmoid(W[:n] @ xz + b[:n])
    r = sigmoid(W[n:2 * n] @ xz + b[n:2 * n])
    cand = np.tanh(W[2 * n:, :n_in] @ f_t + W[2 * n:, n_in:] @ (r * h_prev) + b[2 * n:])
    return (1 - z) * cand + z * h_prev


def lstm_step(f_t, state: RnnState, W, b, peep=None, P=None):
    h_prev, c_prev = state.h, state.c
    n = c_prev.shape[0]
    if W.shape != (4 * n, f_t.shape[0] + h_prev.shape[0]) or b.shape != (4 * n,):
        raise DimensionError(f"lstm: W {W.shape}, b {b.shape}")
    if P is not None and P.shape != (h_prev.shape[0], n):
        raise DimensionError(f"lstm: projection {P.shape}")
    pre = W @ np.concatenate([f_t, h_prev]) + b
    i_pre, f_pre, g_pre, o_pre = pre[:n], pre[n:2 * n], pre[2 * n:3 * n], pre[3 * n:]
    if peep is not None:
        i_pre = i_pre + peep[0] * c_prev
        f_pre = f_pre + peep[1] * c_prev
    c = sigmoid(f_pre) * c_prev + sigmoid(i_pre) * np.tanh(g_pre)
    if peep is not None:
        o_pre = o_pre + peep[2] * c
    m = sigmoid(o_pre) * np.tanh(c)
    h = P @ m if P is not None else m
    return h, c


def run_recurrent(layer, seq, params: dict, dtype=np.float64):
    """Run a recurrent layer over a (T, n_in) sequence; returns (T, n_out)."""
    if isinstance(layer, GRU):
        h = np.zeros(layer.cells, dtype=dtype)
        out = []
        for f_t in seq:
            h = gru_step(f_t, h, params["W"], params["b"])
            out.append(h)
        return np.stack(out)
    if isinstance(layer, BasicLSTM):
        state = RnnState(np.zeros(layer.cells, dtype), np.zeros(layer.cells, dtype))
        peep = P = None
    else:
        state = RnnState(np.zeros(layer.output_size, dtype), np.zeros(layer.cells, dtype))
        peep, P = params["peep"], params.get("P")
    out = []
    for f_t in seq:
        h, c = lstm_step(f_t, state, params["W"], params["b"], peep, P)
        state = RnnState(h, c)
        out.append(h)
    return np.stack(out)


def weight_shapes(model: ModelSpec) -> dict[str, tuple]:
    shapes = {}
    for ls in model.shapes:
        i, layer = ls.index, ls.layer
        if isinstance(layer, (FullyConnected, LowRankLinear)):
            n_in = int(np.prod(ls.in_shape))
            shapes[f"{i}/W"] = (layer.units, n_in)
            shapes[f"{i}/b"] = (layer.units,)
        elif isinstance(layer, Conv2D):
            shapes[f"{i}/W"] = (layer.kernel_t, layer.kernel_f, ls.in_shape[2], layer.features)
            shapes[f"{i}/b"] = (layer.features,)
        elif isinstance(layer, DepthwiseSeparable):
            c = ls.in_shape[2]
            shapes[f"{i}/dw"] = (layer.kernel, layer.kernel, c)
            shapes[f"{i}/dw_b"] = (c,)
            shapes[f"{i}/pw"] = (c, layer.features)
            shapes[f"{i}/pw_b"] = (layer.features,)
        elif isinstance(layer, GRU):
            n, n_in = layer.cells, ls.in_shape[1]
            shapes[f"{i}/W"] = (3 * n, n_in + n)
            shapes[f"{i}/b"] = (3 * n,)
        elif isinstance(layer, BasicLSTM):
            n, n_in = layer.cells, ls.in_shape[1]
            shapes[f"{i}/W"] = (4 * n, n_in + n)
            shapes[f"{i}/b"] = (4 * n,)
        elif isinstance(layer, LSTM):
            n, n_in, p = layer.cells, ls.in_shape[1], layer.output_size
            shapes[f"{i}/W"] = (4 * n, n_in + p)
            shapes[f"{i}/b"] = (4 * n,)
            shapes[f"{i}/peep"] = (3, n)
            if layer.projection is not None:
                shapes[f"{i}/P"] = (p, n)
    return shapes


def init_weights(model: ModelSpec, seed: int = 0, scale: float = 0.5, dtype=np.float32):
    """Seeded uniform [-scale, scale] weights (training is out of scope)."""
    rng = np.random.default_rng(seed)
    return {name: rng.uniform(-scale, scale, size=shape).astype(dtype)
            for name, shape in weight_shapes(model).items()}


def layer_params(weights: dict, index: int) -> dict:
    prefix = f"{index}/"
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


def check_weights(model: ModelSpec, weights: dict) -> None:
    expected = weight_shapes(model)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeError(f"missing weight {name!r} ({model.layers[int(name.split('/')[0])]})")
        if tuple(weights[name].shape) != shape:
            layer = model.layers[int(name.split("/")[0])]
            raise ShapeError(f"weight {name!r} for {layer}: expected {shape}, got {weights[name].shape}")


def forward_layer(ls, x, params, dtype):
    layer = ls.layer
    if isinstance(layer, (FullyConnected, LowRankLinear)):
        act = isinstance(layer, FullyConnected) and layer.relu
        return fc_forward(x.reshape(-1), params["W"], params["b"], act)
    if isinstance(layer, Conv2D):
        return conv2d_forward(x, params["W"], params["b"], (layer.stride_t, layer.stride_f),
                              layer.padding, relu_=True)
    if isinstance(layer, DepthwiseSeparable):
        return ds_conv_forward(x, params["dw"], params["pw"], params["dw_b"], params["pw_b"],
                               layer.stride)
    if isinstance(layer, AvgPool):
        return avg_pool_global(x)
    if isinstance(layer, (GRU, BasicLSTM, LSTM)):
        seq = run_recurrent(layer, x.reshape(ls.in_shape), params, dtype)
        return seq if len(ls.out_shape) == 2 else seq[-1]
    if isinstance(layer, (BatchNorm, SoftmaxOutput)):
        return x
    raise TypeError(f"no kernel for {layer!r}")


def model_logits(model: ModelSpec, features, weights: dict, dtype=np.float32, act_hook=None):
    """Run every layer but the softmax. ``act_hook(key, x)`` may rewrite activations."""
    check_weights(model, weights)
    x = np.asarray(features, dtype=dtype)
    if x.shape[:2] != tuple(model.input_shape[:2]):
        raise ShapeError(f"features {x.shape} do not match model input {model.input_shape[:2]}")
    x = x.reshape(model.input_shape)
    if act_hook is not None:
        x = act_hook("input", x)
    w = {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}
    for ls in model.shapes[:-1]:
        x = forward_layer(ls, x, layer_params(w, ls.index), dtype)
        if act_hook is not None:
            x = act_hook(str(ls.index), x)
    return x


def model_forward(model: ModelSpec, features, weights: dict, dtype=np.float32):
    """Class probabilities for one T x F feature matrix."""
    return softmax(model_logits(model, features, weights, dtype))
