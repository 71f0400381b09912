"""Memory and operation accounting for 8-bit KWS models.

Rules, all counts per inference:

* parameters are 1 byte each (8-bit weights), batch norm is folded away;
* activations are 1 byte each and buffers are reused, so the activation
  term is the largest (input + output) working set of any single layer;
  a recurrent layer's working set is its buffered input sequence plus two
  copies of its state plus its output;
* ops count a multiply-accumulate as 2 and a bias add as 1; gate
  nonlinearities, softmax and the MFCC frontend are excluded.

``KB`` is 1000 bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .model import (AvgPool, BasicLSTM, BatchNorm, Conv2D, DepthwiseSeparable, FullyConnected,
                    GRU, LSTM, LowRankLinear, ModelSpec, SoftmaxOutput, print_model_dsl)


@dataclass(frozen=True)
class ConstraintClass:
    name: str
    memory_limit_kb: float
    ops_limit: int

    @property
    def memory_limit_bytes(self) -> int:
        return int(round(self.memory_limit_kb * 1000))

    def fits(self, memory_bytes: int, ops: int) -> bool:
        # budgets are stated in 0.1 KB resolution
        return round(memory_bytes / 100) * 100 <= self.memory_limit_bytes and ops <= self.ops_limit


SMALL = ConstraintClass("S", 80, 6_000_000)
MEDIUM = ConstraintClass("M", 200, 20_000_000)
LARGE = ConstraintClass("L", 500, 80_000_000)
CLASSES = {c.name: c for c in (SMALL, MEDIUM, LARGE)}


@dataclass(frozen=True)
class LayerCost:
    index: int
    layer: str
    in_shape: tuple
    out_shape: tuple
    param_count: int
    act_in_elems: int
    act_out_elems: int
    ops: int
    working_set: int

    @property
    def param_bytes(self) -> int:
        return self.param_count


@dataclass
class ResourceReport:
    model: str
    layers: list[LayerCost]
    param_bytes: int = 0
    activation_bytes: int = 0
    ops: int = 0
    constraint: ConstraintClass | None = field(default=None)

    @property
    def memory_bytes(self) -> int:
        return self.param_bytes + self.activation_bytes

    @property
    def memory_kb(self) -> float:
        return self.memory_bytes / 1000

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "layers": [dict(asdict(l), param_bytes=l.param_bytes) for l in self.layers],
            "total_param_bytes": self.param_bytes,
            "total_activation_bytes": self.activation_bytes,
            "total_memory_bytes": self.memory_bytes,
            "total_memory_kb": self.memory_kb,
            "total_ops": self.ops,
            "class": self.constraint.name if self.constraint else None,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        rows = [f"{'#':>3} {'layer':<34} {'in':>14} {'out':>14} {'params':>9} {'acts':>8} {'ops':>11}"]
        for l in self.layers:
            rows.append(f"{l.index:>3} {l.layer:<34} {str(l.in_shape):>14} {str(l.out_shape):>14} "
                        f"{l.param_count:>9} {l.working_set:>8} {l.ops:>11}")
        cls = self.constraint.name if self.constraint else "none"
        rows.append(f"total: {self.memory_kb:.1f} KB, {format_ops(self.ops)}, class {cls} "
                    f"({self.param_bytes} B weights + {self.activation_bytes} B activations)")
        return "\n".join(rows)


def format_ops(ops: int) -> str:
    if ops >= 1_000_000:
        return f"{ops / 1e6:.1f} MOps"
    return f"{ops / 1e3:.1f} KOps"


def _recurrent_dims(layer, n_in):
    """(params, ops per step, state elements, output width)."""
    if isinstance(layer, GRU):
        n = layer.cells
        return 3 * (n_in + n) * n + 3 * n, 2 * 3 * (n_in + n) * n + 3 * n, n, n
    if isinstance(layer, BasicLSTM):
        n = layer.cells
        return 4 * (n_in + n) * n + 4 * n, 2 * 4 * (n_in + n) * n + 4 * n, 2 * n, n
    n, p = layer.cells, layer.output_size
    proj = n * p if layer.projection is not None else 0
    params = 4 * n * (n_in + p) + 4 * n + 3 * n + proj
    ops = 2 * (4 * n * (n_in + p) + proj) + 4 * n + 2 * 3 * n
    return params, ops, n + p, p


def layer_cost(ls) -> LayerCost:
    layer, in_shape, out_shape = ls.layer, ls.in_shape, ls.out_shape
    n_in, n_out = math.prod(in_shape), math.prod(out_shape)
    params = ops = 0
    act_in, act_out = n_in, n_out
    peak = None
    if isinstance(layer, (FullyConnected, LowRankLinear)):
        params = n_in * n_out + n_out
        ops = 2 * n_in * n_out + n_out
    elif isinstance(layer, Conv2D):
        c_in = in_shape[2]
        taps = layer.kernel_t * layer.kernel_f * c_in
        params = taps * layer.features + layer.features
        ops = n_out * (2 * taps + 1)
    elif isinstance(layer, DepthwiseSeparable):
        c_in = in_shape[2]
        t, f = out_shape[:2]
        params = layer.kernel ** 2 * c_in + c_in + c_in * layer.features + layer.features
        ops = t * f * c_in * (2 * layer.kernel ** 2 + 1) + n_out * (2 * c_in + 1)
        mid = t * f * c_in
        peak = max(n_in + mid, mid + n_out)
    elif isinstance(layer, AvgPool):
        ops = n_in + n_out
    elif isinstance(layer, (GRU, BasicLSTM, LSTM)):
        steps, width = in_shape
        params, step_ops, state, step_out = _recurrent_dims(layer, width)
        ops = steps * step_ops
        # a returned sequence is charged to the next layer's input buffer
        act_out = 2 * state + step_out
    elif isinstance(layer, (BatchNorm, SoftmaxOutput)):
        act_in = act_out = 0
    return LayerCost(ls.index, type(layer).__name__ + _suffix(layer), tuple(in_shape),
                     tuple(out_shape), params, act_in, act_out, ops,
                     act_in + act_out if peak is None else peak)


def _suffix(layer) -> str:
    if isinstance(layer, FullyConnected):
        return f"({layer.units}{'' if layer.relu else ', linear'})"
    if isinstance(layer, (LowRankLinear,)):
        return f"({layer.units})"
    if isinstance(layer, Conv2D):
        return (f"({layer.features},{layer.kernel_t}x{layer.kernel_f},"
                f"/{layer.stride_t}x{layer.stride_f},{layer.padding})")
    if isinstance(layer, DepthwiseSeparable):
        return f"({layer.features},{layer.kernel}x{layer.kernel},/{layer.stride})"
    if isinstance(layer, (GRU, BasicLSTM)):
        return f"({layer.cells})"
    if isinstance(layer, LSTM):
        return f"({layer.cells},p={layer.projection})"
    return ""


def estimate(model: ModelSpec) -> ResourceReport:
    costs = [layer_cost(ls) for ls in model.shapes]
    report = ResourceReport(
        model=f"{model.family}:{print_model_dsl(model)}",
        layers=costs,
        param_bytes=sum(c.param_count for c in costs),
        activation_bytes=max(c.working_set for c in costs),
        ops=sum(c.ops for c in costs),
    )
    report.constraint = classify(report)
    return report


def count_ops(model: ModelSpec) -> tuple[list[int], int]:
    per_layer = [layer_cost(ls).ops for ls in model.shapes]
    return per_layer, sum(per_layer)


def count_memory(model: ModelSpec) -> int:
    return estimate(model).memory_bytes


def classify(report) -> ConstraintClass | None:
    """Smallest class whose memory and ops limits both hold."""
    for cls in (SMALL, MEDIUM, LARGE):
        if cls.fits(report.memory_bytes, report.ops):
            return cls
    return None
