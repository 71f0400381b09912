"""Layer graph, architecture notation and shape inference.

Notation, layers joined by ``-``::

    FC(n)                 fully connected + ReLU
    L(n)                  low-rank linear (no activation)
    C(f,kt,kf,st,sf)      2-D convolution + ReLU
    DSC(f,k,s)            depthwise k x k (stride s) then pointwise 1 x 1 + ReLU
    LSTM(n)               basic LSTM, or peephole LSTM in the LSTM family
    LSTM(n), Projection(p)
    GRU(n)
    AvgPool               global average pooling
    BN                    batch-norm marker (folded at inference)

The output layer (linear to ``num_classes`` + softmax) is implied and appended.
Shapes are tuples: ``(t, f, c)`` image, ``(t, n)`` sequence, ``(n,)`` vector.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Union

FAMILIES = ("DNN", "CNN", "BasicLSTM", "LSTM", "GRU", "CRNN", "DSCNN")

DEFAULT_LABELS = ("_silence_", "_unknown_", "yes", "no", "up", "down",
                  "left", "right", "on", "off", "stop", "go")


class ParseError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class ShapeError(ValueError):
    pass


def _check_positive(layer):
    for f in fields(layer):
        value = getattr(layer, f.name)
        if isinstance(value, int) and not isinstance(value, bool) and value < 1:
            raise ShapeError(f"{type(layer).__name__}.{f.name} must be >= 1, got {value}")


@dataclass(frozen=True)
class FullyConnected:
    units: int
    relu: bool = True

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class LowRankLinear:
    units: int

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class Conv2D:
    features: int
    kernel_t: int
    kernel_f: int
    stride_t: int = 1
    stride_f: int = 1
    padding: str = "valid"

    def __post_init__(self):
        _check_positive(self)
        if self.padding not in ("valid", "same"):
            raise ShapeError(f"unknown padding {self.padding!r}")


@dataclass(frozen=True)
class DepthwiseSeparable:
    features: int
    kernel: int
    stride: int = 1

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class AvgPool:
    global_: bool = True


@dataclass(frozen=True)
class BasicLSTM:
    cells: int

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class LSTM:
    """Peephole LSTM with optional output projection."""
    cells: int
    projection: int | None = None

    def __post_init__(self):
        _check_positive(self)
        if self.projection is not None and not 1 <= self.projection <= self.cells:
            raise ShapeError("projection must be in [1, cells]")

    @property
    def output_size(self) -> int:
        return self.projection or self.cells


@dataclass(frozen=True)
class GRU:
    cells: int

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class BatchNorm:
    folded: bool = True


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int

    def __post_init__(self):
        _check_positive(self)


Layer = Union[FullyConnected, LowRankLinear, Conv2D, DepthwiseSeparable, AvgPool,
              BasicLSTM, LSTM, GRU, BatchNorm, SoftmaxOutput]

RECURRENT = (BasicLSTM, LSTM, GRU)

_FAMILY_KINDS = {
    "DNN": (FullyConnected, LowRankLinear, BatchNorm),
    "CNN": (Conv2D, LowRankLinear, FullyConnected, AvgPool, BatchNorm),
    "BasicLSTM": (BasicLSTM, FullyConnected, LowRankLinear),
    "LSTM": (LSTM, FullyConnected, LowRankLinear),
    "GRU": (GRU, FullyConnected, LowRankLinear),
    "CRNN": (Conv2D, GRU, FullyConnected, LowRankLinear, BatchNorm),
    "DSCNN": (Conv2D, DepthwiseSeparable, AvgPool, FullyConnected, BatchNorm),
}


@dataclass(frozen=True)
class LayerShape:
    index: int
    layer: Layer
    in_shape: tuple
    out_shape: tuple


@dataclass(frozen=True)
class ModelSpec:
    family: str
    layers: tuple
    input_shape: tuple  # (T, F, 1)
    num_classes: int = 12
    labels: tuple = field(default=DEFAULT_LABELS, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != self.num_classes:
            if self.labels == DEFAULT_LABELS:
                object.__setattr__(self, "labels", tuple(f"class{i}" for i in range(self.num_classes)))
            else:
                raise ShapeError(f"{len(self.labels)} labels for {self.num_classes} classes")
        if not self.layers or self.layers[-1] != SoftmaxOutput(self.num_classes):
            raise ShapeError(f"last layer must be SoftmaxOutput({self.num_classes})")
        allowed = _FAMILY_KINDS[self.family]
        for i, layer in enumerate(self.hidden_layers):
            if not isinstance(layer, allowed):
                raise ShapeError(f"layer {i} ({type(layer).__name__}) not allowed in {self.family}")
        if self.family in ("BasicLSTM", "LSTM", "GRU", "CRNN"):
            if not any(isinstance(l, RECURRENT) for l in self.hidden_layers):
                raise ShapeError(f"{self.family} model needs a recurrent layer")
        if self.family in ("CNN", "CRNN", "DSCNN"):
            if not any(isinstance(l, Conv2D) for l in self.hidden_layers):
                raise ShapeError(f"{self.family} model needs a convolution layer")
        self.shapes  # noqa: B018 - validates end to end

    @property
    def hidden_layers(self) -> tuple:
        """Layers as written in the notation (output FC and softmax stripped)."""
        return self.layers[:-2]

    @cached_property
    def shapes(self) -> list[LayerShape]:
        return infer_shapes(self)

    @property
    def frames(self) -> int:
        return self.input_shape[0]

    @property
    def num_features(self) -> int:
        return self.input_shape[1]

    def to_dsl(self) -> str:
        return print_model_dsl(self)


def build_model(family: str, hidden: list, input_shape, num_classes: int = 12,
                labels=DEFAULT_LABELS) -> ModelSpec:
    t, f = input_shape[:2]
    layers = tuple(hidden) + (FullyConnected(num_classes, relu=False), SoftmaxOutput(num_classes))
    return ModelSpec(family, layers, (t, f, 1), num_classes, labels)


def conv_out_len(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "valid":
        return (size - kernel) // stride + 1
    return math.ceil(size / stride)


def _numel(shape) -> int:
    return math.prod(shape)


def infer_shapes(model: ModelSpec) -> list[LayerShape]:
    out = []
    shape = tuple(model.input_shape)
    if model.family == "DNN":
        shape = (_numel(shape),)
    layers = model.layers
    for i, layer in enumerate(layers):
        name = f"layer {i} ({type(layer).__name__})"
        in_shape = shape
        if isinstance(layer, (FullyConnected, LowRankLinear)):
            shape = (layer.units,)
        elif isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ShapeError(f"{name}: convolution needs an image input, got {shape}")
            t = conv_out_len(shape[0], layer.kernel_t, layer.stride_t, layer.padding)
            f = conv_out_len(shape[1], layer.kernel_f, layer.stride_f, layer.padding)
            shape = (t, f, layer.features)
        elif isinstance(layer, DepthwiseSeparable):
            if len(shape) != 3:
                raise ShapeError(f"{name}: depthwise conv needs an image input, got {shape}")
            t = conv_out_len(shape[0], layer.kernel, layer.stride, "same")
            f = conv_out_len(shape[1], layer.kernel, layer.stride, "same")
            shape = (t, f, layer.features)
        elif isinstance(layer, AvgPool):
            if len(shape) != 3:
                raise ShapeError(f"{name}: pooling needs an image input, got {shape}")
            shape = (shape[2],)
        elif isinstance(layer, RECURRENT):
            if len(shape) == 1:
                raise ShapeError(f"{name}: recurrent layer needs a time axis, got {shape}")
            steps = shape[0]
            width = layer.output_size if isinstance(layer, LSTM) else layer.cells
            returns_seq = i + 1 < len(layers) and isinstance(layers[i + 1], RECURRENT)
            in_shape = (steps, _numel(shape[1:]))
            shape = (steps, width) if returns_seq else (width,)
        elif isinstance(layer, SoftmaxOutput):
            if shape != (layer.classes,):
                raise ShapeError(f"{name}: expects ({layer.classes},) input, got {shape}")
        # BatchNorm keeps the shape
        if any(d < 1 for d in shape):
            raise ShapeError(f"{name}: non-positive output dimension {shape}")
        out.append(LayerShape(i, layer, in_shape, shape))
    return out


_TOKEN = re.compile(r"\s*(?P<name>[A-Za-z]+)\s*(?:\((?P<args>[^()]*)\))?\s*")
_ARITY = {"FC": 1, "L": 1, "C": 5, "DSC": 3, "LSTM": 1, "GRU": 1, "Projection": 1}


def _parse_args(raw: str, pos: int) -> list[int]:
    parts = raw.split(",")
    values = []
    for part in parts:
        part = part.strip()
        if not part.isdigit():
            raise ParseError(f"expected a positive integer, got {part!r}", pos)
        values.append(int(part))
    return values


def parse_model_dsl(text: str, family: str, input_shape=(49, 10), num_classes: int = 12,
                    labels=DEFAULT_LABELS) -> ModelSpec:
    if family not in FAMILIES:
        raise ParseError(f"unknown family {family!r}")
    if not text or not text.strip():
        raise ParseError("empty model description", 0)
    padding = "same" if family == "DSCNN" else "valid"
    hidden = []
    pos = 0
    n = len(text)
    expect_layer = True
    while pos < n:
        if not expect_layer:
            m = re.compile(r"\s*-\s*").match(text, pos)
            if not m or m.end() == pos:
                raise ParseError("expected '-' between layers", pos)
            pos = m.end()
        m = _TOKEN.match(text, pos)
        if not m or not m.group("name"):
            raise ParseError("expected a layer", pos)
        name, raw = m.group("name"), m.group("args")
        start = pos
        pos = m.end()
        if name == "AvgPool" or name == "BN":
            if raw is not None:
                raise ParseError(f"{name} takes no arguments", start)
            hidden.append(AvgPool() if name == "AvgPool" else BatchNorm())
        elif name in _ARITY and name != "Projection":
            if raw is None:
                raise ParseError(f"{name} needs arguments", start)
            args = _parse_args(raw, start)
            if len(args) != _ARITY[name]:
                raise ParseError(f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", start)
            try:
                if name == "FC":
                    hidden.append(FullyConnected(*args))
                elif name == "L":
                    hidden.append(LowRankLinear(*args))
                elif name == "C":
                    hidden.append(Conv2D(*args, padding=padding))
                elif name == "DSC":
                    hidden.append(DepthwiseSeparable(*args))
                elif name == "GRU":
                    hidden.append(GRU(*args))
                else:
                    proj = None
                    pm = re.compile(r"\s*,\s*Projection\s*\(([^()]*)\)\s*").match(text, pos)
                    if pm:
                        proj_args = _parse_args(pm.group(1), pos)
                        if len(proj_args) != 1:
                            raise ParseError("Projection takes 1 argument", pos)
                        proj = proj_args[0]
                        pos = pm.end()
                    if family == "LSTM":
                        hidden.append(LSTM(args[0], proj))
                    elif proj is not None:
                        raise ParseError("Projection only allowed in the LSTM family", start)
                    else:
                        hidden.append(BasicLSTM(args[0]))
            except ShapeError as exc:
                raise ParseError(str(exc), start) from exc
        else:
            raise ParseError(f"unknown layer {name!r}", start)
        expect_layer = False
    try:
        return build_model(family, hidden, input_shape, num_classes, labels)
    except ShapeError as exc:
        raise ParseError(str(exc)) from exc


def _layer_token(layer) -> str:
    if isinstance(layer, FullyConnected):
        return f"FC({layer.units})"
    if isinstance(layer, LowRankLinear):
        return f"L({layer.units})"
    if isinstance(layer, Conv2D):
        return (f"C({layer.features},{layer.kernel_t},{layer.kernel_f},"
                f"{layer.stride_t},{layer.stride_f})")
    if isinstance(layer, DepthwiseSeparable):
        return f"DSC({layer.features},{layer.kernel},{layer.stride})"
    if isinstance(layer, AvgPool):
        return "AvgPool"
    if isinstance(layer, BatchNorm):
        return "BN"
    if isinstance(layer, BasicLSTM):
        return f"LSTM({layer.cells})"
    if isinstance(layer, LSTM):
        if layer.projection is None:
            return f"LSTM({layer.cells})"
        return f"LSTM({layer.cells}), Projection({layer.projection})"
    if isinstance(layer, GRU):
        return f"GRU({layer.cells})"
    raise TypeError(f"cannot print {layer!r}")


def print_model_dsl(model: ModelSpec) -> str:
    return "-".join(_layer_token(l) for l in model.hidden_layers)


# -- model files ------------------------------------------------------------

def loads_model(text: str, source: str = "<string>") -> ModelSpec:
    """Parse a model file: family, "T F", "k [labels...]", then the notation."""
    lines = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if len(lines) < 4:
        raise ParseError(f"{source}: need 3 header lines and a model line")
    family = lines[0]
    try:
        t, f = (int(v) for v in lines[1].split())
    except ValueError:
        raise ParseError(f"{source}: input line must be 'T F', got {lines[1]!r}") from None
    head = lines[2].split()
    try:
        k = int(head[0])
    except ValueError:
        raise ParseError(f"{source}: classes line must start with an integer") from None
    labels = tuple(head[1:]) or DEFAULT_LABELS
    dsl = " ".join(lines[3:])
    try:
        return parse_model_dsl(dsl, family, (t, f), k, labels)
    except ParseError as exc:
        raise ParseError(f"{source}: {exc}") from None


def dumps_model(model: ModelSpec) -> str:
    t, f = model.input_shape[:2]
    return (f"{model.family}\n{t} {f}\n{model.num_classes} {' '.join(model.labels)}\n"
            f"{print_model_dsl(model)}\n")


def load_model(path) -> ModelSpec:
    return loads_model(Path(path).read_text(encoding="utf-8"), str(path))


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def builtin_models() -> list[str]:
    """Names of the shipped reference models (``dnn_s`` ... ``dscnn_l``)."""
    from importlib import resources
    root = resources.files("tinykws") / "models"
    return sorted(p.name[:-6] for p in root.iterdir() if p.name.endswith(".model"))


def builtin_model(name: str) -> ModelSpec:
    from importlib import resources
    path = resources.files("tinykws") / "models" / f"{name}.model"
    if not path.is_file():
        raise KeyError(f"no builtin model {name!r}")
    return loads_model(path.read_text(encoding="utf-8"), f"{name}.model")
