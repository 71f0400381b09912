"""Exhaustive hyperparameter enumeration under a resource budget.

Only the resource side is modeled: every candidate gets an exact
``ResourceReport``; the accuracy axis is an external score (or a ``-ops``
placeholder) because training is out of scope.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .estimator import LARGE, ConstraintClass, ResourceReport, estimate
from .features import FeatureParams, frame_count, parse_key_values
from .model import (AvgPool, BasicLSTM, Conv2D, DepthwiseSeparable, FullyConnected, GRU, LSTM,
                    LowRankLinear, ModelSpec, ShapeError, build_model)


def _span(lo, hi, step):
    return list(range(lo, hi + 1, step))


DEFAULT_GRIDS = {
    "DNN": {"depth": [1, 2, 3, 4], "width": _span(64, 512, 32)},
    "CNN": {"conv1": _span(16, 64, 16), "conv2": _span(16, 80, 16), "kernel_t": [10],
            "kernel_f": [4], "linear": [16, 32, 64], "fc": [64, 128]},
    "BasicLSTM": {"cells": _span(64, 512, 32)},
    "LSTM": {"cells": _span(64, 512, 32), "projection": _span(32, 256, 32)},
    "GRU": {"cells": _span(64, 512, 32)},
    "CRNN": {"conv": _span(32, 128, 16), "conv_stride_f": [1, 2], "gru_layers": [1, 2],
             "cells": _span(32, 160, 16), "fc": _span(64, 192, 32)},
    "DSCNN": {"depth": [1, 2, 3, 4, 5, 6], "features": _span(32, 288, 32),
              "conv_stride_f": [1, 2], "first_stride": [1, 2]},
}


def layers_for(family: str, p: dict) -> list | None:
    """Hidden layers for one grid point, or None when the point is meaningless."""
    if family == "DNN":
        return [FullyConnected(p["width"])] * p["depth"]
    if family == "CNN":
        return [Conv2D(p["conv1"], p["kernel_t"], p["kernel_f"], 1, 1),
                Conv2D(p["conv2"], p["kernel_t"], p["kernel_f"], 2, 1),
                LowRankLinear(p["linear"]), FullyConnected(p["fc"])]
    if family == "BasicLSTM":
        return [BasicLSTM(p["cells"])]
    if family == "LSTM":
        if p["projection"] > p["cells"]:
            return None
        return [LSTM(p["cells"], p["projection"])]
    if family == "GRU":
        return [GRU(p["cells"])]
    if family == "CRNN":
        return ([Conv2D(p["conv"], 10, 4, 2, p["conv_stride_f"])]
                + [GRU(p["cells"])] * p["gru_layers"] + [FullyConnected(p["fc"])])
    if family == "DSCNN":
        f = p["features"]
        first = Conv2D(f, 10, 4, 2, p["conv_stride_f"], padding="same")
        blocks = [DepthwiseSeparable(f, 3, p["first_stride"])]
        blocks += [DepthwiseSeparable(f, 3, 1)] * (p["depth"] - 1)
        return [first, *blocks, AvgPool()]
    raise ValueError(f"unknown family {family!r}")


@dataclass
class SearchSpace:
    family: str
    grid: dict = field(default_factory=dict)
    mfcc: tuple = (10, 20, 40)
    strides: tuple = (20, 40)
    clip_len_ms: int = 1000
    frame_len_ms: int = 40

    def __post_init__(self):
        if self.family not in DEFAULT_GRIDS:
            raise ValueError(f"unknown family {self.family!r}")
        grid = dict(DEFAULT_GRIDS[self.family])
        grid.update(self.grid)
        unknown = set(grid) - set(DEFAULT_GRIDS[self.family])
        if unknown:
            raise ValueError(f"unknown grid keys for {self.family}: {sorted(unknown)}")
        for key, values in list(grid.items()) + [("mfcc", self.mfcc), ("stride", self.strides)]:
            if not values or any(int(v) < 1 for v in values):
                raise ValueError(f"grid {key!r} must be non-empty and positive")
        self.grid = {k: [int(v) for v in vals] for k, vals in grid.items()}

    @classmethod
    def from_config(cls, path, family: str | None = None) -> "SearchSpace":
        values = parse_key_values(Path(path).read_text(encoding="utf-8"))
        family = family or values.pop("family", None)
        values.pop("family", None)
        if family is None:
            raise ValueError("grid config needs a family")
        mfcc = parse_values(values.pop("mfcc")) if "mfcc" in values else (10, 20, 40)
        strides = parse_values(values.pop("stride")) if "stride" in values else (20, 40)
        grid = {k: parse_values(v) for k, v in values.items()}
        return cls(family, grid, tuple(mfcc), tuple(strides))

    def points(self) -> Iterator[tuple[dict, int, int]]:
        keys = list(self.grid)
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            for f in self.mfcc:
                for s in self.strides:
                    yield dict(zip(keys, combo)), f, s

    def feature_params(self, num_mfcc: int, stride_ms: int) -> FeatureParams:
        return FeatureParams(clip_len_ms=self.clip_len_ms, frame_len_ms=self.frame_len_ms,
                             frame_stride_ms=stride_ms, num_mfcc=num_mfcc,
                             num_mel_filters=max(40, num_mfcc))


def parse_values(text: str) -> list[int]:
    """``"1,2,3"`` or inclusive ``"start:stop:step"``."""
    text = text.strip()
    if ":" in text:
        parts = [int(v) for v in text.split(":")]
        if len(parts) == 2:
            parts.append(1)
        lo, hi, step = parts
        return _span(lo, hi, step)
    return [int(v) for v in text.split(",") if v.strip()]


@dataclass
class Candidate:
    spec: ModelSpec
    features: FeatureParams
    report: ResourceReport
    score: float | None = None

    @property
    def dsl(self) -> str:
        return self.spec.to_dsl()

    @property
    def memory_bytes(self) -> int:
        return self.report.memory_bytes

    @property
    def ops(self) -> int:
        return self.report.ops

    def row(self) -> dict:
        cls = self.report.constraint
        return {"dsl": self.dsl, "F": self.features.num_mfcc, "S": self.features.frame_stride_ms,
                "memory_bytes": self.memory_bytes, "ops": self.ops,
                "class": cls.name if cls else "", "score": self.score}


def build_candidate(space: SearchSpace, point: dict, num_mfcc: int, stride: int) -> Candidate | None:
    hidden = layers_for(space.family, point)
    if hidden is None:
        return None
    params = space.feature_params(num_mfcc, stride)
    t = frame_count(space.clip_len_ms, space.frame_len_ms, stride)
    try:
        spec = build_model(space.family, hidden, (t, num_mfcc))
    except ShapeError:
        return None
    return Candidate(spec, params, estimate(spec))


def enumerate_candidates(space: SearchSpace, cls: ConstraintClass,
                         scorer: Callable[[Candidate], float] | None = None) -> Iterator[Candidate]:
    """Candidates that fit ``cls``, in grid order."""
    scorer = scorer or proxy_score
    for point, f, s in space.points():
        cand = build_candidate(space, point, f, s)
        if cand is None or not cls.fits(cand.memory_bytes, cand.ops):
            continue
        cand.score = scorer(cand)
        yield cand


def proxy_score(cand: Candidate) -> float:
    # placeholder until real accuracies are supplied
    return -float(cand.ops)


def load_scores(path) -> Callable[[Candidate], float]:
    """Scorer backed by a CSV with ``dsl,score`` and optionally ``F,S`` columns."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = row["dsl"].strip()
            if row.get("F") and row.get("S"):
                key = (key, int(row["F"]), int(row["S"]))
            table[key] = float(row["score"])

    def scorer(cand: Candidate) -> float:
        exact = (cand.dsl, cand.features.num_mfcc, cand.features.frame_stride_ms)
        if exact in table:
            return table[exact]
        return table.get(cand.dsl, float("nan"))

    return scorer


def dominates(a, b) -> bool:
    """``a`` is no worse on memory, ops and score, and better on one of them."""
    no_worse = a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2]
    return no_worse and (a[0] < b[0] or a[1] < b[1] or a[2] > b[2])


def _objectives(c) -> tuple:
    if isinstance(c, Candidate):
        return c.memory_bytes, c.ops, -np.inf if c.score is None else c.score
    return tuple(c)


def pareto_front(candidates: Iterable) -> list:
    """Non-dominated subset (min memory, min ops, max score), input order kept.

    Accepts ``Candidate`` objects or plain ``(memory, ops, score)`` triples.
    """
    items = list(candidates)
    if not items:
        return []
    obj = np.array([_objectives(c) for c in items], dtype=np.float64)
    obj[np.isnan(obj[:, 2]), 2] = -np.inf
    mem, ops, score = obj[:, 0], obj[:, 1], obj[:, 2]
    keep = []
    for i, c in enumerate(items):
        no_worse = (mem <= mem[i]) & (ops <= ops[i]) & (score >= score[i])
        better = (mem < mem[i]) | (ops < ops[i]) | (score > score[i])
        if not np.any(no_worse & better):
            keep.append(c)
    return keep


@dataclass
class SweepResult:
    floor_bytes: int
    ladder: list
    reachable: bool
    message: str

    def below_floor(self) -> list:
        return [c for c in self.ladder if c.memory_bytes < self.floor_bytes]


def dscnn_ladder_layers(width: int, depth: int = 5) -> list:
    """The large DS-CNN layout, C(w,10,4,2,1)-DSC(w,3,2)-DSC(w,3,1)x(depth-1)-AvgPool."""
    return ([Conv2D(width, 10, 4, 2, 1, padding="same"), DepthwiseSeparable(width, 3, 2)]
            + [DepthwiseSeparable(width, 3, 1)] * (depth - 1) + [AvgPool()])


def scalability_sweep(floor_kb: float = 8.0, widths: Iterable[int] = range(4, 301, 4),
                      depth: int = 5, cls: ConstraintClass = LARGE,
                      params: FeatureParams | None = None) -> SweepResult:
    """Width ladder of DS-CNN models from below ``floor_kb`` up to the ``cls`` budget."""
    params = params or FeatureParams(num_mfcc=10, frame_stride_ms=20)
    floor = int(round(floor_kb * 1000))
    ladder = []
    for w in sorted(set(widths)):
        spec = build_model("DSCNN", dscnn_ladder_layers(w, depth), (params.num_frames, params.num_mfcc))
        cand = Candidate(spec, params, estimate(spec))
        if not cls.fits(cand.memory_bytes, cand.ops):
            break
        cand.score = proxy_score(cand)
        ladder.append(cand)
    if not ladder:
        return SweepResult(floor, [], False, f"no width fits class {cls.name}")
    smallest = ladder[0].memory_bytes
    if smallest >= floor:
        return SweepResult(floor, ladder, False,
                           f"floor {floor} B unreachable: smallest model needs {smallest} B")
    return SweepResult(floor, ladder, True,
                       f"{len(ladder)} models from {smallest} B to {ladder[-1].memory_bytes} B")
