"""Keyword spotting for microcontroller budgets.

MFCC frontend, layer-graph models in a compact notation, float and 8-bit
integer inference, memory/ops accounting and a resource-bounded search.
"""
from .estimator import CLASSES, LARGE, MEDIUM, SMALL, ConstraintClass, classify, estimate
from .features import FeatureParams, extract_mfcc, frame_count, read_wav, smooth_posteriors
from .kernels import init_weights, model_forward
from .model import ModelSpec, builtin_model, builtin_models, load_model, parse_model_dsl, print_model_dsl
from .quant import QFormat, QTensor, q_model_forward, quantize_model_progressive
from .runtime import Detector, KeywordDecision
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
