"""``tinykws`` command line: features, infer, estimate, quantize, search, compare.

Exit codes: 0 ok, 1 usage, 2 input format, 3 constraint or threshold violated.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels, quant
from .estimator import CLASSES, estimate
from .features import FeatureParams, InvalidInputError, InvalidParamsError, extract_mfcc, read_wav
from .model import ParseError, ShapeError, builtin_model, builtin_models, load_model
from .runtime import Detector, feature_params_for
from .search import SearchSpace, enumerate_candidates, load_scores, pareto_front, scalability_sweep
from .weights_io import WeightsFormatError, is_quantized, load_weights, pack_quantized, save_weights

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_CONSTRAINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _emit(obj, as_json: bool, text: str):
    print(json.dumps(obj, indent=2) if as_json else text)


def _load_model_arg(ref: str):
    """A model file path, or the name of a shipped model such as ``dnn_s``."""
    path = Path(ref)
    if path.exists():
        return load_model(path)
    if ref in builtin_models():
        return builtin_model(ref)
    raise FileNotFoundError(f"no model file or shipped model named {ref!r}")


def _feature_params(args, model=None) -> FeatureParams:
    base = FeatureParams.from_config(args.config) if args.config else FeatureParams()
    changes = {k: v for k, v in (("num_mfcc", args.num_mfcc), ("frame_stride_ms", args.stride))
               if v is not None}
    base = base.with_(**changes)
    return feature_params_for(model, base) if model is not None else base


def _weights(args, model) -> dict:
    if args.weights:
        return load_weights(args.weights)
    if args.random_weights is not None:
        return kernels.init_weights(model, args.random_weights)
    raise UsageError("give --weights FILE or --random-weights SEED")


def _load_features(path: Path, params: FeatureParams) -> np.ndarray:
    if path.suffix == ".npy":
        feats = np.load(path)
        want = (params.num_frames, params.num_mfcc)
        if feats.shape != want:
            raise InvalidInputError(f"{path}: feature shape {feats.shape}, expected {want}")
        return feats
    return extract_mfcc(read_wav(path, params.sample_rate_hz), params)


# -- subcommands ----------------------------------------------------------------

def cmd_features(args) -> int:
    params = _feature_params(args)
    feats = extract_mfcc(read_wav(args.wav, params.sample_rate_hz), params)
    if args.out:
        np.save(args.out, feats)
    summary = {"shape": list(feats.shape), "num_features": int(feats.size)}
    if args.json:
        summary["features"] = feats.tolist()
    _emit(summary, args.json, f"{feats.shape[0]} x {feats.shape[1]} = {feats.size} features"
          + (f" -> {args.out}" if args.out else ""))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model_arg(args.model)
    weights = _weights(args, model)
    if args.quantized and not is_quantized(weights):
        raise UsageError("--quantized needs 8-bit weights from `tinykws quantize`")
    if not args.quantized and is_quantized(weights):
        print("note: weights are 8-bit, running the integer path", file=sys.stderr)
    det = Detector(model, weights, _feature_params(args, model))
    signal = read_wav(args.wav, det.params.sample_rate_hz)
    if args.stream:
        decisions = list(det.stream(signal, args.hop_ms, args.smooth))
    else:
        decisions = [det.classify_clip(signal)]
    rows = [f"{d.start_ms:>7} ms  {d.label:<10} p={d.probability:.4f}  ({d.latency_ms:.2f} ms)"
            for d in decisions]
    out = [d.to_dict() for d in decisions]
    _emit(out if args.stream else out[0], args.json, "\n".join(rows))
    return EXIT_OK


def cmd_estimate(args) -> int:
    model = _load_model_arg(args.model)
    report = estimate(model)
    _emit(report.to_dict(), args.json, report.table())
    return EXIT_OK


def _calibration_set(root: Path, params: FeatureParams, labels: tuple):
    if not root.is_dir():
        raise InvalidInputError(f"{root}: not a directory")
    files = sorted(p for p in root.rglob("*") if p.suffix in (".wav", ".npy") and p.is_file())
    if not files:
        raise InvalidInputError(f"{root}: no .wav or .npy calibration files")
    feats = [_load_features(p, params) for p in files]
    parents = {p.parent for p in files}
    if parents == {root}:
        return feats, None
    if root in parents:
        raise InvalidInputError(f"{root}: mix of labeled subdirectories and loose files")
    index = {name: i for i, name in enumerate(labels)}
    unknown = sorted({p.parent.name for p in files} - set(index))
    if unknown:
        raise InvalidInputError(f"{root}: subdirectories {unknown} are not model labels")
    return feats, np.array([index[p.parent.name] for p in files])


def cmd_quantize(args) -> int:
    model = _load_model_arg(args.model)
    weights = _weights(args, model)
    if is_quantized(weights):
        print("warning: weights are already 8-bit; nothing to do", file=sys.stderr)
        if args.weights and Path(args.out).resolve() != Path(args.weights).resolve():
            save_weights(weights, args.out)
        return EXIT_OK
    params = feature_params_for(model, _feature_params(args))
    feats, labels = _calibration_set(Path(args.calibration), params, model.labels)
    result = quant.quantize_model_progressive(model, weights, feats, labels, window=args.window)
    if labels is None:
        # without labels, the loss is measured against the float model's own decisions
        ref = quant.float_outputs(model, weights, feats).argmax(axis=1)
        got = quant.quant_outputs(model, result.qweights, result.act_formats, feats).argmax(axis=1)
        before, after = 100.0, 100.0 * float(np.mean(ref == got))
        metric = "agreement with float argmax"
    else:
        before, after = 100.0 * result.float_metric, 100.0 * result.quant_metric
        metric = "accuracy"
    loss = before - after
    summary = {"metric": metric, "float": before, "quantized": after, "loss_pp": loss,
               "weight_fracs": {k: v.frac_bits for k, v in result.qweights.items()},
               "act_fracs": result.act_formats, "out": args.out}
    text = result.table() + f"\n{metric}: {before:.2f}% -> {after:.2f}% (loss {loss:.2f} pp)"
    if loss > args.max_loss:
        _emit({**summary, "out": None}, args.json, text)
        print(f"error: loss {loss:.2f} pp exceeds --max-loss {args.max_loss}; nothing written",
              file=sys.stderr)
        return EXIT_CONSTRAINT
    save_weights(pack_quantized(result.qweights, result.act_formats), args.out)
    _emit(summary, args.json, text + f"\nwrote {args.out}")
    return EXIT_OK


CSV_FIELDS = ("dsl", "F", "S", "memory_bytes", "ops", "class", "score")


def cmd_search(args) -> int:
    cls = CLASSES[args.cls]
    if args.sweep is not None:
        res = scalability_sweep(args.sweep, cls=cls)
        rows = [c.row() for c in res.ladder]
        _emit({"reachable": res.reachable, "message": res.message, "ladder": rows}, args.json,
              "\n".join([*(f"{r['memory_bytes']:>8} B {r['ops']:>10} ops  {r['dsl']}" for r in rows),
                         res.message]))
        return EXIT_OK if res.reachable else EXIT_CONSTRAINT
    if args.grid:
        space = SearchSpace.from_config(args.grid, args.family)
    elif args.family:
        space = SearchSpace(args.family)
    else:
        raise UsageError("give --family or --grid")
    scorer = load_scores(args.scores) if args.scores else None
    cands = list(enumerate_candidates(space, cls, scorer))
    ranked = sorted(cands, key=lambda c: -c.score if np.isfinite(c.score) else np.inf)
    top = ranked[:args.top] if args.top else ranked
    front = [c.row() for c in pareto_front(cands)]
    if args.pareto:
        Path(args.pareto).write_text(json.dumps(front, indent=2), encoding="utf-8")
    if args.json:
        print(json.dumps({"count": len(cands), "top": [c.row() for c in top], "pareto": front},
                         indent=2))
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for c in top:
            writer.writerow(c.row())
    print(f"{len(cands)} candidates fit class {cls.name}; pareto front has {len(front)}",
          file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    model = _load_model_arg(args.model)
    fw = load_weights(args.weights)
    qw = load_weights(args.qweights)
    if is_quantized(fw) or not is_quantized(qw):
        raise InvalidInputError("--weights must be float32 and --qweights 8-bit")
    fdet, qdet = Detector(model, fw), Detector(model, qw)
    rows, out = [], []
    for path in args.inputs:
        feats = _load_features(Path(path), fdet.params)
        fd, qd = fdet.classify_features(feats), qdet.classify_features(feats)
        agree = int(np.argmax(fd.probs)) == int(np.argmax(qd.probs))
        out.append({"input": str(path), "float": fd.to_dict(), "quantized": qd.to_dict(),
                    "agree": agree, "max_abs_diff": float(np.max(np.abs(fd.probs - qd.probs)))})
        rows.append(f"{path}: float {fd.label} {fd.probability:.4f} | quantized {qd.label} "
                    f"{qd.probability:.4f} | {'agree' if agree else 'DIFFER'}")
    rate = float(np.mean([o["agree"] for o in out]))
    rows.append(f"argmax agreement {100 * rate:.1f}% over {len(out)} inputs")
    _emit({"results": out, "agreement": rate}, args.json, "\n".join(rows))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _add_feature_flags(p):
    p.add_argument("--config", help="key=value feature config file")
    p.add_argument("--num-mfcc", type=int, help="MFCC coefficients per frame (F)")
    p.add_argument("--stride", type=int, help="frame stride in ms (S)")


def _add_weight_flags(p):
    p.add_argument("--weights", help="KWSW weights file")
    p.add_argument("--random-weights", type=int, metavar="SEED",
                   help="seeded uniform weights instead of a file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tinykws", description="Keyword spotting on a microcontroller budget.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("features", help="WAV -> MFCC matrix")
    p.add_argument("wav")
    p.add_argument("--out", help="save the matrix as .npy")
    _add_feature_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("infer", help="classify a WAV clip or stream")
    p.add_argument("model", help="model file or shipped name (e.g. dnn_s)")
    p.add_argument("wav")
    _add_weight_flags(p)
    p.add_argument("--quantized", action="store_true", help="require the 8-bit integer path")
    p.add_argument("--stream", action="store_true", help="slide a clip window over the audio")
    p.add_argument("--hop-ms", type=int, default=100)
    p.add_argument("--smooth", type=int, default=10, help="posterior smoothing window")
    _add_feature_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("estimate", help="memory / ops report")
    p.add_argument("model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("quantize", help="8-bit progressive quantization")
    p.add_argument("model")
    p.add_argument("calibration", help="directory of .wav/.npy files, optionally in label subdirs")
    p.add_argument("out")
    _add_weight_flags(p)
    p.add_argument("--max-loss", type=float, default=1.0, help="allowed loss in percentage points")
    p.add_argument("--window", type=int, default=2, help="fraction-length sweep half-width")
    _add_feature_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("search", help="enumerate architectures under a budget")
    p.add_argument("--family")
    p.add_argument("--class", dest="cls", choices=sorted(CLASSES), default="S")
    p.add_argument("--grid", help="key=value grid config")
    p.add_argument("--scores", help="CSV of dsl,score[,F,S]")
    p.add_argument("--top", type=int, default=0, help="keep the best N by score (0 = all)")
    p.add_argument("--pareto", help="write the Pareto set here as JSON")
    p.add_argument("--sweep", type=float, metavar="FLOOR_KB",
                   help="DS-CNN width ladder from below FLOOR_KB up to the class budget")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare", help="float vs quantized on the same inputs")
    p.add_argument("model")
    p.add_argument("inputs", nargs="+", help=".wav or .npy feature files")
    p.add_argument("--weights", required=True)
    p.add_argument("--qweights", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on usage errors
        return exc.code
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ShapeError, WeightsFormatError, InvalidInputError, InvalidParamsError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
