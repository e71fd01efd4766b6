"""Command-line entry point: ``palrp <verb> [flags]``.

Exit codes: 0 success, 2 input or load problem, 3 validation problem
(shape, length, grid), 4 non-finite numbers.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import (
    DegenerateRowError,
    DimensionError,
    LengthError,
    LoadError,
    NonFiniteError,
    RegistryError,
    VocabularyError,
)
from .evaluation.audit import conservation_audit
from .evaluation.fixtures import lemma3_fixture, random_model, random_tokens
from .evaluation.perturbation import NORMALIZATION, PerturbationConfig, area_metrics, perturbation_curve
from .evaluation.segmentation import segmentation_metrics
from .imageio import heatmap_pixels, read_pgm, write_ppm
from .lrp_core import LRPConfig
from .model import Model, PEKind, load_model, save_model
from .pe_lrp import Method, RelevanceMap, explain

FIXTURES = ("lemma3", "random", "toy-trained")


class InputError(Exception):
    """Bad command-line input that maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers

def _load(directory) -> Model:
    config, weights = load_model(directory)
    return Model(config, weights)


def _read_tokens(path) -> list[int]:
    data = jsonio.read_json(path)
    if not isinstance(data, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in data):
        raise InputError(f"{path}: expected a JSON array of integer token ids")
    return data


def _read_scores(path) -> list[float]:
    """Per-token scores from a RelevanceMap file or a bare JSON number array."""
    data = jsonio.read_json(path)
    scores = data.get("per_token") if isinstance(data, dict) else data
    if not isinstance(scores, list) or not all(isinstance(s, (int, float)) for s in scores):
        raise InputError(f"{path}: no per-token scores found")
    return [float(s) for s in scores]


def _emit(obj, out) -> None:
    text = jsonio.dumps(obj)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def _fractions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None


def _mask_mode(text: str):
    if text == "zero":
        return "zero"
    if text.startswith("id:"):
        try:
            return int(text[3:])
        except ValueError:
            pass
    raise argparse.ArgumentTypeError("mask must be 'zero' or 'id:N'")


def _threshold(text: str):
    if text == "mean":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threshold must be 'mean' or a number") from None


# ---------------------------------------------------------------------------
# verbs

def run_explain(args) -> None:
    model = _load(args.model)
    tokens = _read_tokens(args.tokens)
    rmap = explain(model, tokens, args.position, args.target_class, args.method, LRPConfig(epsilon=args.eps))
    _emit(rmap.to_dict(), args.out)


def run_eval_perturbation(args) -> None:
    model = _load(args.model)
    tokens = _read_tokens(args.tokens)
    scores = _read_scores(args.relevance)
    pcfg = PerturbationConfig(order={"pos": "positive", "neg": "negative"}.get(args.order, args.order),
                              fractions=args.fractions, mask_mode=args.mask, target=args.target_class,
                              position=args.position)
    curve = perturbation_curve(model, tokens, scores, pcfg)
    auac = au_mse = None  # a single fraction has no area
    if len(curve.fractions) >= 2:
        auac, au_mse = area_metrics(curve)
    _emit({"order": pcfg.order, "mask": args.mask, **curve.to_dict(), "auac": auac, "au_mse": au_mse,
           "normalization": NORMALIZATION}, args.out)


def _read_mask(path, grid) -> np.ndarray:
    """A P5 PGM, a nested JSON array, or a flat JSON array shaped by ``grid``."""
    if Path(path).suffix.lower() != ".json":
        return read_pgm(path)
    mask = np.asarray(jsonio.read_json(path))
    if mask.ndim == 1:
        if grid is None:
            raise InputError(f"{path}: a flat mask needs --grid")
        if mask.size != grid[0] * grid[1]:
            raise DimensionError(f"{path}: {mask.size} values do not fill a {grid[0]}x{grid[1]} grid")
        mask = mask.reshape(grid)
    if mask.ndim != 2:
        raise InputError(f"{path}: mask must be two-dimensional")
    return mask


def run_eval_segmentation(args) -> None:
    truth = _read_mask(args.mask, args.grid)
    scores = np.asarray(_read_scores(args.relevance))
    if scores.size != truth.size:
        raise DimensionError(f"{scores.size} scores do not fill a {truth.shape[0]}x{truth.shape[1]} mask")
    result = segmentation_metrics(scores.reshape(truth.shape), truth, args.threshold)
    _emit({"threshold": args.threshold, **result.to_dict()}, args.out)


def run_audit(args) -> None:
    data = jsonio.read_json(args.relevance)
    if not isinstance(data, dict) or "per_token" not in data:
        raise InputError(f"{args.relevance}: not a relevance map")
    rmap = RelevanceMap.from_dict(data)
    _emit(conservation_audit(rmap, args.seed_total).to_dict(), args.out)


def run_export_heatmap(args) -> None:
    h, w = args.grid
    write_ppm(args.out, heatmap_pixels(_read_scores(args.relevance), h, w))


def run_gen_fixture(args) -> None:
    if args.name == "lemma3":
        config, weights, tokens = lemma3_fixture()
    elif args.name == "random":
        config, weights = random_model(args.seed, args.pe, num_layers=args.layers, num_heads=args.heads,
                                       d_model=args.d_model, max_seq_len=args.length, bias_free=args.bias_free,
                                       attention_softmax=not args.no_softmax)
        tokens = random_tokens(args.seed, config)
    elif args.name == "toy-trained":
        try:
            from .evaluation.training import make_task_data, train_toy_classifier
        except ImportError as exc:  # torch missing
            raise InputError(f"toy-trained needs torch: {exc}") from None
        result = train_toy_classifier(args.task, args.seed, args.epochs)
        config, weights = result.model
        tokens = [int(t) for t in make_task_data(args.task, 1, config.max_seq_len, config.vocab_size,
                                                 args.seed + 1)[0][0]]
    else:
        raise InputError(f"unknown fixture {args.name!r}; choose from {', '.join(FIXTURES)}")
    out = save_model(args.out, config, weights)
    jsonio.write_json(out / "tokens.json", tokens)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palrp", description="Position-aware relevance propagation toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("explain", help="relevance map for one prediction")
    p.add_argument("--model", required=True, help="model directory (manifest.json + weights.bin)")
    p.add_argument("--tokens", required=True, help="JSON array of token ids")
    p.add_argument("--position", type=int, default=None, help="explained position (default: last)")
    p.add_argument("--class", dest="target_class", type=int, default=None, help="explained class (default: argmax)")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.PA_LRP.value)
    p.add_argument("--eps", type=float, default=LRPConfig().epsilon)
    p.add_argument("--out")
    p.set_defaults(func=run_explain)

    p = sub.add_parser("eval-perturbation", help="masking curve and its areas")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--relevance", required=True, help="relevance map JSON or JSON score array")
    p.add_argument("--order", choices=["pos", "neg", "positive", "negative"], default="pos")
    p.add_argument("--fractions", type=_fractions, default=PerturbationConfig().fractions)
    p.add_argument("--mask", type=_mask_mode, default="zero", help="'zero' or 'id:N'")
    p.add_argument("--position", type=int, default=None)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=run_eval_perturbation)

    p = sub.add_parser("eval-segmentation", help="pixel accuracy and mIoU against a PGM mask")
    p.add_argument("--relevance", required=True)
    p.add_argument("--mask", required=True, help="binary P5 PGM or JSON 0/1 array")
    p.add_argument("--grid", type=_grid, default=None, help="HxW for a flat JSON mask")
    p.add_argument("--threshold", type=_threshold, default="mean")
    p.add_argument("--out")
    p.set_defaults(func=run_eval_segmentation)

    p = sub.add_parser("audit", help="positional share of a relevance map")
    p.add_argument("--relevance", required=True)
    p.add_argument("--seed-total", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=run_audit)

    p = sub.add_parser("gen-fixture", help="write a model directory")
    p.add_argument("name", help=" | ".join(FIXTURES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pe", choices=[k.value for k in PEKind], default=PEKind.ROPE.value)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--bias-free", action="store_true")
    p.add_argument("--no-softmax", action="store_true", help="use raw masked scores as attention weights")
    p.add_argument("--task", choices=["positional-copy", "bag-of-tokens"], default="positional-copy")
    p.add_argument("--epochs", type=int, default=2000)
    p.set_defaults(func=run_gen_fixture)

    p = sub.add_parser("export-heatmap", help="render per-token scores as a PPM")
    p.add_argument("--relevance", required=True)
    p.add_argument("--grid", type=_grid, required=True, help="HxW")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_export_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NonFiniteError as exc:
        code, msg = 4, exc
    except (InputError, LoadError, VocabularyError, OSError, json.JSONDecodeError) as exc:
        code, msg = 2, exc
    except (DimensionError, LengthError, DegenerateRowError, RegistryError, ValueError) as exc:
        code, msg = 3, exc
    else:
        return 0
    print(f"palrp {args.verb}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
