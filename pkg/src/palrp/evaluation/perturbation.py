"""Token-masking perturbation curves and their normalized areas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError, LengthError
from ..model import forward

DEFAULT_FRACTIONS = tuple(round(0.1 * k, 10) for k in range(1, 10))
NORMALIZATION = "trapezoid area divided by fraction span"


@dataclass(frozen=True)
class PerturbationConfig:
    """``mask_mode`` is ``"zero"`` (zero the token embedding) or an int token id.

    ``target`` ``None`` means the class predicted on the unperturbed input;
    ``position`` ``None`` means the last token.
    """

    order: str = "positive"
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    mask_mode: str | int = "zero"
    target: int | None = None
    position: int | None = None

    def __post_init__(self):
        if self.order not in ("positive", "negative"):
            raise ValueError("order must be 'positive' or 'negative'")
        fr = tuple(float(f) for f in self.fractions)
        if not fr or any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("fractions must be strictly increasing within (0, 1]")
        object.__setattr__(self, "fractions", fr)
        if self.mask_mode != "zero" and not isinstance(self.mask_mode, int):
            raise ValueError("mask_mode must be 'zero' or a token id")


@dataclass
class PerturbationCurve:
    fractions: list[float]
    activation: list[float]
    mse: list[float]
    masked: list[list[int]] = field(default_factory=list)
    target: int = 0

    def to_dict(self) -> dict:
        return {"fractions": self.fractions, "activation": self.activation, "mse": self.mse,
                "masked": self.masked, "target": self.target}


def masking_order(scores: Sequence[float], order: str = "positive") -> list[int]:
    """Token indices in masking order; ties go to the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores))
    key = -scores if order == "positive" else scores
    return [int(i) for i in np.lexsort((idx, key))]


def n_masked(fraction: float, length: int) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return min(length, max(0, math.ceil(fraction * length - 1e-9)))


def _probabilities(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def _run(model, tokens, masked, mask_mode):
    config, weights = model
    if mask_mode == "zero":
        logits, _ = forward(config, weights, tokens, zero_positions=masked)
    else:
        tokens = list(tokens)
        for p in masked:
            tokens[p] = int(mask_mode)
        logits, _ = forward(config, weights, tokens)
    return logits


def curve_for_order(model, tokens: Sequence[int], order: Sequence[int], pcfg: PerturbationConfig) -> PerturbationCurve:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise LengthError("empty input")
    pos = len(tokens) - 1 if pcfg.position is None else pcfg.position
    base = _run(model, tokens, [], pcfg.mask_mode)[pos]
    target = int(np.argmax(base)) if pcfg.target is None else int(pcfg.target)
    acts, mses, masks = [], [], []
    for f in pcfg.fractions:
        masked = sorted(order[: n_masked(f, len(tokens))])
        row = _run(model, tokens, masked, pcfg.mask_mode)[pos]
        acts.append(float(_probabilities(row)[target]))
        mses.append(float(np.mean((row - base) ** 2)))
        masks.append(masked)
    return PerturbationCurve(list(pcfg.fractions), acts, mses, masks, target)


def perturbation_curve(model, tokens: Sequence[int], scores: Sequence[float],
                       pcfg: PerturbationConfig = PerturbationConfig()) -> PerturbationCurve:
    if len(tokens) == 0:
        raise LengthError("empty input")
    if len(scores) != len(tokens):
        raise DimensionError(f"{len(scores)} scores for {len(tokens)} tokens")
    return curve_for_order(model, tokens, masking_order(scores, pcfg.order), pcfg)


def random_order_curve(model, tokens: Sequence[int], seed: int,
                       pcfg: PerturbationConfig = PerturbationConfig()) -> PerturbationCurve:
    order = [int(i) for i in np.random.default_rng(seed).permutation(len(tokens))]
    return curve_for_order(model, tokens, order, pcfg)


def normalized_area(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("need at least two points of matching length")
    span = x[-1] - x[0]
    if span <= 0:
        raise ValueError("fraction axis must be increasing")
    return float(np.trapezoid(y, x) / span)


def area_metrics(curve: PerturbationCurve) -> tuple[float, float]:
    """(AUAC, AU-MSE), each a trapezoid area normalized by the fraction span."""
    return normalized_area(curve.fractions, curve.activation), normalized_area(curve.fractions, curve.mse)
