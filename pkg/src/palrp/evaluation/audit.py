"""How much of an explanation's positive relevance sits in positional sinks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..pe_lrp import RelevanceMap


@dataclass(frozen=True)
class ConservationReport:
    semantic_total: float
    positional_total: float
    seed_total: float
    positional_fraction: float
    bias_residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def conservation_audit(rmap: RelevanceMap, seed_total: float | None = None) -> ConservationReport:
    """Totals use positive parts only; ``bias_residual`` compares raw sums with the seed.

    The residual collects everything the rules did not hand on to a leaf:
    bias shares, the softmax linearization remainder, and (for baseline
    maps) the discarded sink relevance.
    """
    if seed_total is None:
        seed_total = rmap.seed_total
    semantic = float(np.maximum(rmap.semantic, 0.0).sum())
    positional = float(sum(np.maximum(s, 0.0).sum() for s in rmap.positional_sinks))
    denom = semantic + positional
    fraction = positional / denom if denom > 0 else 0.0
    residual = float(seed_total) - rmap.raw_total()
    return ConservationReport(semantic, positional, float(seed_total), fraction, residual)
