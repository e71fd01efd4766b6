"""Perturbation curves, segmentation scores, conservation audits and fixtures."""

from .audit import ConservationReport, conservation_audit
from .fixtures import lemma3_fixture, random_model, random_tokens
from .perturbation import (
    PerturbationConfig,
    PerturbationCurve,
    area_metrics,
    perturbation_curve,
    random_order_curve,
)
from .segmentation import SegmentationResult, segmentation_metrics

__all__ = [
    "ConservationReport",
    "PerturbationConfig",
    "PerturbationCurve",
    "SegmentationResult",
    "area_metrics",
    "conservation_audit",
    "lemma3_fixture",
    "perturbation_curve",
    "random_model",
    "random_order_curve",
    "random_tokens",
    "segmentation_metrics",
]
