"""Robust referring segmentation metrics.

rIoU folds negative predictions into the union term of each reference, mRR
counts exact empty answers to negative inputs, and mIoU / oIoU / Precision@X
are the usual positive-only scores. Everything inside a reference is integer
pixel arithmetic; references are reduced in ascending ``ref_id`` order so the
result does not depend on input order.
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel

from rris.errors import MaskError, MetricError
from rris.logging import log_degenerate_metric
from rris.masks import BinaryMask, area, intersection_area, iou, union_area

DEFAULT_THRESHOLDS = (0.5, 0.7, 0.9)


@dataclass(frozen=True)
class ReferenceEval:
    """Predictions and ground truth of one reference."""

    ref_id: int
    positives: Tuple[Tuple[BinaryMask, BinaryMask], ...]
    negatives: Tuple[BinaryMask, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(tuple(pair) for pair in self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        shapes = {m.shape for pair in self.positives for m in pair} | {m.shape for m in self.negatives}
        if len(shapes) > 1:
            raise MaskError(f"reference {self.ref_id} mixes mask shapes {sorted(shapes)}")


class StrategyStats(BaseModel):
    count: int
    robust_recall: float
    mask_ratio: float


class MetricReport(BaseModel):
    r_iou: float
    m_rr: Optional[float]
    m_iou: float
    o_iou: float
    precision_at: Dict[str, float]
    r2vos_r: Optional[float]
    reference_count: int
    per_strategy: Dict[str, StrategyStats] = {}

    def to_json(self) -> dict:
        def fmt(value):
            return None if value is None else round(value, 6)

        return {
            "r_iou": fmt(self.r_iou),
            "m_rr": fmt(self.m_rr),
            "m_iou": fmt(self.m_iou),
            "o_iou": fmt(self.o_iou),
            "precision_at": {k: fmt(v) for k, v in self.precision_at.items()},
            "r2vos_r": fmt(self.r2vos_r),
            "reference_count": self.reference_count,
            "per_strategy": {
                name: {"count": s.count, "robust_recall": fmt(s.robust_recall), "mask_ratio": fmt(s.mask_ratio)}
                for name, s in self.per_strategy.items()
            },
        }

    def format_table(self) -> str:
        rows = [("rIoU", self.r_iou), ("mRR", self.m_rr), ("mIoU", self.m_iou), ("oIoU", self.o_iou)]
        rows += [(f"P@{k}", v) for k, v in self.precision_at.items()]
        rows += [("R (R2VOS)", self.r2vos_r), ("references", self.reference_count)]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if value is None:
                text = "n/a"
            elif isinstance(value, int):
                text = str(value)
            else:
                text = f"{value:.6f}"
            lines.append(f"{name.ljust(width)}  {text.rjust(10)}")
        if self.per_strategy:
            lines.append("")
            lines.append(f"{'strategy':<16}  {'count':>5}  {'mRR':>8}  {'mask ratio':>10}")
            for name, s in self.per_strategy.items():
                lines.append(f"{name:<16}  {s.count:>5}  {s.robust_recall:>8.6f}  {s.mask_ratio:>10.6f}")
        return "\n".join(lines)


def _ordered(refs: Iterable[ReferenceEval]) -> List[ReferenceEval]:
    refs = sorted(refs, key=lambda r: r.ref_id)
    if not refs:
        raise MetricError("no references to evaluate")
    for prev, cur in zip(refs, refs[1:]):
        if prev.ref_id == cur.ref_id:
            raise MetricError(f"reference {cur.ref_id} appears twice", code="duplicate-reference")
    return refs


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def reference_r_iou(ref: ReferenceEval) -> float:
    """Per-reference rIoU term; integer sums, one division."""
    numerator = sum(intersection_area(pred, gt) for pred, gt in ref.positives)
    denominator = sum(union_area(pred, gt) for pred, gt in ref.positives)
    denominator += sum(area(pred) for pred in ref.negatives)
    if denominator == 0:
        return 1.0
    return numerator / denominator


def r_iou(refs: Iterable[ReferenceEval]) -> float:
    return _mean([reference_r_iou(ref) for ref in _ordered(refs)])


def robust_recall(ref: ReferenceEval) -> float:
    if not ref.negatives:
        raise MetricError(f"reference {ref.ref_id} has no negative inputs", code="no-negatives")
    empty = sum(1 for pred in ref.negatives if area(pred) == 0)
    return empty / len(ref.negatives)


def mean_robust_recall(refs: Iterable[ReferenceEval]) -> float:
    # References without negatives have no defined RR and are skipped
    qualifying = [ref for ref in _ordered(refs) if ref.negatives]
    if not qualifying:
        raise MetricError("no reference has negative inputs")
    return _mean([robust_recall(ref) for ref in qualifying])


def _positive_pairs(refs: Iterable[ReferenceEval]) -> List[Tuple[BinaryMask, BinaryMask]]:
    pairs = [pair for ref in _ordered(refs) for pair in ref.positives]
    if not pairs:
        raise MetricError("no positive predictions to evaluate")
    return pairs


def mean_iou(refs: Iterable[ReferenceEval]) -> float:
    return _mean([iou(pred, gt) for pred, gt in _positive_pairs(refs)])


def overall_iou(refs: Iterable[ReferenceEval]) -> float:
    pairs = _positive_pairs(refs)
    total_union = sum(union_area(pred, gt) for pred, gt in pairs)
    if total_union == 0:
        return 1.0
    return sum(intersection_area(pred, gt) for pred, gt in pairs) / total_union


def precision_at(refs: Iterable[ReferenceEval], threshold: float) -> float:
    """Fraction of positive pairs whose IoU is strictly above the threshold."""
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"threshold {threshold} outside (0, 1)", code="invalid-threshold")
    scores = [iou(pred, gt) for pred, gt in _positive_pairs(refs)]
    return sum(1 for s in scores if s > threshold) / len(scores)


def r2vos_r(refs: Iterable[ReferenceEval]) -> float:
    refs = _ordered(refs)
    positive_pixels = sum(area(pred) for ref in refs for pred, _ in ref.positives)
    negative_pixels = sum(area(pred) for ref in refs for pred in ref.negatives)
    if positive_pixels == 0:
        raise MetricError("every positive prediction is empty", code="degenerate-denominator")
    return 1.0 - negative_pixels / positive_pixels


def aggregate_report(refs: Iterable[ReferenceEval], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> MetricReport:
    refs = _ordered(refs)

    try:
        m_rr = mean_robust_recall(refs)
    except MetricError as e:
        log_degenerate_metric("m_rr", str(e))
        m_rr = None

    try:
        r = r2vos_r(refs)
    except MetricError as e:
        log_degenerate_metric("r2vos_r", str(e))
        r = None

    return MetricReport(
        r_iou=r_iou(refs),
        m_rr=m_rr,
        m_iou=mean_iou(refs),
        o_iou=overall_iou(refs),
        precision_at={str(float(t)): precision_at(refs, t) for t in thresholds},
        r2vos_r=r,
        reference_count=len(refs),
    )


def strategy_breakdown(negatives: Iterable[Tuple[str, BinaryMask]]) -> Dict[str, StrategyStats]:
    """Robust recall and mean mask ratio of negative predictions, per generation strategy."""
    grouped: Dict[str, List[BinaryMask]] = {}
    for strategy, pred in negatives:
        grouped.setdefault(strategy, []).append(pred)

    breakdown = {}
    for strategy in sorted(grouped):
        preds = grouped[strategy]
        breakdown[strategy] = StrategyStats(
            count=len(preds),
            robust_recall=sum(1 for p in preds if area(p) == 0) / len(preds),
            mask_ratio=_mean([area(p) / (p.width * p.height) for p in preds]),
        )
    return breakdown
