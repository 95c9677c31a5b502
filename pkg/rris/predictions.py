"""Prediction files and their join with a robust dataset.

A predictions file is a list with one entry per (ref_id, sentence_id,
is_negative) triple, where ``sentence_id`` indexes the reference's positive
sentences or its negatives. ``rle`` is a COCO-style mask, or null for an
explicit empty mask::

    [{"ref_id": 101, "sentence_id": 0, "is_negative": false,
      "rle": {"size": [h, w], "counts": [...]}},
     {"ref_id": 101, "sentence_id": 0, "is_negative": true, "rle": null}]
"""

from typing import Dict, Iterable, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from rris.dataset import RobustDataset
from rris.errors import DatasetError
from rris.logging import log_eval_summary
from rris.masks import BinaryMask, RleMask, area, rle_decode, rle_encode
from rris.metrics import DEFAULT_THRESHOLDS, MetricReport, ReferenceEval, aggregate_report, strategy_breakdown
from rris.negatives import reference_rng
from rris.utils import PathLike, read_json, write_json

Policy = Literal["perfect", "empty", "full", "noisy"]
POLICIES = ("perfect", "empty", "full", "noisy")
NOISE_FLIP_RATE = 0.1


class PredictionKey(NamedTuple):
    ref_id: int
    sentence_id: int
    is_negative: bool


class Prediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    ref_id: int
    sentence_id: int
    is_negative: bool
    rle: Optional[RleMask]

    @field_validator("rle", mode="before")
    @classmethod
    def _coco_rle(cls, v):
        if isinstance(v, dict) and "size" in v:
            height, width = v["size"]
            return {"width": width, "height": height, "counts": v.get("counts")}
        return v

    @property
    def key(self) -> PredictionKey:
        return PredictionKey(self.ref_id, self.sentence_id, self.is_negative)

    def decode(self, width: int, height: int) -> BinaryMask:
        """Predicted mask; a null RLE is an empty mask of the given size."""
        if self.rle is None:
            return BinaryMask.zeros(width, height)
        return rle_decode(self.rle)

    def to_json(self) -> dict:
        return {
            "ref_id": self.ref_id,
            "sentence_id": self.sentence_id,
            "is_negative": self.is_negative,
            "rle": None if self.rle is None else self.rle.to_json(),
        }


def expected_keys(robust: RobustDataset) -> List[PredictionKey]:
    keys = []
    for ref in robust.references:
        keys += [PredictionKey(ref.ref_id, i, False) for i in range(len(ref.sentences))]
        keys += [PredictionKey(ref.ref_id, i, True) for i in range(len(ref.negatives))]
    return keys


def load_predictions(path: PathLike) -> Dict[PredictionKey, Prediction]:
    data = read_json(path)
    try:
        if not isinstance(data, list):
            raise TypeError("root must be a list of predictions")
        items = [Prediction(**item) for item in data]
    except (TypeError, ValueError, ValidationError) as e:
        raise DatasetError(f"invalid predictions file {path}: {e}")

    predictions = {}
    for item in items:
        if item.key in predictions:
            raise DatasetError(f"duplicate prediction for {tuple(item.key)}")
        predictions[item.key] = item
    return predictions


def dump_predictions(predictions: Iterable[Prediction], path: PathLike):
    ordered = sorted(predictions, key=lambda p: (p.ref_id, p.is_negative, p.sentence_id))
    write_json([p.to_json() for p in ordered], path)


def join_predictions(robust: RobustDataset, predictions: Dict[PredictionKey, Prediction]) -> List[ReferenceEval]:
    """Pair every sentence of the dataset with its predicted mask."""
    missing = [key for key in expected_keys(robust) if key not in predictions]
    if missing:
        listed = ", ".join(f"({k.ref_id}, {k.sentence_id}, {'neg' if k.is_negative else 'pos'})" for k in missing)
        raise DatasetError(f"{len(missing)} predictions missing: {listed}", code="missing-predictions")

    refs = []
    for ref in robust.references:
        gt = ref.gt_mask()
        positives = tuple(
            (predictions[PredictionKey(ref.ref_id, i, False)].decode(gt.width, gt.height), gt)
            for i in range(len(ref.sentences))
        )
        negatives = tuple(
            predictions[PredictionKey(ref.ref_id, i, True)].decode(gt.width, gt.height) for i in range(len(ref.negatives))
        )
        refs.append(ReferenceEval(ref_id=ref.ref_id, positives=positives, negatives=negatives))
    return refs


def negative_strategy_masks(
    robust: RobustDataset, predictions: Dict[PredictionKey, Prediction]
) -> List[Tuple[str, BinaryMask]]:
    """(strategy, predicted mask) for every negative, input to ``strategy_breakdown``."""
    pairs = []
    for ref in robust.references:
        width, height = ref.gt_rle.width, ref.gt_rle.height
        for i, negative in enumerate(ref.negatives):
            prediction = predictions[PredictionKey(ref.ref_id, i, True)]
            pairs.append((negative.strategy.value, prediction.decode(width, height)))
    return pairs


def _noisy(gt: BinaryMask, rng: np.random.Generator) -> BinaryMask:
    flips = rng.random(gt.bits.shape) < NOISE_FLIP_RATE
    return BinaryMask(gt.bits ^ flips)


def _blob(width: int, height: int, rng: np.random.Generator) -> BinaryMask:
    top, left = int(rng.integers(height)), int(rng.integers(width))
    bottom, right = int(rng.integers(top, height)) + 1, int(rng.integers(left, width)) + 1
    bits = np.zeros((height, width), dtype=bool)
    bits[top:bottom, left:right] = True
    return BinaryMask(bits)


def synthesize_predictions(robust: RobustDataset, policy: Policy, seed: int = 0) -> List[Prediction]:
    """Stand-in model outputs for end-to-end runs without a trained model.

    ``perfect`` answers positives with the ground truth and negatives with an
    empty mask; ``empty`` and ``full`` ignore the input; ``noisy`` flips GT
    pixels and answers each negative with an empty mask or a random box.
    """
    if policy not in POLICIES:
        raise DatasetError(f"unknown prediction policy {policy!r}", code="invalid-options")

    predictions = []
    for ref in robust.references:
        gt = ref.gt_mask()
        w, h = gt.width, gt.height
        rng = reference_rng(seed, ref.ref_id)

        def emit(mask: BinaryMask, sentence_id: int, is_negative: bool):
            predictions.append(
                Prediction(
                    ref_id=ref.ref_id,
                    sentence_id=sentence_id,
                    is_negative=is_negative,
                    rle=rle_encode(mask) if area(mask) else None,
                )
            )

        for i in range(len(ref.sentences)):
            if policy == "perfect":
                emit(gt, i, False)
            elif policy == "empty":
                emit(BinaryMask.zeros(w, h), i, False)
            elif policy == "full":
                emit(BinaryMask.full(w, h), i, False)
            else:
                emit(_noisy(gt, rng), i, False)

        for i in range(len(ref.negatives)):
            if policy == "full":
                emit(BinaryMask.full(w, h), i, True)
            elif policy == "noisy" and rng.random() >= 0.5:
                emit(_blob(w, h, rng), i, True)
            else:
                emit(BinaryMask.zeros(w, h), i, True)
    return predictions


def evaluate_predictions(
    robust: RobustDataset,
    predictions: Dict[PredictionKey, Prediction],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricReport:
    """Aggregate report of a predictions file, with the per-strategy negative breakdown."""
    report = aggregate_report(join_predictions(robust, predictions), thresholds)
    breakdown = strategy_breakdown(negative_strategy_masks(robust, predictions))
    report = report.model_copy(update={"per_strategy": breakdown})
    log_eval_summary(report.to_json())
    return report
