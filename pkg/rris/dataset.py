"""Annotation ingestion, robust split building and benchmark statistics.

Annotation files follow one schema::

    {"images": [{"id", "width", "height", "categories_present": [int]}],
     "categories": [{"id", "name", "synonyms"}],
     "references": [{"ref_id", "image_id", "split", "sentences": [str], "gt_rle": RLE}]}

A built robust dataset has the same layout with a "negatives" list on every
reference.
"""

from functools import cached_property
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from rris.config import GenerationConfig
from rris.errors import DatasetError
from rris.lexicon import CategoryCatalog, Lexicons, load_lexicons
from rris.logging import log_validation_failure, logger
from rris.masks import BinaryMask, RleMask, rle_decode
from rris.negatives import (
    ImageContext,
    NegativeSentence,
    PoolEntry,
    SourceReference,
    generate_negatives,
    negative_problem,
)
from rris.utils import PathLike, normalize_text, read_json, write_json

Split = Literal["train", "val"]
SPLITS = ("train", "val")


class ImageRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    categories_present: Tuple[int, ...] = ()

    @field_validator("categories_present")
    @classmethod
    def _sorted(cls, v):
        return tuple(sorted(set(v)))

    def context(self) -> ImageContext:
        return ImageContext(image_id=self.id, categories_present=frozenset(self.categories_present))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "categories_present": list(self.categories_present),
        }


class RefRecord(BaseModel):
    """One referred object with its positive sentences and, once built, its negatives."""

    model_config = ConfigDict(frozen=True)

    ref_id: int
    image_id: int
    split: Split
    sentences: Tuple[str, ...] = Field(min_length=1)
    gt_rle: RleMask
    negatives: Tuple[NegativeSentence, ...] = ()

    @field_validator("gt_rle", mode="before")
    @classmethod
    def _coco_rle(cls, v):
        # Files store {"size": [h, w], "counts": [...]}
        if isinstance(v, dict) and "size" in v:
            height, width = v["size"]
            return {"width": width, "height": height, "counts": v.get("counts")}
        return v

    def gt_mask(self) -> BinaryMask:
        return rle_decode(self.gt_rle)

    def to_json(self) -> dict:
        return {
            "ref_id": self.ref_id,
            "image_id": self.image_id,
            "split": self.split,
            "sentences": list(self.sentences),
            "gt_rle": self.gt_rle.to_json(),
            "negatives": [n.to_json() for n in self.negatives],
        }


class RobustDataset(BaseModel):
    """Images, category catalog and references; negatives are empty until built."""

    model_config = ConfigDict(frozen=True)

    images: Tuple[ImageRecord, ...]
    categories: CategoryCatalog
    references: Tuple[RefRecord, ...]

    @cached_property
    def image_by_id(self) -> Dict[int, ImageRecord]:
        return {image.id: image for image in self.images}

    def image_of(self, ref: RefRecord) -> ImageRecord:
        return self.image_by_id[ref.image_id]

    def splits(self) -> List[str]:
        return sorted({ref.split for ref in self.references})

    def to_json(self) -> dict:
        return {
            "images": [image.to_json() for image in self.images],
            "categories": self.categories.to_json(),
            "references": [ref.to_json() for ref in self.references],
        }

    @classmethod
    def from_json(cls, data) -> "RobustDataset":
        if not isinstance(data, dict):
            raise DatasetError("annotation root must be an object")
        try:
            catalog = CategoryCatalog.from_json(data["categories"])
            images = tuple(ImageRecord(**item) for item in data["images"])
            references = tuple(RefRecord(**item) for item in data["references"])
        except KeyError as e:
            raise DatasetError(f"missing top-level key {e}")
        except (TypeError, ValueError, ValidationError) as e:
            raise DatasetError(f"invalid annotation record: {e}")

        dataset = cls(
            images=tuple(sorted(images, key=lambda i: i.id)),
            categories=catalog,
            references=tuple(sorted(references, key=lambda r: r.ref_id)),
        )
        check_integrity(dataset)
        return dataset


class SplitStats(BaseModel):
    reference_count: int
    positives_per_reference: float
    negatives_per_reference: float
    sentences_per_reference: float


class DatasetStats(BaseModel):
    """Per-split reference counts and sentence means."""

    splits: Dict[str, SplitStats]

    def to_json(self) -> dict:
        return {
            split: {
                "reference_count": s.reference_count,
                "positives_per_reference": round(s.positives_per_reference, 6),
                "negatives_per_reference": round(s.negatives_per_reference, 6),
                "sentences_per_reference": round(s.sentences_per_reference, 6),
            }
            for split, s in self.splits.items()
        }

    def format_table(self) -> str:
        header = f"{'split':<6}  {'refs':>6}  {'pos/ref':>9}  {'neg/ref':>9}  {'sent/ref':>9}"
        lines = [header]
        for split, s in self.splits.items():
            lines.append(
                f"{split:<6}  {s.reference_count:>6}  {s.positives_per_reference:>9.6f}  "
                f"{s.negatives_per_reference:>9.6f}  {s.sentences_per_reference:>9.6f}"
            )
        return "\n".join(lines)


class NegativeIssue(BaseModel):
    ref_id: int
    text: str
    reason: str


def check_integrity(dataset: RobustDataset):
    """Referential and shape checks shared by loading and deserialization."""
    image_ids = [image.id for image in dataset.images]
    if len(image_ids) != len(set(image_ids)):
        raise DatasetError("duplicate image id")
    ref_ids = [ref.ref_id for ref in dataset.references]
    if len(ref_ids) != len(set(ref_ids)):
        raise DatasetError("duplicate reference id", code="duplicate-reference")

    for image in dataset.images:
        unknown = [c for c in image.categories_present if not dataset.categories.has(c)]
        if unknown:
            raise DatasetError(f"image {image.id} lists unknown categories {unknown}", code="dangling-reference")

    known_refs = frozenset(ref_ids)
    for ref in dataset.references:
        image = dataset.image_by_id.get(ref.image_id)
        if image is None:
            raise DatasetError(f"reference {ref.ref_id} points at missing image {ref.image_id}", code="dangling-reference")
        rle = ref.gt_rle
        if (rle.width, rle.height) != (image.width, image.height):
            raise DatasetError(
                f"reference {ref.ref_id}: gt mask is {rle.width}x{rle.height}, image is {image.width}x{image.height}",
                code="shape-mismatch",
            )
        if sum(rle.counts) != rle.width * rle.height:
            raise DatasetError(
                f"reference {ref.ref_id}: gt RLE covers {sum(rle.counts)} pixels, expected {rle.width * rle.height}",
                code="shape-mismatch",
            )
        for negative in ref.negatives:
            if negative.source_ref_id not in known_refs:
                raise DatasetError(
                    f"reference {ref.ref_id}: negative sourced from unknown reference {negative.source_ref_id}",
                    code="dangling-reference",
                )


def load_annotations(path: PathLike) -> RobustDataset:
    """Parse and cross-link an annotation file; references carry no negatives yet."""
    dataset = RobustDataset.from_json(read_json(path))
    logger.info(f"Loaded {len(dataset.references)} references over {len(dataset.images)} images from {path}")
    return dataset


def build_robust_split(
    dataset: RobustDataset,
    mode: Split,
    seed: int,
    lex: Optional[Lexicons] = None,
    config: GenerationConfig = GenerationConfig(),
    progress: bool = False,
) -> RobustDataset:
    """Attach generated negatives to every reference of the dataset.

    ``mode`` picks the count rule: ``train`` gives each reference as many
    negatives as positives, ``val`` gives ``config.negatives_per_ref``. The
    references keep their annotated split. Output depends only on the inputs
    and ``seed``.
    """
    if mode not in SPLITS:
        raise DatasetError(f"unknown split mode {mode!r}", code="invalid-options")
    lex = lex or load_lexicons()
    if config.exclude_absolute_positions:
        lex = lex.without_absolute_positions()

    references = dataset.references
    if not references:
        raise DatasetError("no references to build", code="empty-input")

    contexts = {image.id: image.context() for image in dataset.images}
    pool = [
        PoolEntry(text=sentence, ref_id=ref.ref_id, image=contexts[ref.image_id])
        for ref in references
        for sentence in ref.sentences
    ]

    built = []
    for ref in tqdm(references, desc=f"building {mode}", disable=not progress):
        n = len(ref.sentences) if mode == "train" else config.negatives_per_ref
        source = SourceReference(ref_id=ref.ref_id, image=contexts[ref.image_id], sentences=ref.sentences)
        negatives = generate_negatives(
            source,
            pool,
            dataset.categories,
            lex,
            n=n,
            seed=seed,
            max_retries=config.max_retries,
            max_draws=config.max_draws,
        )
        built.append(ref.model_copy(update={"negatives": tuple(negatives)}))

    return RobustDataset(
        images=dataset.images,
        categories=dataset.categories,
        references=tuple(built),
    )


def compute_stats(robust: RobustDataset) -> DatasetStats:
    if not robust.references:
        raise DatasetError("dataset has no references", code="empty-input")

    splits = {}
    for split in robust.splits():
        refs = [ref for ref in robust.references if ref.split == split]
        positives = sum(len(ref.sentences) for ref in refs)
        negatives = sum(len(ref.negatives) for ref in refs)
        count = len(refs)
        splits[split] = SplitStats(
            reference_count=count,
            positives_per_reference=positives / count,
            negatives_per_reference=negatives / count,
            sentences_per_reference=(positives + negatives) / count,
        )
    return DatasetStats(splits=splits)


def find_invalid_negatives(robust: RobustDataset, lex: Optional[Lexicons] = None) -> List[NegativeIssue]:
    """Every negative that names a present category, is vague, or repeats within its reference."""
    lex = lex or load_lexicons()
    issues = []
    for ref in robust.references:
        target = robust.image_of(ref).context()
        seen = set()
        for negative in ref.negatives:
            reason = negative_problem(negative.text, robust.categories, target, lex)
            key = normalize_text(negative.text)
            if reason is None and key in seen:
                reason = "duplicate negative"
            seen.add(key)
            if reason is not None:
                log_validation_failure(ref.ref_id, negative.text, reason)
                issues.append(NegativeIssue(ref_id=ref.ref_id, text=negative.text, reason=reason))
    return issues


def serialize(robust: RobustDataset, path: PathLike):
    write_json(robust.to_json(), path)


def deserialize(path: PathLike) -> RobustDataset:
    return RobustDataset.from_json(read_json(path))


def default_fixture_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "fixture_annotations.json"
