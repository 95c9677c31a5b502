"""Binary masks, their uncompressed run-length form and integer set algebra.

Pixels are scanned column-major (down each column, then to the next column),
the layout COCO uses for uncompressed RLE. Run counts always start with a
background run, so a mask whose first pixel is foreground encodes with a
leading zero.
"""

from typing import Any, Dict, Iterable, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from rris.errors import MaskError


class BinaryMask:
    """Immutable height x width boolean mask."""

    __slots__ = ("_bits",)

    def __init__(self, bits: np.ndarray):
        bits = np.array(bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] == 0 or bits.shape[1] == 0:
            raise MaskError(f"mask must be a non-empty 2-d array, got shape {bits.shape}")
        bits.setflags(write=False)
        self._bits = bits

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_positions(cls, width: int, height: int, positions: Iterable[int]) -> "BinaryMask":
        """Build a mask from column-major pixel indices."""
        flat = np.zeros(width * height, dtype=bool)
        flat[list(positions)] = True
        return cls(flat.reshape((height, width), order="F"))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._bits.shape

    def column_major(self) -> np.ndarray:
        return self._bits.ravel(order="F")

    def positions(self) -> Tuple[int, ...]:
        return tuple(int(p) for p in np.flatnonzero(self.column_major()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask(width={self.width}, height={self.height}, area={area(self)})"


class RleMask(BaseModel):
    """Uncompressed column-major run lengths, background run first."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    counts: Tuple[int, ...]

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, counts):
        if any(c < 0 for c in counts):
            raise ValueError("run lengths must be non-negative")
        return counts

    def to_json(self) -> Dict[str, Any]:
        # Height first in "size", as in COCO annotations
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "RleMask":
        try:
            height, width = obj["size"]
            return cls(width=width, height=height, counts=tuple(obj["counts"]))
        except (KeyError, TypeError, ValueError) as e:
            raise MaskError(f"malformed RLE object: {e}", code="malformed-rle")


def area(mask: BinaryMask) -> int:
    return int(np.count_nonzero(mask.bits))


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.column_major().astype(np.int8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    counts = [int(c) for c in np.diff(boundaries)]
    if flat[0] == 1:
        counts.insert(0, 0)
    return RleMask(width=mask.width, height=mask.height, counts=tuple(counts))


def rle_decode(rle: RleMask) -> BinaryMask:
    total = sum(rle.counts)
    if total != rle.width * rle.height:
        raise MaskError(
            f"run lengths sum to {total}, expected {rle.width}x{rle.height}={rle.width * rle.height}",
            code="malformed-rle",
        )
    for i in range(1, len(rle.counts)):
        if rle.counts[i] == 0 and rle.counts[i - 1] == 0:
            raise MaskError(f"adjacent zero runs at position {i}", code="malformed-rle")

    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, rle.counts)
    return BinaryMask(flat.reshape((rle.height, rle.width), order="F"))


def _check_same_shape(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise MaskError(f"mask shapes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    _check_same_shape(a, b)
    return int(np.count_nonzero(a.bits & b.bits))


def union_area(a: BinaryMask, b: BinaryMask) -> int:
    _check_same_shape(a, b)
    return int(np.count_nonzero(a.bits | b.bits))


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    union = union_area(a, b)
    if union == 0:
        return 1.0
    return intersection_area(a, b) / union
