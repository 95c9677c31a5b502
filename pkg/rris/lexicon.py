"""Category catalog, word lexicons and the lexicon-driven tagger.

The tagger is deliberately small: a token is a noun when it names a catalog
category (name or synonym) or appears in the common-noun list, a color or
position when it appears in those lists, and OTHER otherwise. Multi-word
category names ("traffic light") are merged into one token first.
"""

from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from rris.errors import DatasetError, ExpressionError
from rris.utils import PathLike, normalize_text, read_json, split_words

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_CATALOG_PATH = DATA_DIR / "coco_categories.json"
DEFAULT_LEXICON_PATH = DATA_DIR / "lexicon.txt"

LEXICON_SECTIONS = ("vague", "colors", "positions", "absolute", "nouns")


class Tag(str, Enum):
    NOUN = "NOUN"
    ADJ_COLOR = "ADJ_COLOR"
    ADJ_POSITION = "ADJ_POSITION"
    OTHER = "OTHER"


class CategoryEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    name: str = Field(min_length=1)
    synonyms: Tuple[str, ...] = ()


class CategoryCatalog(BaseModel):
    """Object categories an expression can name; COCO's 80 by default."""

    model_config = ConfigDict(frozen=True)

    entries: Tuple[CategoryEntry, ...]

    @field_validator("entries")
    @classmethod
    def _unique_ids(cls, entries):
        ids = [e.id for e in entries]
        if len(ids) != len(set(ids)):
            raise ValueError("category ids must be unique")
        if not entries:
            raise ValueError("catalog is empty")
        return entries

    @cached_property
    def by_id(self) -> Dict[int, CategoryEntry]:
        return {e.id: e for e in self.entries}

    @cached_property
    def word_lookup(self) -> Dict[str, int]:
        # Names win over synonyms when a word is claimed twice
        lookup = {}
        for entry in self.entries:
            for syn in entry.synonyms:
                lookup.setdefault(normalize_text(syn), entry.id)
        for entry in self.entries:
            lookup[normalize_text(entry.name)] = entry.id
        return lookup

    @cached_property
    def phrases(self) -> FrozenSet[Tuple[str, ...]]:
        """Multi-word names and synonyms as word tuples."""
        return frozenset(tuple(form.split(" ")) for form in self.word_lookup if " " in form)

    @cached_property
    def max_phrase_len(self) -> int:
        return max((len(p) for p in self.phrases), default=1)

    def ids(self) -> List[int]:
        return sorted(self.by_id)

    def has(self, category_id: int) -> bool:
        return category_id in self.by_id

    def name_of(self, category_id: int) -> str:
        return self.by_id[category_id].name

    def resolve(self, token: str) -> Optional[int]:
        """Category id named by a (possibly merged) token."""
        return self.word_lookup.get(token)

    def to_json(self) -> list:
        return [{"id": e.id, "name": e.name, "synonyms": list(e.synonyms)} for e in self.entries]

    @classmethod
    def from_json(cls, data) -> "CategoryCatalog":
        try:
            return cls(entries=tuple(CategoryEntry(**item) for item in data))
        except (TypeError, ValidationError) as e:
            raise DatasetError(f"invalid category catalog: {e}")


class Lexicons(BaseModel):
    model_config = ConfigDict(frozen=True)

    vague_words: FrozenSet[str]
    colors: Tuple[str, ...]
    positions: Tuple[str, ...]
    absolute_positions: FrozenSet[str] = frozenset()
    nouns: FrozenSet[str] = frozenset()

    @model_validator(mode="after")
    def _check(self):
        if not self.vague_words or not self.colors or not self.positions:
            raise ValueError("vague, color and position lexicons must be non-empty")
        overlap = set(self.colors) & set(self.positions)
        if overlap:
            raise ValueError(f"colors and positions overlap: {sorted(overlap)}")
        return self

    def without_absolute_positions(self) -> "Lexicons":
        """Lexicons for RefCOCO+-style data, which avoids absolute locations."""
        relative = tuple(p for p in self.positions if p not in self.absolute_positions)
        return self.model_copy(update={"positions": relative})


class ReferringExpression(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    tokens: Tuple[str, ...]
    tags: Tuple[Tag, ...]

    @model_validator(mode="after")
    def _aligned(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError("tokens and tags differ in length")
        return self

    @property
    def normalized(self) -> str:
        return " ".join(self.tokens)

    def noun_indices(self) -> List[int]:
        return [i for i, tag in enumerate(self.tags) if tag == Tag.NOUN]


def load_catalog(path: Optional[PathLike] = None) -> CategoryCatalog:
    return CategoryCatalog.from_json(read_json(path or DEFAULT_CATALOG_PATH))


def parse_lexicons(text: str) -> Lexicons:
    sections: Dict[str, List[str]] = {name: [] for name in LEXICON_SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise DatasetError(f"line {lineno}: unknown lexicon section [{current}]")
            continue
        if current is None:
            raise DatasetError(f"line {lineno}: word outside of any section")
        word = normalize_text(line)
        if word and word not in sections[current]:
            sections[current].append(word)

    try:
        return Lexicons(
            vague_words=frozenset(sections["vague"]),
            colors=tuple(sections["colors"]),
            positions=tuple(sections["positions"]),
            absolute_positions=frozenset(sections["absolute"]),
            nouns=frozenset(sections["nouns"]),
        )
    except ValidationError as e:
        raise DatasetError(f"invalid lexicon: {e}")


def load_lexicons(path: Optional[PathLike] = None) -> Lexicons:
    path = Path(path or DEFAULT_LEXICON_PATH)
    try:
        return parse_lexicons(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"cannot read lexicon {path}: {e}", code="io-error")


def _merge_phrases(words: List[str], catalog: CategoryCatalog) -> List[str]:
    tokens = []
    i = 0
    while i < len(words):
        for size in range(min(catalog.max_phrase_len, len(words) - i), 1, -1):
            if tuple(words[i:i + size]) in catalog.phrases:
                tokens.append(" ".join(words[i:i + size]))
                i += size
                break
        else:
            tokens.append(words[i])
            i += 1
    return tokens


def tag_tokens(expr: str, catalog: CategoryCatalog, lex: Lexicons) -> ReferringExpression:
    tokens = _merge_phrases(split_words(expr), catalog)
    if not tokens:
        raise ExpressionError("expression has no words")

    colors = set(lex.colors)
    positions = set(lex.positions)

    def nounish(token):
        return catalog.resolve(token) is not None or token in lex.nouns

    tags = []
    for i, token in enumerate(tokens):
        category = catalog.resolve(token)
        followed_by_noun = i + 1 < len(tokens) and nounish(tokens[i + 1])
        # "orange shirt" is a color, "the orange" is the fruit
        if token in colors and (category is None or followed_by_noun):
            tags.append(Tag.ADJ_COLOR)
        elif category is not None:
            tags.append(Tag.NOUN)
        elif token in positions:
            tags.append(Tag.ADJ_POSITION)
        elif token in lex.nouns:
            tags.append(Tag.NOUN)
        else:
            tags.append(Tag.OTHER)

    return ReferringExpression(text=expr, tokens=tuple(tokens), tags=tuple(tags))


def first_noun(expr: ReferringExpression) -> Optional[int]:
    nouns = expr.noun_indices()
    return nouns[0] if nouns else None
