"""Negative referring expressions.

Five strategies turn positive expressions into sentences that describe
something absent from the image:

1. borrow a sentence from another image whose nouns are all absent here;
2. use a bare category name that is absent;
3. replace the target (first) noun with an absent category;
4. change a color or position word (or add one of each);
5. change the related (second) noun, or attach "<position> to the <category>".

Every candidate is checked with ``validate_negative`` before it is kept.
"""

from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from rris.errors import ExpressionError, GenerationExhausted
from rris.lexicon import (
    CategoryCatalog,
    CategoryEntry,
    Lexicons,
    ReferringExpression,
    Tag,
    first_noun,
    load_lexicons,
    tag_tokens,
)
from rris.logging import log_generation_event
from rris.utils import normalize_text

MAX_DRAWS = 64
MAX_RETRIES = 8


class GenStrategy(str, Enum):
    RANDOM_SENTENCE = "random_sentence"
    CATEGORY_NAME = "category_name"
    REPLACE_TARGET = "replace_target"
    CHANGE_ATTRIBUTE = "change_attribute"
    CHANGE_RELATION = "change_relation"


STRATEGY_ORDER = (
    GenStrategy.RANDOM_SENTENCE,
    GenStrategy.CATEGORY_NAME,
    GenStrategy.REPLACE_TARGET,
    GenStrategy.CHANGE_ATTRIBUTE,
    GenStrategy.CHANGE_RELATION,
)


class ImageContext(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: int
    categories_present: FrozenSet[int] = frozenset()


class PoolEntry(BaseModel):
    """A positive sentence of some reference, available for strategy 1."""

    model_config = ConfigDict(frozen=True)

    text: str
    ref_id: int
    image: ImageContext


class SourceReference(BaseModel):
    model_config = ConfigDict(frozen=True)

    ref_id: int
    image: ImageContext
    sentences: Tuple[str, ...]


class NegativeSentence(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    strategy: GenStrategy
    source_ref_id: int

    def to_json(self) -> dict:
        return {"text": self.text, "strategy": self.strategy.value, "source_ref_id": self.source_ref_id}


def is_vague_only(expr: ReferringExpression, lex: Lexicons) -> bool:
    return all(tok in lex.vague_words or tag == Tag.OTHER for tok, tag in zip(expr.tokens, expr.tags))


def named_categories(expr: ReferringExpression, catalog: CategoryCatalog) -> List[int]:
    ids = (catalog.resolve(expr.tokens[i]) for i in expr.noun_indices())
    return [c for c in ids if c is not None]


def negative_problem(text: str, catalog: CategoryCatalog, target: ImageContext, lex: Lexicons) -> Optional[str]:
    """Why ``text`` is not a valid negative for ``target``, or None when it is."""
    try:
        expr = tag_tokens(text, catalog, lex)
    except ExpressionError:
        return "empty expression"
    present = [c for c in named_categories(expr, catalog) if c in target.categories_present]
    if present:
        return f"names present category {catalog.name_of(present[0])!r}"
    if is_vague_only(expr, lex):
        return "vague words only"
    return None


def validate_negative(text: str, catalog: CategoryCatalog, target: ImageContext, lex: Lexicons) -> bool:
    """True when no noun names a present category and the text is not vague-only."""
    return negative_problem(text, catalog, target, lex) is None


def _absent(catalog: CategoryCatalog, target: ImageContext) -> List[CategoryEntry]:
    return [catalog.by_id[c] for c in catalog.ids() if c not in target.categories_present]


def _pick(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def _emit(tokens, strategy, source_ref_id, catalog, target, lex) -> Optional[NegativeSentence]:
    text = " ".join(tokens)
    if not validate_negative(text, catalog, target, lex):
        return None
    return NegativeSentence(text=text, strategy=strategy, source_ref_id=source_ref_id)


def strategy_random_sentence(
    pool: Sequence[PoolEntry],
    target: ImageContext,
    catalog: CategoryCatalog,
    lex: Lexicons,
    rng: np.random.Generator,
    max_draws: int = MAX_DRAWS,
) -> Optional[NegativeSentence]:
    if not pool:
        return None
    for _ in range(max_draws):
        entry = _pick(rng, pool)
        if entry.image.image_id == target.image_id:
            continue
        try:
            expr = tag_tokens(entry.text, catalog, lex)
        except ExpressionError:
            continue
        # The borrowed sentence must name a category, otherwise absence is unverifiable
        if not named_categories(expr, catalog):
            continue
        if validate_negative(entry.text, catalog, target, lex):
            return NegativeSentence(text=entry.text, strategy=GenStrategy.RANDOM_SENTENCE, source_ref_id=entry.ref_id)
    return None


def strategy_category(
    catalog: CategoryCatalog,
    target: ImageContext,
    rng: np.random.Generator,
    source_ref_id: int = 0,
    lex: Optional[Lexicons] = None,
) -> NegativeSentence:
    """A bare absent category name; names that read as vague words (``orange``) are skipped."""
    lex = lex or load_lexicons()
    absent = [e for e in _absent(catalog, target) if validate_negative(e.name, catalog, target, lex)]
    if not absent:
        raise ExpressionError(f"image {target.image_id} has no absent category to name", code="no-absent-category")
    entry = _pick(rng, absent)
    return NegativeSentence(text=entry.name, strategy=GenStrategy.CATEGORY_NAME, source_ref_id=source_ref_id)


def strategy_replace_target(
    expr: ReferringExpression,
    catalog: CategoryCatalog,
    target: ImageContext,
    lex: Lexicons,
    rng: np.random.Generator,
    source_ref_id: int = 0,
) -> Optional[NegativeSentence]:
    index = first_noun(expr)
    absent = _absent(catalog, target)
    if index is None or not absent:
        return None
    tokens = list(expr.tokens)
    tokens[index] = _pick(rng, absent).name
    return _emit(tokens, GenStrategy.REPLACE_TARGET, source_ref_id, catalog, target, lex)


def strategy_change_attribute(
    expr: ReferringExpression,
    catalog: CategoryCatalog,
    target: ImageContext,
    lex: Lexicons,
    rng: np.random.Generator,
    source_ref_id: int = 0,
) -> Optional[NegativeSentence]:
    tokens = list(expr.tokens)
    attributes = [i for i, tag in enumerate(expr.tags) if tag in (Tag.ADJ_COLOR, Tag.ADJ_POSITION)]

    if attributes:
        index = _pick(rng, attributes)
        words = lex.colors if expr.tags[index] == Tag.ADJ_COLOR else lex.positions
        choices = [w for w in words if w != tokens[index]]
        if not choices:
            return None
        tokens[index] = _pick(rng, choices)
    else:
        noun = first_noun(expr)
        if noun is None or not lex.positions:
            return None
        position = _pick(rng, lex.positions)
        color = _pick(rng, lex.colors)
        tokens = [position] + tokens[:noun] + [color] + tokens[noun:]

    return _emit(tokens, GenStrategy.CHANGE_ATTRIBUTE, source_ref_id, catalog, target, lex)


def strategy_change_relation(
    expr: ReferringExpression,
    catalog: CategoryCatalog,
    target: ImageContext,
    lex: Lexicons,
    rng: np.random.Generator,
    source_ref_id: int = 0,
) -> Optional[NegativeSentence]:
    nouns = expr.noun_indices()
    absent = _absent(catalog, target)
    if not nouns or not absent:
        return None

    tokens = list(expr.tokens)
    related = _pick(rng, absent).name
    if len(nouns) >= 2:
        tokens[nouns[1]] = related
    else:
        if not lex.positions:
            return None
        tokens += [_pick(rng, lex.positions), "to", "the", related]
    return _emit(tokens, GenStrategy.CHANGE_RELATION, source_ref_id, catalog, target, lex)


def reference_rng(seed: int, ref_id: int) -> np.random.Generator:
    """Independent stream per reference, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, ref_id]))


def generate_negatives(
    reference: SourceReference,
    pool: Sequence[PoolEntry],
    catalog: CategoryCatalog,
    lex: Lexicons,
    n: int,
    seed: int,
    max_retries: int = MAX_RETRIES,
    max_draws: int = MAX_DRAWS,
) -> List[NegativeSentence]:
    """Exactly ``n`` distinct validated negatives, strategies taken round-robin.

    A strategy that cannot produce a new valid sentence within ``max_retries``
    attempts is replaced by the category-name strategy for that slot.
    """
    if n < 1:
        raise ValueError("n must be at least 1")

    rng = reference_rng(seed, reference.ref_id)
    target = reference.image
    expressions = []
    for sentence in reference.sentences:
        try:
            expressions.append(tag_tokens(sentence, catalog, lex))
        except ExpressionError:
            continue

    def attempt(strategy: GenStrategy) -> Optional[NegativeSentence]:
        if strategy == GenStrategy.RANDOM_SENTENCE:
            return strategy_random_sentence(pool, target, catalog, lex, rng, max_draws)
        if strategy == GenStrategy.CATEGORY_NAME:
            try:
                return strategy_category(catalog, target, rng, reference.ref_id, lex)
            except ExpressionError:
                return None
        if not expressions:
            return None
        expr = _pick(rng, expressions)
        if strategy == GenStrategy.REPLACE_TARGET:
            return strategy_replace_target(expr, catalog, target, lex, rng, reference.ref_id)
        if strategy == GenStrategy.CHANGE_ATTRIBUTE:
            return strategy_change_attribute(expr, catalog, target, lex, rng, reference.ref_id)
        return strategy_change_relation(expr, catalog, target, lex, rng, reference.ref_id)

    seen = set()
    negatives: List[NegativeSentence] = []
    fallbacks = 0

    def draw(strategy: GenStrategy) -> Optional[NegativeSentence]:
        for _ in range(max_retries):
            candidate = attempt(strategy)
            if candidate is not None and normalize_text(candidate.text) not in seen:
                return candidate
        return None

    for slot in range(n):
        strategy = STRATEGY_ORDER[slot % len(STRATEGY_ORDER)]
        negative = draw(strategy)
        if negative is None and strategy != GenStrategy.CATEGORY_NAME:
            fallbacks += 1
            negative = draw(GenStrategy.CATEGORY_NAME)
        if negative is None:
            raise GenerationExhausted(
                f"reference {reference.ref_id}: only {len(negatives)} of {n} distinct valid negatives"
            )
        seen.add(normalize_text(negative.text))
        negatives.append(negative)

    counts: Dict[str, int] = {}
    for negative in negatives:
        counts[negative.strategy.value] = counts.get(negative.strategy.value, 0) + 1
    log_generation_event(reference.ref_id, counts, fallbacks)

    return negatives
