import hashlib
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from rris.errors import ExpressionError, ModelError
from rris.logging import logger
from rris.utils import normalize_text, split_words

MAX_TEXT_LEN = 20


class TextPrompt(BaseModel):
    text: str
    tokens: Tuple[str, ...]
    truncated: bool = False


def text_prompt_concat(sentences: Sequence[str], max_len: int = MAX_TEXT_LEN) -> TextPrompt:
    """All sentences of a reference as one input expression, cut to ``max_len`` words."""
    words = [w for sentence in sentences for w in split_words(sentence)]
    if not words:
        raise ExpressionError("no words to build a prompt from")

    truncated = len(words) > max_len
    if truncated:
        logger.warning(f"Prompt of {len(words)} words truncated to {max_len}")
        words = words[:max_len]
    return TextPrompt(text=" ".join(words), tokens=tuple(words), truncated=truncated)


def word_id(word: str, vocab_size: int) -> int:
    """Stable vocabulary slot of a word; independent of interpreter hash seeds."""
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def token_ids(text: str, vocab_size: int, max_len: int = MAX_TEXT_LEN) -> np.ndarray:
    words = normalize_text(text).split()
    if not words:
        raise ExpressionError("expression has no words")
    if len(words) > max_len:
        raise ModelError(f"{len(words)} tokens exceed the limit of {max_len}", code="token-overflow")
    return np.array([word_id(w, vocab_size) for w in words], dtype=np.int64)
