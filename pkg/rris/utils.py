import json
import re
from pathlib import Path
from typing import Any, List, Union

from rris.errors import DatasetError

PathLike = Union[str, Path]


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation and collapse whitespace."""
    if not text:
        return ""

    text = text.lower()

    # Keep word characters only; apostrophes and hyphens split words
    text = re.sub(r"[^\w\s]", " ", text)
    text = text.replace("_", " ")

    # Normalize whitespace
    text = re.sub(r"\s+", " ", text).strip()

    return text


def split_words(text: str) -> List[str]:
    """Normalized word list of a sentence."""
    normalized = normalize_text(text)
    return normalized.split(" ") if normalized else []


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys, UTF-8 text and a trailing newline."""
    return json.dumps(data, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def write_json(data: Any, path: PathLike):
    """Write canonical JSON; LF line endings on every platform."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json(data))
    except OSError as e:
        raise DatasetError(f"cannot write {path}: {e}", code="io-error")


def read_json(path: PathLike) -> Any:
    """Read a JSON file, mapping failures to toolkit errors."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"file not found: {path}", code="io-error")
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path} is not valid JSON: {e}", code="parse-error")
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}", code="io-error")
