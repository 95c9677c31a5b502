from pathlib import Path

import pytest

from rris.lexicon import load_catalog, load_lexicons

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def lex():
    return load_lexicons()


@pytest.fixture(scope="session")
def annotations_path():
    return FIXTURE_DIR / "fixture_annotations.json"
