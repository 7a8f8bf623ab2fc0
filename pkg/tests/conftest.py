from __future__ import annotations

from pathlib import Path

import pytest

from text2sql.dataset import load_catalogs, load_split
from text2sql.retrieval import HashEmbedder, build_index

from fixture_corpus import build_corpus

GOLDEN_DIR = Path(__file__).parent / "goldens"


def read_golden(name: str) -> str:
    return (GOLDEN_DIR / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory) -> Path:
    return build_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def catalogs(corpus_root):
    loaded, _ = load_catalogs(corpus_root)
    return loaded


@pytest.fixture(scope="session")
def dev_questions(corpus_root):
    return load_split(corpus_root, "dev")


@pytest.fixture(scope="session")
def train_questions(corpus_root):
    return load_split(corpus_root, "train")


@pytest.fixture(scope="session")
def embedder():
    return HashEmbedder(dimension=32)


@pytest.fixture(scope="session")
def train_index(train_questions, embedder):
    return build_index(train_questions, embedder)


@pytest.fixture()
def fresh_corpus(tmp_path) -> Path:
    return build_corpus(tmp_path / "corpus")
