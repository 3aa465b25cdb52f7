import gzip
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for fixture_corpus

from fixture_corpus import baseline_bytes, write_baseline_files  # noqa: E402


@pytest.fixture
def gz_builder(tmp_path):
    """Write a small baseline .xml.gz from citation dicts."""

    def build(citations, name="fixture.xml.gz"):
        path = tmp_path / name
        path.write_bytes(gzip.compress(baseline_bytes(citations), mtime=0))
        return path

    return build


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """The 100-abstract fixture corpus as two baseline files."""
    directory = tmp_path_factory.mktemp("corpus")
    write_baseline_files(directory)
    return directory
