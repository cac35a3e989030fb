"""Golden corpus: every case must reproduce its frozen expected output."""

import pytest

from conftest import corpus_cases, load_expected, run_case, strip_paths


def test_corpus_has_at_least_25_cases():
    assert len(corpus_cases()) >= 25


@pytest.mark.parametrize("name", corpus_cases())
def test_corpus_case(name, tmp_path, cache_dir):
    code, outputs = run_case(name, str(tmp_path), cache_dir)
    assert code == 0
    assert strip_paths(outputs) == load_expected(name)
