import csv
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drqr.porter import stem
from drqr.text import PipelineConfig, load_stopwords, process, process_tokens, tokenize

DATA = Path(__file__).parent / "data"


def _vocabulary():
    with open(DATA / "porter_vocabulary.tsv", encoding="utf-8") as fh:
        return [(w, s) for w, s in csv.reader(fh, delimiter="\t")]


class TestPorter:
    @pytest.mark.parametrize(
        "word, expected",
        [
            ("caresses", "caress"),
            ("ponies", "poni"),
            ("cats", "cat"),
            ("feed", "feed"),
            ("agreed", "agre"),
            ("plastered", "plaster"),
            ("motoring", "motor"),
            ("hopping", "hop"),
            ("filing", "file"),
            ("happy", "happi"),
            ("relational", "relat"),
            ("conditional", "condit"),
            ("generalization", "gener"),
            ("electricity", "electr"),
            ("adjustable", "adjust"),
            ("controlling", "control"),
            ("roll", "roll"),
            ("a", "a"),
        ],
    )
    def test_known_stems(self, word, expected):
        assert stem(word) == expected

    def test_reference_vocabulary(self):
        rows = _vocabulary()
        assert len(rows) > 20_000
        wrong = [(w, s, stem(w)) for w, s in rows if stem(w) != s]
        assert not wrong, wrong[:10]

    def test_independent_oracle(self):
        snowball = pytest.importorskip("snowballstemmer")
        oracle = snowball.stemmer("porter")
        words = [w for w, _ in _vocabulary()[:2000]]
        assert [stem(w) for w in words] == oracle.stemWords(words)

    @given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=15))
    def test_never_grows(self, word):
        assert len(stem(word)) <= len(word)


class TestTokenize:
    def test_punctuation_and_case(self):
        assert tokenize("Hello, World! it's 2019") == ["hello", "world", "it", "s", "2019"]

    def test_keep_case(self):
        assert tokenize("New York", lowercase=False) == ["New", "York"]

    def test_empty(self):
        assert tokenize("  ,,; ") == []

    @given(st.text())
    def test_tokens_are_alphanumeric(self, text):
        for tok in tokenize(text):
            assert tok and tok.isascii() and tok.isalnum()


class TestPipeline:
    def test_stopwords_bundled(self):
        words = load_stopwords()
        assert {"the", "and", "of"} <= words
        assert "cat" not in words

    def test_order_stop_then_stem(self):
        # "during" stems to "dure", so stemming first would let it through
        assert process("The cats during running") == ["cat", "run"]

    def test_raw_config(self):
        assert process("The Cats", PipelineConfig.raw()) == ["the", "cats"]

    def test_custom_stopwords(self, tmp_path):
        path = tmp_path / "stop.txt"
        path.write_text("cat\n\ndog\n")
        config = PipelineConfig(stopwords=load_stopwords(path), stem=False)
        assert process("cat and dog run", config) == ["and", "run"]

    def test_process_tokens_matches_process(self):
        text = "Retrieval of relevant documents"
        assert process_tokens(tokenize(text)) == process(text)

    @settings(max_examples=50)
    @given(st.lists(st.sampled_from(["running", "the", "cats", "of", "generalization"]), max_size=8))
    def test_idempotent_on_stems(self, words):
        once = process(" ".join(words))
        assert process(" ".join(once), PipelineConfig(stopwords=frozenset(), stem=False)) == once
