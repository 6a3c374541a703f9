"""Tokenisation, stopword removal and stemming for index and query text."""

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from drqr.porter import stem

_SPLIT = re.compile(r"[^0-9A-Za-z]+")


def load_stopwords(path=None):
    """Read a stopword file, one token per line. Defaults to the bundled list."""
    if path is None:
        text = resources.files("drqr").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


@dataclass(frozen=True)
class PipelineConfig:
    lowercase: bool = True
    stopwords: frozenset = field(default_factory=load_stopwords)
    stem: bool = True

    @classmethod
    def raw(cls):
        """Tokenise and lowercase only."""
        return cls(lowercase=True, stopwords=frozenset(), stem=False)


def tokenize(text, lowercase=True):
    """Split on any non-alphanumeric character, dropping empty fragments.

    >>> tokenize("Cat, sat!")
    ['cat', 'sat']
    """
    if lowercase:
        text = text.lower()
    return [tok for tok in _SPLIT.split(text) if tok]


def process(text, config=None):
    """Tokenise, drop stopwords, then stem (in that order)."""
    config = config or PipelineConfig()
    tokens = tokenize(text, config.lowercase)
    if config.stopwords:
        tokens = [t for t in tokens if t not in config.stopwords]
    if config.stem:
        tokens = [stem(t) for t in tokens]
    return [t for t in tokens if t]


def process_tokens(tokens, config=None):
    """Apply the same filtering and stemming to already-tokenised input."""
    return process(" ".join(tokens), config)
