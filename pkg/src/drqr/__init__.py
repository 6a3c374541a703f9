"""Query reformulation with a copy-attention seq2seq model trained by
self-critical policy gradient, plus the retrieval, query performance
prediction and evaluation machinery around it."""

__version__ = "0.1.0"
