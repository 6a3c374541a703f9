"""In-memory inverted index with the collection statistics used for QPP and ranking."""

import logging
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drqr.text import process

log = logging.getLogger(__name__)

MAGIC = b"DRQRIDX\x00"
FORMAT_VERSION = 1


class IndexFormatError(ValueError):
    """Raised when a persisted index cannot be read back faithfully."""


class DuplicateDocumentError(ValueError):
    def __init__(self, docno):
        super().__init__(f"duplicate docno: {docno!r}")
        self.docno = docno


@dataclass
class CollectionStats:
    num_docs: int = 0
    total_terms: int = 0
    doc_frequency: dict = field(default_factory=dict)
    collection_frequency: dict = field(default_factory=dict)

    @property
    def average_doc_length(self):
        return self.total_terms / self.num_docs if self.num_docs else 0.0

    def term(self, term):
        """(N_t, F_t) for a term; (0, 0) when unseen."""
        return self.doc_frequency.get(term, 0), self.collection_frequency.get(term, 0)


class InvertedIndex:
    """Postings are ``term -> (doc_ids, tfs)`` as int64 arrays sorted by doc id.

    Internal doc ids follow ingestion order; ``docnos[i]`` and ``doc_lengths[i]``
    form the document table.
    """

    def __init__(self, stats, postings, docnos, doc_lengths):
        self.stats = stats
        self.postings = postings
        self.docnos = list(docnos)
        self.doc_lengths = np.asarray(doc_lengths, dtype=np.int64)
        self._forward = None

    def __len__(self):
        return len(self.docnos)

    def term_statistics(self, term):
        return self.stats.term(term)

    def postings_for(self, term):
        empty = np.empty(0, dtype=np.int64)
        return self.postings.get(term, (empty, empty))

    def doc_terms(self, doc_id):
        """Term frequencies of one document, rebuilt from the postings on first use."""
        if self._forward is None:
            forward = [dict() for _ in self.docnos]
            for term, (ids, tfs) in self.postings.items():
                for d, tf in zip(ids.tolist(), tfs.tolist()):
                    forward[d][term] = tf
            self._forward = forward
        return self._forward[doc_id]

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        if self.stats != other.stats or self.docnos != other.docnos:
            return False
        if not np.array_equal(self.doc_lengths, other.doc_lengths):
            return False
        if self.postings.keys() != other.postings.keys():
            return False
        return all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in ((self.postings[t], other.postings[t]) for t in self.postings)
        )

    def save(self, path):
        Path(path).write_bytes(dumps(self))

    @classmethod
    def load(cls, path):
        return loads(Path(path).read_bytes())


def build_index(docs, config=None):
    """Index an iterable of ``(docno, raw_text)`` pairs.

    Raises DuplicateDocumentError on a repeated docno. An empty iterable gives
    a valid index with zero documents.
    """
    seen = set()
    docnos, lengths = [], []
    acc = {}
    for doc_id, (docno, text) in enumerate(docs):
        if docno in seen:
            raise DuplicateDocumentError(docno)
        seen.add(docno)
        terms = process(text, config)
        docnos.append(docno)
        lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            acc.setdefault(term, ([], []))
            acc[term][0].append(doc_id)
            acc[term][1].append(tf)
    return _from_lists(acc, docnos, lengths)


def _from_lists(acc, docnos, lengths):
    postings = {}
    stats = CollectionStats(num_docs=len(docnos), total_terms=int(sum(lengths)))
    for term in sorted(acc):
        ids = np.asarray(acc[term][0], dtype=np.int64)
        tfs = np.asarray(acc[term][1], dtype=np.int64)
        postings[term] = (ids, tfs)
        stats.doc_frequency[term] = len(ids)
        stats.collection_frequency[term] = int(tfs.sum())
    return InvertedIndex(stats, postings, docnos, lengths)


def read_corpus_tsv(path):
    """Parse ``docno<TAB>text`` lines.

    Returns ``(docs, skipped)`` where ``skipped`` lists the 1-based line
    numbers that did not split into two fields.
    """
    docs, skipped = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[0]:
                skipped.append(lineno)
                continue
            docs.append((parts[0], parts[1]))
    if skipped:
        log.warning("skipped %d malformed corpus lines: %s", len(skipped), skipped[:20])
    return docs, skipped


# -- persistence -------------------------------------------------------------


def _pack_str(buf, s):
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def dumps(index):
    buf = bytearray(MAGIC)
    buf += struct.pack("<IQQ", FORMAT_VERSION, index.stats.num_docs, index.stats.total_terms)
    for docno, length in zip(index.docnos, index.doc_lengths.tolist()):
        _pack_str(buf, docno)
        buf += struct.pack("<I", length)
    buf += struct.pack("<Q", len(index.postings))
    for term in sorted(index.postings):
        ids, tfs = index.postings[term]
        _pack_str(buf, term)
        buf += struct.pack("<I", len(ids))
        pairs = np.empty((len(ids), 2), dtype="<u4")
        pairs[:, 0] = ids
        pairs[:, 1] = tfs
        buf += pairs.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IndexFormatError("index file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError("corrupt string in index file") from exc


def loads(data):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise IndexFormatError("not a drqr index (bad magic)")
    version, num_docs, total_terms = r.unpack("<IQQ")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index version {version}, expected {FORMAT_VERSION}")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise IndexFormatError("index checksum mismatch (truncated or corrupt file)")
    docnos, lengths = [], []
    for _ in range(num_docs):
        docnos.append(r.string())
        lengths.append(r.unpack("<I")[0])
    (num_terms,) = r.unpack("<Q")
    acc = {}
    for _ in range(num_terms):
        term = r.string()
        (n,) = r.unpack("<I")
        pairs = np.frombuffer(r.take(8 * n), dtype="<u4").reshape(n, 2)
        acc[term] = (pairs[:, 0].tolist(), pairs[:, 1].tolist())
    r.take(4)
    if r.pos != len(data):
        raise IndexFormatError("trailing bytes after index payload")
    index = _from_lists(acc, docnos, lengths)
    if index.stats.total_terms != total_terms:
        raise IndexFormatError("term count does not match header")
    return index
