"""Mine paraphrase pairs from queries that share a relevant document."""

import logging
import random
from dataclasses import dataclass
from itertools import permutations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QueryPair:
    source_qid: str
    target_qid: str
    source_text: str
    target_text: str

    def __post_init__(self):
        if self.source_qid == self.target_qid:
            raise ValueError(f"pair source and target are the same query {self.source_qid!r}")


def read_qrels(path):
    """TREC qrels ``qid iter docno grade`` -> ``{(qid, docno): grade}``."""
    qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, docno, grade = parts
            key = (qid, docno)
            if key in qrels:
                raise ValueError(f"{path}:{lineno}: duplicate judgement for {key}")
            qrels[key] = int(grade)
    return qrels


def qrels_by_query(qrels):
    out = {}
    for (qid, docno), grade in qrels.items():
        out.setdefault(qid, {})[docno] = grade
    return out


def read_queries(path):
    """``qid<TAB>text`` lines -> ``{qid: text}``."""
    queries = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            qid, _, text = line.partition("\t")
            queries[qid] = text
    return queries


def shared_document_groups(qrels, min_grade=1):
    """``{docno: sorted qids}`` for judgements with grade >= min_grade."""
    groups = {}
    for (qid, docno), grade in qrels.items():
        if grade >= min_grade:
            groups.setdefault(docno, set()).add(qid)
    return {d: sorted(q) for d, q in groups.items()}


def mine_pairs(qrels, queries, min_grade=1):
    """All ordered pairs of distinct queries sharing a relevant document.

    Pairs are de-duplicated across documents and returned sorted by
    (source qid, target qid). Qids without query text are logged and skipped.
    """
    keys = set()
    missing = set()
    for qids in shared_document_groups(qrels, min_grade).values():
        present = [q for q in qids if q in queries]
        missing.update(q for q in qids if q not in queries)
        keys.update(permutations(present, 2))
    if missing:
        log.warning("%d qids in qrels have no query text; skipped", len(missing))
    return [QueryPair(s, t, queries[s], queries[t]) for s, t in sorted(keys)]


def count_unordered(pairs):
    return len({frozenset((p.source_qid, p.target_qid)) for p in pairs})


def split_pairs(pairs, train_fraction=0.9, seed=0):
    """Seeded shuffle split into (train, validation)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot split an empty pair list")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n_train = round(train_fraction * len(pairs))
    return [pairs[i] for i in order[:n_train]], [pairs[i] for i in order[n_train:]]


def write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.source_qid}\t{p.target_qid}\t{p.source_text}\t{p.target_text}\n")


def read_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            pairs.append(QueryPair(*parts))
    return pairs
