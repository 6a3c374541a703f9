"""DPH and BM25 ranking, Bo1 pseudo-relevance feedback and query mixing."""

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


@dataclass
class WeightedQuery:
    qid: str
    terms: list = field(default_factory=list)  # [(term, weight)]

    def __post_init__(self):
        for term, weight in self.terms:
            if not math.isfinite(weight) or weight < 0:
                raise ValueError(f"invalid weight {weight!r} for term {term!r}")

    @classmethod
    def from_terms(cls, qid, terms, weight=1.0):
        return cls(qid, [(t, weight) for t in terms]).canonical()

    def canonical(self):
        """Merge duplicate terms by summing weights; drop zero-weight terms.

        First-occurrence order is kept.
        """
        merged = {}
        for term, weight in self.terms:
            merged[term] = merged.get(term, 0.0) + float(weight)
        return WeightedQuery(self.qid, [(t, w) for t, w in merged.items() if w > 0])

    def as_dict(self):
        return dict(self.canonical().terms)

    def __len__(self):
        return len(self.terms)


@dataclass
class RankedList:
    qid: str
    entries: list = field(default_factory=list)  # [(docno, score)]
    tag: str = "drqr"

    def docnos(self):
        return [d for d, _ in self.entries]

    def __len__(self):
        return len(self.entries)


class Reranker(Protocol):
    def __call__(self, query: WeightedQuery, ranking: RankedList) -> RankedList: ...


def identity_reranker(query, ranking):
    return ranking


# -- weighting models ---------------------------------------------------------


class DPH:
    """Parameter-free hypergeometric DFR model."""

    name = "dph"

    def term_scores(self, tf, doc_len, n_t, f_t, stats):
        tf = np.asarray(tf, dtype=np.float64)
        doc_len = np.asarray(doc_len, dtype=np.float64)
        f = tf / doc_len
        norm = (1.0 - f) ** 2 / (tf + 1.0)
        arg1 = (tf * stats.average_doc_length / doc_len) * (stats.num_docs / f_t)
        arg2 = 2.0 * math.pi * tf * (1.0 - f)
        ok = (arg1 > 0) & (arg2 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = norm * (tf * np.log2(arg1) + 0.5 * np.log2(arg2))
        return np.where(ok, score, 0.0)


class BM25:
    name = "bm25"

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def idf(self, n_t, stats):
        return max(0.0, math.log((stats.num_docs - n_t + 0.5) / (n_t + 0.5)))

    def term_scores(self, tf, doc_len, n_t, f_t, stats):
        tf = np.asarray(tf, dtype=np.float64)
        doc_len = np.asarray(doc_len, dtype=np.float64)
        avgdl = stats.average_doc_length
        denom = tf + self.k1 * (1.0 - self.b + self.b * doc_len / avgdl)
        return self.idf(n_t, stats) * tf * (self.k1 + 1.0) / denom


MODELS = {"dph": DPH, "bm25": BM25}


def get_model(name):
    try:
        return MODELS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown ranking model {name!r}; choose dph or bm25") from None


def score_document(model, index, query, doc_id):
    """Score one document: sum over matching query terms of weight * term score."""
    doc_len = index.doc_lengths[doc_id]
    if doc_len <= 0:
        return 0.0
    terms = index.doc_terms(doc_id)
    total = 0.0
    for term, weight in query.canonical().terms:
        tf = terms.get(term, 0)
        if tf == 0:
            continue
        n_t, f_t = index.stats.term(term)
        total += weight * float(model.term_scores(tf, doc_len, n_t, f_t, index.stats))
    return total


def retrieve(model, index, query, k=1000, tag=None):
    """Top-k documents containing at least one positively weighted query term.

    Ties are broken by docno ascending.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = query.canonical()
    tag = tag or model.name
    scores = np.zeros(len(index), dtype=np.float64)
    hit = np.zeros(len(index), dtype=bool)
    for term, weight in query.terms:
        ids, tfs = index.postings_for(term)
        if len(ids) == 0:
            continue
        n_t, f_t = index.stats.term(term)
        contrib = model.term_scores(tfs, index.doc_lengths[ids], n_t, f_t, index.stats)
        scores[ids] += weight * contrib
        hit[ids] = True
    cand = np.flatnonzero(hit)
    order = sorted(cand.tolist(), key=lambda d: (-scores[d], index.docnos[d]))[:k]
    return RankedList(query.qid, [(index.docnos[d], float(scores[d])) for d in order], tag)


def rerank(query, ranking, reranker=None):
    return (reranker or identity_reranker)(query, ranking)


# -- query expansion and mixing ----------------------------------------------


def bo1_weight(tf_x, f_t, num_docs):
    p_n = f_t / num_docs
    return tf_x * math.log2((1.0 + p_n) / p_n) + math.log2(1.0 + p_n)


def bo1_expand(index, query, initial, num_docs=3, num_terms=10):
    """Expand a query with the top Bo1-weighted terms of the feedback documents.

    Expansion weights are divided by the largest one; re-selected original terms
    keep their weight plus that normalised weight.
    """
    if not initial.entries:
        raise ValueError("Bo1 expansion needs a non-empty initial ranking")
    lookup = {d: i for i, d in enumerate(index.docnos)}
    tf_x = {}
    for docno, _ in initial.entries[:num_docs]:
        for term, tf in index.doc_terms(lookup[docno]).items():
            tf_x[term] = tf_x.get(term, 0) + tf
    n = index.stats.num_docs
    weights = {t: bo1_weight(c, index.stats.collection_frequency[t], n) for t, c in tf_x.items()}
    top = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))[:num_terms]
    top = [(t, w) for t, w in top if w > 0]
    if not top:
        return query.canonical()
    max_w = top[0][1]
    merged = query.as_dict()
    for term, w in top:
        merged[term] = merged.get(term, 0.0) + w / max_w
    return WeightedQuery(query.qid, list(merged.items()))


def mix_queries(q0, qr, theta):
    """``q' = q0 + theta * qr``; terms shared by both accumulate weight."""
    if theta < 0 or not math.isfinite(theta):
        raise ValueError(f"theta must be a finite non-negative number, got {theta}")
    if q0.qid != qr.qid:
        raise ValueError(f"qid mismatch: {q0.qid!r} vs {qr.qid!r}")
    terms = list(q0.canonical().terms)
    terms += [(t, theta * w) for t, w in qr.canonical().terms]
    return WeightedQuery(q0.qid, terms).canonical()


# -- TREC run files ------------------------------------------------------------


def format_run(rankings):
    lines = []
    for ranking in rankings:
        for rank, (docno, score) in enumerate(ranking.entries, 1):
            lines.append(f"{ranking.qid} Q0 {docno} {rank} {score:.6f} {ranking.tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run(path, rankings):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run(rankings))


def read_run(path):
    """Parse a TREC run file into ``{qid: RankedList}``, re-sorted by rank."""
    rows = {}
    tags = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, docno, rank, score, tag = parts
            rows.setdefault(qid, []).append((int(rank), docno, float(score)))
            tags[qid] = tag
    return {
        qid: RankedList(qid, [(d, s) for _, d, s in sorted(r, key=lambda x: (x[0], -x[2]))], tags[qid])
        for qid, r in rows.items()
    }
