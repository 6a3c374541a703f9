"""Pre-retrieval query performance predictors.

All predictors are computed from collection statistics only. Natural log is
used throughout; a different base can be passed for comparison. Query terms
unseen in the collection are skipped and reported through
``QppScore.num_scored_terms``.
"""

import enum
import math
from dataclasses import dataclass


class EmptyCollectionError(ValueError):
    pass


class PredictorKind(str, enum.Enum):
    AVG_IDF = "AvgIDF"
    AVG_ICTF = "AvgICTF"
    SCS = "SCS"
    AVG_SCQ = "AvgSCQ"
    MAX_SCQ = "MaxSCQ"
    SUM_SCQ = "SumSCQ"
    QUERY_LENGTH = "QueryLength"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, name):
        for kind in cls:
            if kind.value.lower() == str(name).lower():
                return kind
        raise ValueError(f"unknown predictor {name!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class QppScore:
    kind: PredictorKind
    value: float
    num_scored_terms: int


def _log(x, base):
    return math.log(x) if base is None else math.log(x, base)


def term_idf(stats, term, base=None):
    """``log(N / N_t)``, or None when the term does not occur in the collection."""
    if stats.num_docs == 0:
        raise EmptyCollectionError("idf undefined on an empty collection")
    n_t = stats.doc_frequency.get(term, 0)
    if n_t == 0:
        return None
    return _log(stats.num_docs / n_t, base)


def term_ictf(stats, term, base=None):
    """``log(|D| / F_t)``, or None for unseen terms."""
    if stats.total_terms == 0:
        raise EmptyCollectionError("ictf undefined on a collection with no terms")
    f_t = stats.collection_frequency.get(term, 0)
    if f_t == 0:
        return None
    return _log(stats.total_terms / f_t, base)


def term_scq(stats, term, base=None):
    """``(1 + log F_t) * idf(t)``, or None for unseen terms."""
    idf = term_idf(stats, term, base)
    if idf is None:
        return None
    return (1.0 + _log(stats.collection_frequency[term], base)) * idf


def _scs(stats, query, base):
    if stats.total_terms == 0:
        raise EmptyCollectionError("SCS undefined on a collection with no terms")
    qlen = len(query)
    counts = {}
    for t in query:
        counts[t] = counts.get(t, 0) + 1
    parts = []
    scored = 0
    for t, tf in counts.items():
        f_t = stats.collection_frequency.get(t, 0)
        if f_t == 0:
            continue
        p_q = tf / qlen
        p_c = f_t / stats.total_terms
        parts.append(p_q * _log(p_q / p_c, base))
        scored += tf
    return math.fsum(parts), scored


_TERM_FN = {
    PredictorKind.AVG_IDF: term_idf,
    PredictorKind.AVG_ICTF: term_ictf,
    PredictorKind.AVG_SCQ: term_scq,
    PredictorKind.MAX_SCQ: term_scq,
    PredictorKind.SUM_SCQ: term_scq,
}


def predict(stats, query, kind, base=None):
    """Score a query (a list of terms) with one predictor.

    Averages, sums and maxima run over the query's scored tokens, repeats
    included. A query whose terms are all unseen scores 0.
    """
    kind = PredictorKind(kind)
    query = list(query)
    if kind is PredictorKind.QUERY_LENGTH:
        return QppScore(kind, float(len(query)), len(query))
    if not query:
        raise ValueError(f"{kind} needs a non-empty query")
    if kind is PredictorKind.SCS:
        value, scored = _scs(stats, query, base)
        return QppScore(kind, value, scored)

    fn = _TERM_FN[kind]
    scores = [s for s in (fn(stats, t, base) for t in query) if s is not None]
    if not scores:
        return QppScore(kind, 0.0, 0)
    if kind is PredictorKind.MAX_SCQ:
        value = max(scores)
    elif kind is PredictorKind.SUM_SCQ:
        value = math.fsum(scores)
    else:
        value = math.fsum(scores) / len(scores)
    return QppScore(kind, value, len(scores))


def predict_all(stats, query, base=None):
    """Every predictor for one query; kinds that cannot score it are omitted."""
    out = {}
    for kind in PredictorKind:
        try:
            out[kind] = predict(stats, query, kind, base)
        except ValueError:
            continue
    return out


@dataclass(frozen=True)
class Calibration:
    """Per-predictor (min, max) used to map raw values onto [0, 1]."""

    bounds: dict

    def __post_init__(self):
        for kind, (lo, hi) in self.bounds.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise ValueError(f"degenerate calibration for {kind}: min={lo}, max={hi}")

    @classmethod
    def from_queries(cls, stats, queries, kinds=tuple(PredictorKind)):
        """Min/max of each predictor over a reference query set (empty queries skipped)."""
        bounds = {}
        for kind in kinds:
            kind = PredictorKind(kind)
            values = [predict(stats, q, kind).value for q in queries if q]
            if not values:
                raise ValueError("calibration needs at least one non-empty query")
            bounds[kind] = (min(values), max(values))
        return cls(bounds)

    def to_json(self):
        return {str(k): list(v) for k, v in self.bounds.items()}

    @classmethod
    def from_json(cls, data):
        return cls({PredictorKind.parse(k): (float(v[0]), float(v[1])) for k, v in data.items()})


def normalize_score(score, calibration):
    """Min-max scale a score against its calibrated range, clamped to [0, 1]."""
    lo, hi = calibration.bounds[score.kind]
    return min(1.0, max(0.0, (score.value - lo) / (hi - lo)))
