import math
import random

import pytest

from drqr.ranking import (
    BM25,
    DPH,
    RankedList,
    WeightedQuery,
    bo1_expand,
    bo1_weight,
    format_run,
    get_model,
    mix_queries,
    read_run,
    retrieve,
    score_document,
    write_run,
)

from conftest import random_corpus, raw_index


def dph_reference(tf, dl, avgdl, N, F):
    # Terrier's DPH, written out term by term
    f = tf / dl
    norm = (1 - f) * (1 - f) / (tf + 1)
    return norm * (tf * math.log2((tf * avgdl / dl) * (N / F)) + 0.5 * math.log2(2 * math.pi * tf * (1 - f)))


def bm25_reference(tf, dl, avgdl, N, n, k1=1.2, b=0.75):
    idf = max(0.0, math.log((N - n + 0.5) / (n + 0.5)))
    return idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))


@pytest.fixture
def corpus():
    rng = random.Random(21)
    docs, vocab = random_corpus(rng, max_docs=40, max_vocab=30)
    return docs, vocab, raw_index(docs)


class TestModels:
    def test_dph_matches_reference(self, corpus):
        docs, vocab, index = corpus
        s = index.stats
        for doc_id, (_, text) in enumerate(docs):
            toks = text.split()
            for term in set(toks):
                tf = toks.count(term)
                got = float(DPH().term_scores(tf, len(toks), *s.term(term), s))
                if tf == len(toks):
                    assert got == 0.0
                else:
                    ref = dph_reference(tf, len(toks), s.average_doc_length, s.num_docs, s.collection_frequency[term])
                    assert got == pytest.approx(ref, rel=1e-12)

    def test_bm25_matches_reference(self, corpus):
        docs, vocab, index = corpus
        s = index.stats
        toks = docs[0][1].split()
        for term in set(toks):
            got = float(BM25().term_scores(toks.count(term), len(toks), *s.term(term), s))
            ref = bm25_reference(toks.count(term), len(toks), s.average_doc_length, s.num_docs, s.doc_frequency[term])
            assert got == pytest.approx(ref, rel=1e-12, abs=1e-15)

    def test_get_model(self):
        assert isinstance(get_model("DPH"), DPH)
        with pytest.raises(ValueError):
            get_model("tfidf")


class TestRetrieve:
    @pytest.mark.parametrize("name", ["dph", "bm25"])
    def test_matches_document_at_a_time(self, corpus, name):
        docs, vocab, index = corpus
        model = get_model(name)
        rng = random.Random(2)
        for i in range(20):
            q = WeightedQuery(str(i), [(rng.choice(vocab), rng.uniform(0.1, 2)) for _ in range(3)])
            ranking = retrieve(model, index, q)
            for docno, score in ranking.entries:
                daat = score_document(model, index, q, index.docnos.index(docno))
                assert score == pytest.approx(daat, rel=1e-12, abs=1e-12)
            scores = [s for _, s in ranking.entries]
            assert scores == sorted(scores, reverse=True)

    def test_ties_by_docno(self):
        index = raw_index([("b", "x y"), ("a", "x y"), ("c", "z")])
        ranking = retrieve(BM25(), index, WeightedQuery.from_terms("q", ["x"]), k=10)
        assert ranking.docnos() == ["a", "b"]

    def test_k_cutoff(self, corpus):
        _, vocab, index = corpus
        q = WeightedQuery.from_terms("q", vocab[:10])
        assert len(retrieve(DPH(), index, q, k=3)) == 3
        with pytest.raises(ValueError):
            retrieve(DPH(), index, q, k=0)

    def test_unknown_terms(self, corpus):
        _, _, index = corpus
        assert retrieve(DPH(), index, WeightedQuery.from_terms("q", ["zzz"])).entries == []


class TestQueries:
    def test_canonical_merges(self):
        q = WeightedQuery("q", [("a", 1.0), ("b", 0.0), ("a", 0.5)]).canonical()
        assert q.terms == [("a", 1.5)]

    def test_invalid_weight(self):
        with pytest.raises(ValueError):
            WeightedQuery("q", [("a", -1.0)])
        with pytest.raises(ValueError):
            WeightedQuery("q", [("a", float("nan"))])

    def test_mix(self):
        q0 = WeightedQuery.from_terms("1", ["a", "b"])
        qr = WeightedQuery.from_terms("1", ["b", "c"])
        assert mix_queries(q0, qr, 0.5).as_dict() == {"a": 1.0, "b": 1.5, "c": 0.5}
        assert mix_queries(q0, qr, 0.0) == q0.canonical()

    def test_mix_errors(self):
        q0 = WeightedQuery.from_terms("1", ["a"])
        with pytest.raises(ValueError):
            mix_queries(q0, WeightedQuery.from_terms("2", ["a"]), 1.0)
        with pytest.raises(ValueError):
            mix_queries(q0, q0, -0.1)


class TestBo1:
    def test_weight(self):
        p = 4 / 10
        assert bo1_weight(3, 4, 10) == pytest.approx(3 * math.log2((1 + p) / p) + math.log2(1 + p))

    def test_expand(self):
        docs = [("d1", "apple banana apple"), ("d2", "apple cherry"), ("d3", "kiwi"), ("d4", "banana kiwi kiwi")]
        index = raw_index(docs)
        q = WeightedQuery.from_terms("q", ["apple"])
        initial = retrieve(DPH(), index, q)
        expanded = bo1_expand(index, q, initial, num_docs=2, num_terms=2)
        weights = expanded.as_dict()
        assert len(weights) <= 3
        assert max(w for t, w in weights.items() if t != "apple") <= 1.0
        assert weights["apple"] >= 1.0

    def test_empty_initial(self):
        index = raw_index([("d", "x")])
        with pytest.raises(ValueError):
            bo1_expand(index, WeightedQuery.from_terms("q", ["x"]), RankedList("q"))


class TestRunFiles:
    def test_round_trip(self, tmp_path):
        runs = [RankedList("1", [("d2", 3.5), ("d1", 1.25)], "t"), RankedList("2", [("d9", 0.1)], "t")]
        path = tmp_path / "run.txt"
        write_run(path, runs)
        back = read_run(path)
        assert back["1"].entries == runs[0].entries and back["2"].tag == "t"
        assert format_run(runs).splitlines()[0] == "1 Q0 d2 1 3.500000 t"

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 Q0 d1 1 0.5\n")
        with pytest.raises(ValueError, match="6 fields"):
            read_run(path)
