import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drqr.index import CollectionStats, build_index
from drqr.qpp import (
    Calibration,
    EmptyCollectionError,
    PredictorKind,
    QppScore,
    normalize_score,
    predict,
    predict_all,
    term_idf,
    term_scq,
)
from drqr.text import PipelineConfig

from conftest import random_corpus, raw_index
from oracles import recount_predictors


@pytest.fixture
def stats():
    docs = [("a", "x y z x"), ("b", "x w"), ("c", "y y v")]
    return build_index(docs, PipelineConfig.raw()).stats


class TestTermStatistics:
    def test_idf(self, stats):
        assert term_idf(stats, "x") == pytest.approx(math.log(3 / 2))
        assert term_idf(stats, "missing") is None

    def test_scq(self, stats):
        # F_y = 3, N_y = 2
        assert term_scq(stats, "y") == pytest.approx((1 + math.log(3)) * math.log(1.5))

    def test_empty_collection(self):
        with pytest.raises(EmptyCollectionError):
            term_idf(CollectionStats(), "x")


class TestPredict:
    def test_against_recount(self):
        rng = random.Random(5)
        for _ in range(30):
            docs, vocab = random_corpus(rng)
            index = raw_index(docs)
            tokens = [t.split() for _, t in docs]
            query = [rng.choice(vocab) for _ in range(rng.randint(1, 6))]
            expected = recount_predictors(tokens, query)
            for kind, score in predict_all(index.stats, query).items():
                assert score.value == pytest.approx(expected[str(kind)], rel=1e-9, abs=1e-12)

    def test_unseen_terms_skipped(self, stats):
        score = predict(stats, ["x", "nope"], PredictorKind.AVG_IDF)
        assert score.num_scored_terms == 1
        assert score.value == pytest.approx(math.log(1.5))

    def test_all_unseen_scores_zero(self, stats):
        for kind in PredictorKind:
            if kind is not PredictorKind.QUERY_LENGTH:
                assert predict(stats, ["nope"], kind) == QppScore(kind, 0.0, 0)

    def test_empty_query(self, stats):
        assert predict(stats, [], PredictorKind.QUERY_LENGTH).value == 0.0
        with pytest.raises(ValueError):
            predict(stats, [], PredictorKind.SCS)
        assert PredictorKind.SCS not in predict_all(stats, [])

    def test_scs_nonnegative_for_single_term(self, stats):
        assert predict(stats, ["v"], PredictorKind.SCS).value > 0

    def test_parse(self):
        assert PredictorKind.parse("avgscq") is PredictorKind.AVG_SCQ
        with pytest.raises(ValueError, match="unknown predictor"):
            PredictorKind.parse("clarity")

    @settings(max_examples=60)
    @given(st.lists(st.sampled_from(list("xyzwvq")), min_size=1, max_size=8), st.randoms(use_true_random=False))
    def test_order_invariant(self, query, rnd):
        docs = [("a", "x y z x"), ("b", "x w"), ("c", "y y v")]
        s = build_index(docs, PipelineConfig.raw()).stats
        shuffled = list(query)
        rnd.shuffle(shuffled)
        for kind in PredictorKind:
            assert predict(s, query, kind).value == predict(s, shuffled, kind).value


class TestCalibration:
    def test_from_queries_and_normalize(self, stats):
        queries = [["x"], ["v"], ["x", "y"]]
        cal = Calibration.from_queries(stats, queries, [PredictorKind.AVG_IDF])
        lo, hi = cal.bounds[PredictorKind.AVG_IDF]
        assert lo == pytest.approx(math.log(1.5)) and hi == pytest.approx(math.log(3))
        assert normalize_score(predict(stats, ["v"], "AvgIDF"), cal) == 1.0
        assert normalize_score(QppScore(PredictorKind.AVG_IDF, 100.0, 1), cal) == 1.0
        assert normalize_score(QppScore(PredictorKind.AVG_IDF, -1.0, 1), cal) == 0.0

    def test_degenerate_rejected(self, stats):
        with pytest.raises(ValueError, match="degenerate"):
            Calibration.from_queries(stats, [["x"], ["x"]], [PredictorKind.AVG_IDF])

    def test_json_round_trip(self, stats):
        cal = Calibration.from_queries(stats, [["x"], ["v", "y"], ["z"]])
        assert Calibration.from_json(cal.to_json()) == cal
