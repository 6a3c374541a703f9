import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from drqr.evaluation import (
    average_precision,
    average_ranks,
    correlate_predictors,
    delta_histogram,
    evaluate_run,
    fisher_z_compare,
    format_correlation_table,
    kendall_tau_b,
    ndcg_at_k,
    paired_t_test,
    parse_metric,
    permutation_significance,
    rank_correlation,
    spearman,
)
from drqr.ranking import RankedList

from oracles import brute_average_precision

values = st.lists(st.integers(0, 5), min_size=3, max_size=25)


class TestEffectiveness:
    def test_ap_example(self):
        assert average_precision(["a", "x", "b"], {"a": 1, "b": 1}) == pytest.approx(5 / 6, abs=1e-12)

    def test_ap_unretrieved_relevant(self):
        assert average_precision(["a"], {"a": 1, "b": 2, "c": 0}) == 0.5

    def test_ap_matches_brute_force(self):
        rng = random.Random(0)
        for _ in range(200):
            docs = [f"d{i}" for i in range(30)]
            rng.shuffle(docs)
            judged = {d: rng.choice([0, 0, 1, 2]) for d in rng.sample(docs, 15)}
            relevant = {d for d, g in judged.items() if g > 0}
            assert average_precision(docs[:20], judged) == pytest.approx(brute_average_precision(docs[:20], relevant))

    def test_ndcg_example(self):
        assert ndcg_at_k(["a", "b", "c"], {"a": 3, "b": 0, "c": 1}) == pytest.approx(0.98285, abs=1e-4)

    def test_ndcg_perfect_and_empty(self):
        j = {"a": 2, "b": 1}
        assert ndcg_at_k(["a", "b", "z"], j) == 1.0
        assert ndcg_at_k(["a"], {"a": 0}) == 0.0

    def test_parse_metric(self):
        assert parse_metric("NDCG@5")[0] == "ndcg@5"
        with pytest.raises(ValueError):
            parse_metric("p@10")

    def test_evaluate_run(self):
        runs = {"1": RankedList("1", [("a", 2.0), ("b", 1.0)])}
        qrels = {"1": {"b": 1}, "2": {"a": 1}, "3": {"a": 0}}
        result = evaluate_run(runs, qrels, ["map"])
        assert result.per_query["map"] == {"1": 0.5, "2": 0.0}
        assert result.unjudged == ["3"]
        assert result.means["map"] == 0.25
        assert "all\tmap\t0.250000" in result.to_tsv()


class TestCorrelation:
    def test_examples(self):
        assert kendall_tau_b([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-12)
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_average_ranks(self):
        assert average_ranks([10, 20, 10, 30]).tolist() == [1.5, 3.0, 1.5, 4.0]

    @settings(max_examples=80)
    @given(values, st.randoms(use_true_random=False))
    def test_against_scipy(self, xs, rnd):
        ys = [rnd.randint(0, 5) for _ in xs]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            with pytest.raises(ValueError):
                spearman(xs, ys)
            return
        assert spearman(xs, ys) == pytest.approx(sps.spearmanr(xs, ys).statistic, abs=1e-12)
        assert kendall_tau_b(xs, ys) == pytest.approx(sps.kendalltau(xs, ys).statistic, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            kendall_tau_b([1], [1])
        with pytest.raises(ValueError):
            rank_correlation([1, 2], [2, 1], "pearson")


class TestSignificance:
    def test_exact_permutation(self):
        # n = 4, perfect agreement: only the identity and its reverse reach |rho| = 1
        assert permutation_significance([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(2 / 24)

    def test_sampled_close_to_exact(self):
        rng = np.random.default_rng(1)
        xs, ys = rng.normal(size=8), rng.normal(size=8)
        exact = permutation_significance(xs, ys, "kendall")
        sampled = permutation_significance(xs, ys, "kendall", num_permutations=4000, exact_max_n=0)
        assert abs(sampled - exact) < 4 * math.sqrt(exact * (1 - exact) / 4000) + 1e-3

    def test_seeded(self):
        xs, ys = list(range(12)), [3, 1, 2, 5, 4, 7, 6, 9, 8, 11, 10, 0]
        a = permutation_significance(xs, ys, num_permutations=500, seed=4)
        assert a == permutation_significance(xs, ys, num_permutations=500, seed=4)

    def test_fisher_z(self):
        assert fisher_z_compare(0.9, 43, 0.0, 43) < 1e-9
        assert fisher_z_compare(0.5, 43, 0.5, 43) == 1.0
        with pytest.raises(ValueError):
            fisher_z_compare(1.0, 43, 0.0, 43)

    def test_paired_t(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=20), rng.normal(size=20)
        ours = paired_t_test(a, b)
        ref = sps.ttest_rel(a, b)
        assert ours.statistic == pytest.approx(ref.statistic) and ours.p_value == pytest.approx(ref.pvalue)
        assert paired_t_test([1, 2], [1, 2]).flag == "zero-difference"
        assert paired_t_test([1, 2], [0, 1]).flag == "zero-variance"

    def test_histogram(self):
        base = {"a": 0.5, "b": 0.5, "c": 0.5}
        treat = {"a": 0.6, "b": 0.4, "c": 0.5 + 1e-9}
        assert delta_histogram(base, treat) == (1, 1, 1)
        with pytest.raises(ValueError):
            delta_histogram(base, {"a": 0.1})


class TestTable:
    def test_layout(self):
        rng = np.random.default_rng(2)
        qids = [str(i) for i in range(30)]
        eff = {"map": {q: float(v) for q, v in zip(qids, rng.uniform(size=30))}}
        eff["ndcg@10"] = {q: v + rng.normal(scale=0.01) for q, v in eff["map"].items()}
        good = {q: v + rng.normal(scale=0.05) for q, v in eff["map"].items()}
        noise = {q: float(v) for q, v in zip(qids, rng.uniform(size=30))}
        flat = {q: 1.0 for q in qids}
        reports = correlate_predictors({"good": good, "noise": noise, "flat": flat}, eff, num_permutations=200)
        by = {(r.predictor, r.metric): r for r in reports}
        assert by[("good", "map")].spearman_rho > 0.9
        assert by[("noise", "map")].worse_than_best_spearman
        assert math.isnan(by[("flat", "map")].kendall_tau)
        table = format_correlation_table(reports).splitlines()
        assert table[0].split("\t") == ["predictor", "map:rho", "ndcg@10:rho", "map:tau", "ndcg@10:tau"]
        assert table[1].split("\t")[1].endswith("*")
        assert table[2].split("\t")[1].endswith("<")
        assert table[3].split("\t")[1:] == ["nan"] * 4
