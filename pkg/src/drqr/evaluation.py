"""Effectiveness metrics, rank correlation and significance tests."""

import math
from dataclasses import asdict, dataclass
from itertools import permutations

import numpy as np
from scipy import stats as sps


# -- effectiveness -------------------------------------------------------------------


def average_precision(ranking, judgements, cutoff=1000):
    """AP of one ranked list against ``{docno: grade}``; grade >= 1 is relevant.

    Returns 0 when the query has no relevant documents.
    """
    relevant = {d for d, g in judgements.items() if g > 0}
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for k, docno in enumerate(_docnos(ranking)[:cutoff], 1):
        if docno in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def ndcg_at_k(ranking, judgements, k=10):
    """NDCG@k with gain ``2^grade - 1`` and discount ``1/log2(rank + 1)``."""
    ideal = sorted((g for g in judgements.values() if g > 0), reverse=True)[:k]
    idcg = sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(ideal))
    if idcg == 0:
        return 0.0
    dcg = sum(
        (2 ** judgements.get(d, 0) - 1) / math.log2(i + 2)
        for i, d in enumerate(_docnos(ranking)[:k])
        if judgements.get(d, 0) > 0
    )
    return dcg / idcg


def _docnos(ranking):
    return ranking.docnos() if hasattr(ranking, "docnos") else list(ranking)


METRICS = {
    "map": lambda r, j: average_precision(r, j),
    "ndcg@10": lambda r, j: ndcg_at_k(r, j, 10),
}


def parse_metric(name):
    name = name.strip().lower()
    if name in METRICS:
        return name, METRICS[name]
    if name.startswith("ndcg@"):
        k = int(name[5:])
        return name, lambda r, j: ndcg_at_k(r, j, k)
    raise ValueError(f"unknown metric {name!r}")


@dataclass
class RunEvaluation:
    per_query: dict  # metric -> {qid: value}
    means: dict  # metric -> mean over judged queries
    unjudged: list  # qids in the run with no relevant document (scored 0)

    def to_tsv(self):
        lines = []
        for metric, values in self.per_query.items():
            for qid in sorted(values):
                lines.append(f"{qid}\t{metric}\t{values[qid]:.6f}")
            lines.append(f"all\t{metric}\t{self.means[metric]:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_run(rankings, qrels_by_qid, metrics=("map", "ndcg@10")):
    """Score every judged query; queries judged but absent from the run score 0."""
    per_query = {}
    unjudged = sorted(q for q, j in qrels_by_qid.items() if not any(g > 0 for g in j.values()))
    qids = sorted(q for q in qrels_by_qid if q not in unjudged)
    for name in metrics:
        name, fn = parse_metric(name)
        per_query[name] = {
            q: fn(rankings[q], qrels_by_qid[q]) if q in rankings else 0.0 for q in qids
        }
    means = {m: (sum(v.values()) / len(v) if v else 0.0) for m, v in per_query.items()}
    return RunEvaluation(per_query, means, unjudged)


# -- rank correlation ---------------------------------------------------------------------


def _check_pair(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("correlation inputs must be equal-length sequences")
    if len(xs) < 2:
        raise ValueError("correlation needs at least two observations")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("correlation undefined for a constant input")
    return xs, ys


def average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def _sign_matrix(v):
    return np.sign(v[:, None] - v[None, :])


def _tau_b_from_signs(sx, sy):
    n = sx.shape[0]
    iu = np.triu_indices(n, 1)
    a, b = sx[iu], sy[iu]
    denom = math.sqrt(np.count_nonzero(a) * np.count_nonzero(b))
    return float(np.dot(a, b) / denom)


def spearman(xs, ys):
    xs, ys = _check_pair(xs, ys)
    return _pearson(average_ranks(xs), average_ranks(ys))


def kendall_tau_b(xs, ys):
    xs, ys = _check_pair(xs, ys)
    return _tau_b_from_signs(_sign_matrix(xs), _sign_matrix(ys))


def rank_correlation(xs, ys, kind="spearman"):
    if kind == "spearman":
        return spearman(xs, ys)
    if kind == "kendall":
        return kendall_tau_b(xs, ys)
    raise ValueError(f"unknown correlation {kind!r}")


class _PermutationStat:
    """Correlation of xs with a permuted ys, with per-call setup hoisted."""

    def __init__(self, xs, ys, kind):
        self.kind = kind
        if kind == "spearman":
            rx = average_ranks(xs)
            self.rx = rx - rx.mean()
            self.ry = average_ranks(ys)
            self.ry_c = self.ry - self.ry.mean()
            self.denom = math.sqrt(np.dot(self.rx, self.rx) * np.dot(self.ry_c, self.ry_c))
        elif kind == "kendall":
            n = len(xs)
            self.iu = np.triu_indices(n, 1)
            self.sx = _sign_matrix(xs)[self.iu]
            self.ys = ys
            self.denom = math.sqrt(np.count_nonzero(self.sx) * np.count_nonzero(_sign_matrix(ys)[self.iu]))
        else:
            raise ValueError(f"unknown correlation {kind!r}")

    def __call__(self, perm):
        if self.kind == "spearman":
            return float(np.dot(self.rx, self.ry_c[perm]) / self.denom)
        yp = self.ys[perm]
        sy = np.sign(yp[:, None] - yp[None, :])[self.iu]
        return float(np.dot(self.sx, sy) / self.denom)


_TOL = 1e-12


def permutation_significance(xs, ys, kind="spearman", num_permutations=10_000, seed=0, exact_max_n=8):
    """Two-sided permutation p-value for a rank correlation.

    For ``n <= exact_max_n`` all n! permutations are enumerated and the exact
    p-value returned; otherwise ``(1 + #{|r_perm| >= |r_obs|}) / (1 + B)``.
    """
    xs, ys = _check_pair(xs, ys)
    stat = _PermutationStat(xs, ys, kind)
    observed = abs(rank_correlation(xs, ys, kind))
    n = len(xs)
    if n <= exact_max_n:
        hits = total = 0
        for perm in permutations(range(n)):
            total += 1
            if abs(stat(np.array(perm))) >= observed - _TOL:
                hits += 1
        return hits / total
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(num_permutations):
        if abs(stat(rng.permutation(n))) >= observed - _TOL:
            hits += 1
    return (1 + hits) / (1 + num_permutations)


def fisher_z_compare(r1, n1, r2, n2):
    """Two-sided p-value that two correlations from independent samples differ."""
    if abs(r1) >= 1 or abs(r2) >= 1:
        raise ValueError("Fisher z-transform needs |r| < 1")
    if n1 < 4 or n2 < 4:
        raise ValueError("Fisher z comparison needs n >= 4 in both samples")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return math.erfc(abs(z) / math.sqrt(2.0))


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    flag: str = ""  # "zero-difference" or "zero-variance" for degenerate inputs


def paired_t_test(a, b):
    """Two-sided paired t-test on per-query differences (n - 1 dof)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or len(a) < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    if np.all(d == 0):
        return TTestResult(0.0, 1.0, "zero-difference")
    n = len(d)
    sd = float(np.std(d, ddof=1))
    mean = float(d.mean())
    if sd == 0:
        return TTestResult(math.copysign(math.inf, mean), 0.0, "zero-variance")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, float(2 * sps.t.sf(abs(t), n - 1)))


def delta_histogram(baseline, treatment, epsilon=1e-6):
    """Counts of (improved, degraded, unchanged) queries between two per-query metric maps."""
    if set(baseline) != set(treatment):
        raise ValueError("baseline and treatment cover different queries")
    improved = degraded = unchanged = 0
    for qid in baseline:
        delta = treatment[qid] - baseline[qid]
        if abs(delta) <= epsilon:
            unchanged += 1
        elif delta > 0:
            improved += 1
        else:
            degraded += 1
    return improved, degraded, unchanged


# -- QPP correlation tables -----------------------------------------------------------------


@dataclass
class CorrelationReport:
    predictor: str
    metric: str
    spearman_rho: float
    kendall_tau: float
    p_value_spearman: float
    p_value_kendall: float
    n: int
    worse_than_best_spearman: bool = False
    worse_than_best_kendall: bool = False

    def as_dict(self):
        return asdict(self)


def correlate_predictors(predictions, effectiveness, num_permutations=10_000, seed=0, alpha=0.05):
    """Correlate predictor values with per-query effectiveness.

    ``predictions``: ``{predictor: {qid: value}}``; ``effectiveness``:
    ``{metric: {qid: value}}``. Predictors whose values are constant over the
    queries get NaN correlations. A report is marked worse-than-best when a
    Fisher-z test against the strongest predictor in its column gives p < alpha.
    """
    reports = []
    for metric, eff in effectiveness.items():
        column = []
        for pred, values in predictions.items():
            qids = sorted(set(values) & set(eff))
            xs = [values[q] for q in qids]
            ys = [eff[q] for q in qids]
            try:
                rho = spearman(xs, ys)
                tau = kendall_tau_b(xs, ys)
                p_rho = permutation_significance(xs, ys, "spearman", num_permutations, seed)
                p_tau = permutation_significance(xs, ys, "kendall", num_permutations, seed)
            except ValueError:
                rho = tau = p_rho = p_tau = math.nan
            column.append(CorrelationReport(str(pred), metric, rho, tau, p_rho, p_tau, len(qids)))
        for attr, flag in (("spearman_rho", "worse_than_best_spearman"), ("kendall_tau", "worse_than_best_kendall")):
            scored = [r for r in column if math.isfinite(getattr(r, attr))]
            if not scored:
                continue
            best = max(scored, key=lambda r: getattr(r, attr))
            for r in scored:
                if r is best or abs(getattr(best, attr)) >= 1 or abs(getattr(r, attr)) >= 1 or r.n < 4:
                    continue
                p = fisher_z_compare(getattr(best, attr), best.n, getattr(r, attr), r.n)
                setattr(r, flag, p < alpha)
        reports.extend(column)
    return reports


def format_correlation_table(reports, alpha=0.05):
    """Predictor rows x (metric, coefficient) columns; ``*`` significant, ``<`` worse than best."""
    metrics = list(dict.fromkeys(r.metric for r in reports))
    predictors = list(dict.fromkeys(r.predictor for r in reports))
    by_key = {(r.predictor, r.metric): r for r in reports}
    header = ["predictor"] + [f"{m}:rho" for m in metrics] + [f"{m}:tau" for m in metrics]
    lines = ["\t".join(header)]

    def cell(value, p, worse):
        if not math.isfinite(value):
            return "nan"
        return f"{value:.4f}" + ("*" if p < alpha else "") + ("<" if worse else "")

    for pred in predictors:
        row = [pred]
        for m in metrics:
            r = by_key[(pred, m)]
            row.append(cell(r.spearman_rho, r.p_value_spearman, r.worse_than_best_spearman))
        for m in metrics:
            r = by_key[(pred, m)]
            row.append(cell(r.kendall_tau, r.p_value_kendall, r.worse_than_best_kendall))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
