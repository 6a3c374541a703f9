"""Command-line entry point: ``drqr <command> [<subcommand>] ...``."""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from drqr import __version__

log = logging.getLogger("drqr")


class UsageError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, args, artifacts):
    """Record config, seed and output hashes for one invocation."""
    config = {k: v for k, v in vars(args).items() if k not in {"func", "config"} and not callable(v)}
    manifest = {
        "drqr_version": __version__,
        "command": command,
        "config": json.loads(json.dumps(config, default=str)),
        "seed": getattr(args, "seed", None),
        "artifacts": {str(p): _sha256(p) for p in artifacts},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _require(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _manifest_path(args, primary):
    return Path(args.manifest) if getattr(args, "manifest", None) else Path(f"{primary}.manifest.json")


def _pipeline(args):
    from drqr.text import PipelineConfig, load_stopwords

    stopwords = frozenset() if args.no_stopwords else load_stopwords(args.stopwords)
    return PipelineConfig(lowercase=True, stopwords=stopwords, stem=not args.no_stem)


def _read_tsv_queries(path):
    from drqr.mining import read_queries

    return read_queries(_require(path, "queries"))


# -- commands ---------------------------------------------------------------------------


def cmd_index_build(args):
    from drqr.index import build_index, read_corpus_tsv

    docs, skipped = read_corpus_tsv(_require(args.corpus, "corpus"))
    index = build_index(docs, _pipeline(args))
    index.save(args.index)
    print(f"indexed {index.stats.num_docs} documents, {len(index.postings)} terms, "
          f"{index.stats.total_terms} tokens; skipped {len(skipped)} malformed lines")
    write_manifest(_manifest_path(args, args.index), "index build", args, [args.index])


def cmd_mine_pairs(args):
    from drqr.mining import count_unordered, mine_pairs, read_qrels, split_pairs, write_pairs

    qrels = read_qrels(_require(args.qrels, "qrels"))
    queries = _read_tsv_queries(args.queries)
    pairs = mine_pairs(qrels, queries, args.min_grade)
    out = Path(args.out)
    write_pairs(out, pairs)
    artifacts = [out]
    print(f"ordered pairs: {len(pairs)}\nunordered pairs: {count_unordered(pairs)}")
    if pairs:
        train, valid = split_pairs(pairs, args.train_fraction, args.seed)
        for name, part in (("train", train), ("valid", valid)):
            p = out.with_name(f"{out.stem}.{name}{out.suffix}")
            write_pairs(p, part)
            artifacts.append(p)
        print(f"train: {len(train)}  valid: {len(valid)}")
    write_manifest(_manifest_path(args, out), "mine pairs", args, artifacts)


def cmd_train_ml(args):
    from drqr.mining import read_pairs
    from drqr.seq2seq import CopySeq2Seq, ModelConfig, TrainConfig, Vocabulary, save_checkpoint, train_ml

    train = read_pairs(_require(args.train, "train"))
    valid = read_pairs(_require(args.valid, "valid"))
    vocab = Vocabulary.build(train, args.min_frequency)
    model = CopySeq2Seq(
        ModelConfig(len(vocab), emb_dim=args.emb_dim or args.hidden, hidden_size=args.hidden, dropout=args.dropout),
        seed=args.seed,
    )
    cfg = TrainConfig(args.lr, args.batch_size, args.epochs, args.patience, args.clip, args.seed)
    history = train_ml(model, vocab, train, valid, cfg)
    save_checkpoint(args.checkpoint, model, vocab, {"stage": "ml", "best_epoch": history.best_epoch})
    artifacts = [args.checkpoint]
    if args.history:
        Path(args.history).write_text(history.to_tsv())
        artifacts.append(args.history)
    print(f"trained {len(history.rows)} epochs; best epoch {history.best_epoch} "
          f"valid loss {min(r[2] for r in history.rows):.4f}")
    write_manifest(_manifest_path(args, args.checkpoint), "train ml", args, artifacts)


def cmd_train_rl(args):
    from drqr.index import InvertedIndex
    from drqr.mining import read_pairs
    from drqr.qpp import PredictorKind
    from drqr.rl import RewardConfig, TrainingSchedule, calibrate, train_drqr
    from drqr.seq2seq import Reformulator, load_checkpoint, save_checkpoint

    model, vocab, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    train = read_pairs(_require(args.train, "train"))
    valid = read_pairs(_require(args.valid, "valid"))
    kind = PredictorKind.parse(args.predictor)
    stats, calibration = None, None
    pipeline = _pipeline(args)
    if args.lam < 1.0:
        stats = InvertedIndex.load(_require(args.index, "index")).stats
        texts = sorted({p.source_text for p in train} | {p.target_text for p in train})
        calibration = calibrate(stats, texts, pipeline, kinds=(kind,))
    reward_cfg = RewardConfig(args.lam, kind, calibration, pipeline)
    schedule = TrainingSchedule(args.epochs, args.lr, args.batch_size, args.patience, args.max_len, args.clip, args.seed)
    history = train_drqr(Reformulator(model, vocab), schedule, train, valid, stats, reward_cfg)
    extra = {"stage": "rl", "lambda": args.lam, "predictor": str(kind), "best_epoch": history.best_epoch}
    if calibration is not None:
        extra["calibration"] = calibration.to_json()
    save_checkpoint(args.out, model, vocab, extra)
    artifacts = [args.out]
    if args.history:
        Path(args.history).write_text(history.to_tsv())
        artifacts.append(args.history)
    vr = history.valid_rewards()
    print(f"validation reward: epoch 0 {vr[0]:.4f}, best {max(vr):.4f} (epoch {history.best_epoch})")
    write_manifest(_manifest_path(args, args.out), "train rl", args, artifacts)


def cmd_reformulate(args):
    from drqr.seq2seq import Reformulator, load_checkpoint
    from drqr.text import tokenize

    model, vocab, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    queries = _read_tsv_queries(args.queries)
    reformulator = Reformulator(model, vocab)
    qids = [q for q in queries if tokenize(queries[q])]
    out = []
    for i in range(0, len(qids), 64):
        chunk = qids[i : i + 64]
        decoded = reformulator.greedy_batch([tokenize(queries[q]) for q in chunk], args.max_len)
        out += [f"{q}\t{' '.join(d.tokens)}\n" for q, d in zip(chunk, decoded)]
    Path(args.out).write_text("".join(out))
    print(f"reformulated {len(out)} queries")
    write_manifest(_manifest_path(args, args.out), "reformulate", args, [args.out])


def _mixed_queries(queries, reformulations, theta, pipeline):
    from drqr.ranking import WeightedQuery, mix_queries
    from drqr.text import process

    out = {}
    for qid, text in queries.items():
        q0 = WeightedQuery.from_terms(qid, process(text, pipeline))
        if reformulations is not None and qid in reformulations:
            qr = WeightedQuery.from_terms(qid, process(reformulations[qid], pipeline))
            q0 = mix_queries(q0, qr, theta)
        out[qid] = q0
    return out


def run_retrieval(index, weighted, model_name, k, qe, tag, qe_docs=3, qe_terms=10):
    from drqr.ranking import bo1_expand, get_model, rerank, retrieve

    model = get_model(model_name)
    rankings = {}
    for qid in sorted(weighted):
        q = weighted[qid]
        ranking = retrieve(model, index, q, k, tag)
        if qe and ranking.entries:
            q = bo1_expand(index, q, ranking, qe_docs, qe_terms)
            ranking = retrieve(model, index, q, k, tag)
        rankings[qid] = rerank(q, ranking)
    return rankings


def cmd_retrieve(args):
    from drqr.index import InvertedIndex
    from drqr.ranking import write_run

    index = InvertedIndex.load(_require(args.index, "index"))
    queries = _read_tsv_queries(args.queries)
    reforms = _read_tsv_queries(args.reformulations) if args.reformulations else None
    if args.theta < 0:
        raise UsageError("--theta must be >= 0")
    weighted = _mixed_queries(queries, reforms, args.theta, _pipeline(args))
    tag = args.tag or args.model
    rankings = run_retrieval(index, weighted, args.model, args.k, args.qe, tag)
    write_run(args.out, [rankings[q] for q in sorted(rankings)])
    print(f"retrieved {len(rankings)} queries")
    write_manifest(_manifest_path(args, args.out), "retrieve", args, [args.out])


def _metrics(args):
    return [m for m in args.metrics.split(",") if m.strip()]


def cmd_evaluate(args):
    from drqr.evaluation import evaluate_run
    from drqr.mining import qrels_by_query, read_qrels
    from drqr.ranking import read_run

    rankings = read_run(_require(args.run, "run"))
    qrels = qrels_by_query(read_qrels(_require(args.qrels, "qrels")))
    result = evaluate_run(rankings, qrels, _metrics(args))
    text = result.to_tsv()
    artifacts = []
    if args.out:
        Path(args.out).write_text(text)
        artifacts.append(args.out)
        summary = Path(f"{args.out}.json")
        summary.write_text(json.dumps({"means": result.means, "unjudged": result.unjudged}, indent=2) + "\n")
        artifacts.append(summary)
        write_manifest(_manifest_path(args, args.out), "evaluate", args, artifacts)
    for metric, value in result.means.items():
        print(f"{metric}\t{value:.4f}")


def cmd_qpp_predict(args):
    from drqr.index import InvertedIndex
    from drqr.qpp import PredictorKind, predict_all
    from drqr.text import process

    index = InvertedIndex.load(_require(args.index, "index"))
    queries = _read_tsv_queries(args.queries)
    pipeline = _pipeline(args)
    lines = []
    for qid in sorted(queries):
        scores = predict_all(index.stats, process(queries[qid], pipeline))
        for kind in PredictorKind:
            if kind in scores:
                s = scores[kind]
                lines.append(f"{qid}\t{kind}\t{s.value:.6f}\t{s.num_scored_terms}\n")
    Path(args.out).write_text("".join(lines))
    write_manifest(_manifest_path(args, args.out), "qpp predict", args, [args.out])


def cmd_qpp_correlate(args):
    from drqr.evaluation import correlate_predictors, evaluate_run, format_correlation_table
    from drqr.index import InvertedIndex
    from drqr.mining import qrels_by_query, read_qrels
    from drqr.qpp import PredictorKind, predict
    from drqr.ranking import read_run
    from drqr.text import process

    index = InvertedIndex.load(_require(args.index, "index"))
    queries = _read_tsv_queries(args.queries)
    rankings = read_run(_require(args.run, "run"))
    qrels = qrels_by_query(read_qrels(_require(args.qrels, "qrels")))
    evaluation = evaluate_run(rankings, qrels, _metrics(args))
    pipeline = _pipeline(args)
    processed = {q: process(t, pipeline) for q, t in queries.items()}
    predictions = {}
    for kind in PredictorKind:
        predictions[str(kind)] = {
            q: predict(index.stats, terms, kind).value
            for q, terms in processed.items()
            if (terms or kind is PredictorKind.QUERY_LENGTH) and q in evaluation.per_query[_metrics(args)[0].lower()]
        }
    reports = correlate_predictors(predictions, evaluation.per_query, args.permutations, args.seed)
    table = format_correlation_table(reports)
    Path(args.out).write_text(table)
    summary = Path(f"{args.out}.json")
    summary.write_text(json.dumps({
        "reports": [r.as_dict() for r in reports],
        "fisher_z_note": "Fisher-z comparisons assume independent samples; the compared correlations share queries.",
    }, indent=2) + "\n")
    print(table, end="")
    write_manifest(_manifest_path(args, args.out), "qpp correlate", args, [args.out, summary])


def _parse_reformulation_specs(specs):
    out = []
    for spec in specs:
        lam, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--reformulations expects LAMBDA=PATH, got {spec!r}")
        out.append((float(lam), _require(path, "reformulations")))
    return out


def cmd_sweep(args):
    from drqr.evaluation import evaluate_run
    from drqr.index import InvertedIndex
    from drqr.mining import qrels_by_query, read_qrels, read_queries

    index = InvertedIndex.load(_require(args.index, "index"))
    queries = read_queries(_require(args.queries, "queries"))
    if args.num_queries:
        queries = {q: queries[q] for q in sorted(queries)[: args.num_queries]}
    qrels = qrels_by_query(read_qrels(_require(args.qrels, "qrels")))
    qrels = {q: j for q, j in qrels.items() if q in queries}
    specs = _parse_reformulation_specs(args.reformulations)
    thetas = [float(t) for t in args.thetas.split(",")]
    pipeline = _pipeline(args)
    rows = []
    for lam, path in specs:
        reforms = read_queries(path)
        for theta in thetas:
            weighted = _mixed_queries(queries, reforms, theta, pipeline)
            rankings = run_retrieval(index, weighted, args.model, args.k, args.qe, f"sweep_l{lam}_t{theta}")
            result = evaluate_run(rankings, qrels, [args.metric])
            rows.append((lam, theta, result.means[args.metric.lower()]))
    best = max(rows, key=lambda r: (r[2], -r[0], -r[1]))
    lines = ["lambda\ttheta\t" + args.metric] + [f"{l}\t{t}\t{v:.6f}" for l, t, v in rows]
    Path(args.out).write_text("\n".join(lines) + "\n")
    summary = Path(f"{args.out}.json")
    summary.write_text(json.dumps({"cells": len(rows), "best": {"lambda": best[0], "theta": best[1], args.metric: best[2]}}, indent=2) + "\n")
    print(f"{len(rows)} cells; best lambda={best[0]} theta={best[1]} {args.metric}={best[2]:.4f}")
    write_manifest(_manifest_path(args, args.out), "sweep", args, [args.out, summary])


def cmd_report_histogram(args):
    from drqr.evaluation import delta_histogram, evaluate_run
    from drqr.mining import qrels_by_query, read_qrels
    from drqr.ranking import read_run

    qrels = qrels_by_query(read_qrels(_require(args.qrels, "qrels")))
    metric = args.metric.lower()
    base = evaluate_run(read_run(_require(args.baseline, "baseline")), qrels, [metric]).per_query[metric]
    treat = evaluate_run(read_run(_require(args.treatment, "treatment")), qrels, [metric]).per_query[metric]
    improved, degraded, unchanged = delta_histogram(base, treat, args.epsilon)
    text = f"improved\t{improved}\ndegraded\t{degraded}\nunchanged\t{unchanged}\n"
    Path(args.out).write_text(text)
    print(text, end="")
    write_manifest(_manifest_path(args, args.out), "report histogram", args, [args.out])


# -- parser -------------------------------------------------------------------------------


def _add_pipeline_flags(p):
    p.add_argument("--no-stem", action="store_true", help="disable Porter stemming")
    p.add_argument("--no-stopwords", action="store_true", help="keep stopwords")
    p.add_argument("--stopwords", help="stopword file (one token per line)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")


def build_parser():
    parser = argparse.ArgumentParser(prog="drqr", description="Reinforced query reformulation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of option defaults; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index").add_subparsers(dest="sub", required=True)
    p = index.add_parser("build", help="index a docno<TAB>text corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_index_build)

    mine = sub.add_parser("mine").add_subparsers(dest="sub", required=True)
    p = mine.add_parser("pairs", help="mine paraphrase pairs from shared relevant documents")
    p.add_argument("--qrels", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--min-grade", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_mine_pairs)

    train = sub.add_parser("train").add_subparsers(dest="sub", required=True)
    p = train.add_parser("ml", help="maximum-likelihood pre-training")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--emb-dim", type=int)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--min-frequency", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_train_ml)

    p = train.add_parser("rl", help="self-critic REINFORCE fine-tuning")
    p.add_argument("--checkpoint", required=True, help="ML-pretrained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--index", help="index for QPP statistics (needed when lambda < 1)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--predictor", default="AvgSCQ")
    p.add_argument("--history")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--clip", type=float, default=1.0)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("reformulate", help="greedy-decode reformulations for a query file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=20)
    _add_common(p)
    p.set_defaults(func=cmd_reformulate)

    p = sub.add_parser("retrieve", help="rank documents, optionally mixing in reformulations")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["dph", "bm25"], default="dph")
    p.add_argument("--qe", action="store_true", help="Bo1 query expansion (3 docs, 10 terms)")
    p.add_argument("--reformulations", help="qid<TAB>text reformulations")
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--tag")
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="MAP / NDCG of a TREC run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="map,ndcg@10")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    qpp = sub.add_parser("qpp").add_subparsers(dest="sub", required=True)
    p = qpp.add_parser("predict", help="per-query predictor table")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_qpp_predict)

    p = qpp.add_parser("correlate", help="predictor vs effectiveness correlation table")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="map,ndcg@10")
    p.add_argument("--permutations", type=int, default=10_000)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_qpp_correlate)

    p = sub.add_parser("sweep", help="lambda x theta grid search on validation queries")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--reformulations", action="append", required=True, metavar="LAMBDA=PATH")
    p.add_argument("--thetas", default=",".join(f"{i / 10:.1f}" for i in range(11)))
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--model", choices=["dph", "bm25"], default="dph")
    p.add_argument("--qe", action="store_true")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--num-queries", type=int, help="use the first N validation queries (by qid)")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report").add_subparsers(dest="sub", required=True)
    p = report.add_parser("histogram", help="improved / degraded / unchanged query counts")
    p.add_argument("--baseline", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report_histogram)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults from ``--config``; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    args = parser.parse_args(argv)
    if not known.config:
        return args
    config = json.loads(Path(_require(known.config, "config")).read_text())
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    for key, value in config.items():
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in explicit and hasattr(args, key):
            setattr(args, key, value)
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"drqr: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"drqr: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
