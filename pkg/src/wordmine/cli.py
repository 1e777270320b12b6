"""Command-line entry point: ``wordmine <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, unitseq
from .errors import WordmineError
from .model import TrainConfig
from .search import default_workers
from .synthetic import SyntheticSpec, generate_synthetic


def _read_corpus(path):
    """Accept raw unit records or already-segmented records."""
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), "")
    if first and "segments" in json.loads(first):
        return unitseq.read_segmented(path)
    return [unitseq.segment_units(s) for s in unitseq.read_unit_sequences(path)]


def cmd_gen_synthetic(args):
    rec = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            rec = json.load(fh)
    rec["seed"] = args.seed
    if args.noise is not None:
        rec["noise"] = args.noise
    if args.shots is not None:
        rec["shots"] = args.shots
    if args.classes is not None:
        rec["n_classes"] = args.classes
    files = generate_synthetic(SyntheticSpec.from_json(rec), args.out)
    print(json.dumps({k: str(v) for k, v in files.items()}, indent=1, sort_keys=True))


def cmd_segment(args):
    pipeline.stage_segment(args.units, args.out)


def cmd_search(args):
    query_units = args.query_units or Path(args.queries).parent / "units" / "support.jsonl"
    support_seg = _read_corpus(query_units)
    corpus = _read_corpus(args.corpus)
    tmp_support = Path(args.out).with_suffix(".support.seg.jsonl")
    tmp_corpus = Path(args.out).with_suffix(".corpus.seg.jsonl")
    unitseq.write_segmented(tmp_support, support_seg)
    unitseq.write_segmented(tmp_corpus, corpus)
    scoring = unitseq.ScoringParams(args.match, args.mismatch, args.gap)
    mined = pipeline.stage_search(args.queries, tmp_support, tmp_corpus, args.out, scoring, args.n, args.workers)
    tmp_support.unlink()
    tmp_corpus.unlink()
    print(f"mined {len(mined)} words -> {args.out}")


def cmd_mine_images(args):
    rankings = pipeline.stage_mine_images(args.support, args.images, args.out, args.n, args.exclude)
    print(f"mined {sum(len(r.entries) for r in rankings)} images -> {args.out}")


def cmd_build_pairs(args):
    if args.from_support:
        ps = pipeline.stage_support_pairs(args.from_support, args.background, args.out, args.val_fraction, args.seed)
    else:
        if not (args.words and args.images):
            raise SystemExit("build-pairs needs --words and --images (or --from-support)")
        ps = pipeline.stage_build_pairs(args.words, args.images, args.background, args.out,
                                        args.n, args.val_fraction, args.seed)
    print(f"{len(ps.train)} train / {len(ps.validation)} validation pairs -> {args.out}")


def cmd_train(args):
    cfg = TrainConfig(args.lr, args.epochs, args.n_pos, args.n_neg, args.seed, args.patience)
    _, hist = pipeline.stage_train(args.pairs, args.words, args.grids, args.out, args.regions, cfg,
                                   args.init, args.d_emb, args.init_scale)
    last = hist.epochs[-1]
    print(f"trained {len(hist.epochs)} epochs, best epoch {hist.best_epoch}, "
          f"last loss {last['loss']:.2f}, last validation {last['validation']:.3f}")


def cmd_eval_fewshot(args):
    rep = pipeline.stage_eval_fewshot(args.checkpoint, args.test_set, args.report, args.episodes,
                                      args.ways, args.seed, args.support, vars_echo(args))
    print(f"accuracy {rep['metrics']['accuracy']:.4f} over {args.episodes} episodes")


def cmd_eval_retrieval(args):
    rep = pipeline.stage_eval_retrieval(args.checkpoint, args.pool, args.report, args.queries_per_class,
                                        vars_echo(args))
    print(f"P@N {rep['metrics']['p_at_n']:.4f}")


def cmd_run_all(args):
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    run = pipeline.run_pipeline(cfg, args.from_stage)
    print(run)


def vars_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func" and isinstance(v, (str, int, float, bool))}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wordmine", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--shots", type=int)
    sp.add_argument("--classes", type=int)

    sp = add("segment", cmd_segment, "merge unit runs into segments")
    sp.add_argument("--units", required=True)
    sp.add_argument("--out", required=True)

    sp = add("search", cmd_search, "query-by-example search of a unit corpus")
    sp.add_argument("--queries", required=True, help="support-set manifest")
    sp.add_argument("--query-units", help="unit records of the support words")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--n", type=int, default=600)
    sp.add_argument("--match", type=float, default=1.0)
    sp.add_argument("--mismatch", type=float, default=-1.0)
    sp.add_argument("--gap", type=float, default=-1.0)
    sp.add_argument("--workers", type=int, default=default_workers())
    sp.add_argument("--out", required=True)

    sp = add("mine-images", cmd_mine_images, "rank unlabelled images per class")
    sp.add_argument("--support", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--exclude", help="JSON with image_ids to keep out of the pool")
    sp.add_argument("--n", type=int, default=600)
    sp.add_argument("--out", required=True)

    sp = add("build-pairs", cmd_build_pairs, "pair mined words with mined images")
    sp.add_argument("--words")
    sp.add_argument("--images")
    sp.add_argument("--from-support", help="use the support manifest itself (no mining)")
    sp.add_argument("--background")
    sp.add_argument("--n", type=int, default=600)
    sp.add_argument("--val-fraction", type=float, default=0.1)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the attention scorer")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--words", required=True)
    sp.add_argument("--regions")
    sp.add_argument("--grids", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--n-pos", type=int, default=5)
    sp.add_argument("--n-neg", type=int, default=11)
    sp.add_argument("--d-emb", type=int, default=32)
    sp.add_argument("--init", default="random")
    sp.add_argument("--init-scale", type=float, default=1.0)

    sp = add("eval-fewshot", cmd_eval_fewshot, "episodic L-way classification")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test-set", required=True)
    sp.add_argument("--support")
    sp.add_argument("--episodes", type=int, default=1000)
    sp.add_argument("--ways", type=int, default=5)
    sp.add_argument("--report", required=True)

    sp = add("eval-retrieval", cmd_eval_retrieval, "few-shot retrieval P@N")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--queries-per-class", type=int, default=20)
    sp.add_argument("--report", required=True)

    sp = sub.add_parser("run-all", help="run every stage from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--from-stage", choices=pipeline.STAGES)
    sp.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except WordmineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
