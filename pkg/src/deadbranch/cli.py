"""Command line entry point: ``deadbranch {attack,embed,model,corpus} ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .cfg import load_corpus, save_corpus
from .embedding import SkipGramParams, load_table, save_table, train_skipgram
from .evaluation import ATTACKS, DATASET_KINDS, SETTINGS, ConfigError, RunConfig, run_experiment
from .features import FAMILIES
from .models import build_model, describe, save_weights, train_siamese
from .synth import generate_corpus, labeled_pairs, token_corpus


def _settings(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def cmd_attack_run(args) -> int:
    cfg = RunConfig(attack=args.attack, mode=args.mode, model=args.model, dataset=args.dataset,
                    settings=_settings(args.setting), tau=args.tau, epsilon=args.epsilon, r=args.r,
                    c=args.c, topk=args.topk, cand=args.cand, seed=args.seed, pairs=args.pairs,
                    corpus=args.corpus, embeddings=args.embeddings, weights=args.weights,
                    out=args.out, workers=args.workers, pair_workers=args.pair_workers,
                    gcam_iters=args.iters, gcam_step=args.step, gcam_slots=args.slots, eps_reg=args.eps_reg, p=args.p)
    try:
        aggs = run_experiment(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    for a in aggs:
        print(json.dumps(a, sort_keys=True))
    return 0


def cmd_embed_train(args) -> int:
    corpus = token_corpus(load_corpus(args.corpus))
    params = SkipGramParams(dim=args.dim, window=args.window, min_count=args.min_count, lr=args.lr,
                            epochs=args.epochs, seed=args.seed)
    table = train_skipgram(corpus, params)
    save_table(table, args.out)
    print(f"{len(table)} tokens x {table.dim} -> {args.out}")
    return 0


def cmd_model_describe(args) -> int:
    print(describe(args.weights))
    return 0


def cmd_model_train(args) -> int:
    corpus = load_corpus(args.corpus)
    table = load_table(args.embeddings) if args.embeddings else None
    try:
        model = build_model(args.family, args.seed, table)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    pairs = labeled_pairs(corpus, args.pairs, args.seed)
    w = train_siamese(model, pairs, args.epochs, lr=args.lr, seed=args.seed)
    save_weights(w, args.out)
    hist = model.train_history
    if hist:
        print(f"loss {hist[0]:.5f} -> {hist[-1]:.5f}")
    print(f"weights -> {args.out}")
    return 0


def cmd_corpus_synth(args) -> int:
    funcs = generate_corpus(args.sources, args.variants, args.seed)
    save_corpus(funcs, args.out)
    print(f"{len(funcs)} functions -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deadbranch", description="Dead-branch attacks on binary similarity models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="group", required=True)

    attack = sub.add_parser("attack").add_subparsers(dest="cmd", required=True)
    run = attack.add_parser("run", help="run an attack grid and write reports")
    run.add_argument("--attack", choices=ATTACKS, default="spatial")
    run.add_argument("--mode", choices=("targeted", "untargeted"), default="targeted")
    run.add_argument("--model", choices=FAMILIES, default="seq-embed")
    run.add_argument("--dataset", choices=DATASET_KINDS, default="random")
    run.add_argument("--setting", default="C1", help=f"comma list from {','.join(SETTINGS)}")
    run.add_argument("--tau", type=float, default=None, help="default 0.8 targeted, 0.5 untargeted")
    run.add_argument("--epsilon", type=float, default=0.1)
    run.add_argument("--r", type=float, default=0.75)
    run.add_argument("--c", type=int, default=10)
    run.add_argument("--topk", type=int, default=5)
    run.add_argument("--cand", type=int, default=400)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--pairs", type=int, default=50)
    run.add_argument("--corpus")
    run.add_argument("--embeddings")
    run.add_argument("--weights")
    run.add_argument("--out", default="runs")
    run.add_argument("--workers", type=int, default=1, help="threads for candidate scoring")
    run.add_argument("--pair-workers", type=int, default=1, help="pairs attacked concurrently")
    run.add_argument("--iters", type=int, default=None, help="gcam iterations")
    run.add_argument("--step", type=float, default=0.1, help="gcam step size")
    run.add_argument("--slots", type=int, default=3, help="gcam instruction slots per dead branch (seq-embed)")
    run.add_argument("--eps-reg", type=float, default=0.01)
    run.add_argument("--p", type=int, choices=(1, 2), default=2)
    run.set_defaults(func=cmd_attack_run)

    embed = sub.add_parser("embed").add_subparsers(dest="cmd", required=True)
    tr = embed.add_parser("train", help="skip-gram instruction embeddings")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--dim", type=int, default=100)
    tr.add_argument("--window", type=int, default=8)
    tr.add_argument("--min-count", type=int, default=8)
    tr.add_argument("--lr", type=float, default=0.05)
    tr.add_argument("--epochs", type=int, default=5)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_embed_train)

    model = sub.add_parser("model").add_subparsers(dest="cmd", required=True)
    de = model.add_parser("describe", help="print a weight file manifest")
    de.add_argument("weights")
    de.set_defaults(func=cmd_model_describe)
    mt = model.add_parser("train", help="siamese training on synthetic-corpus pairs")
    mt.add_argument("--family", choices=FAMILIES, required=True)
    mt.add_argument("--corpus", required=True)
    mt.add_argument("--embeddings")
    mt.add_argument("--pairs", type=int, default=200)
    mt.add_argument("--epochs", type=int, default=50)
    mt.add_argument("--lr", type=float, default=5e-3)
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--out", required=True)
    mt.set_defaults(func=cmd_model_train)

    corpus = sub.add_parser("corpus").add_subparsers(dest="cmd", required=True)
    sy = corpus.add_parser("synth", help="write a seeded synthetic corpus (JSON lines)")
    sy.add_argument("--sources", type=int, default=200)
    sy.add_argument("--variants", type=int, default=3)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_corpus_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
