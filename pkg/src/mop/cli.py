"""Command-line entry point: ``mop <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .criteria import perplexity
from .data import Corpus, eval_segments, gen_corpus, load_text_corpus
from .engine import MopConfig, mop_prune, run_extremes
from .errors import MopError
from .harness.bench import compare
from .harness.checkpoint import load_checkpoint, save_checkpoint
from .harness.flops import flops_breakdown
from .harness.report import (extremes_to_csv, render_extremes, render_table, trace_from_json,
                             trace_to_csv, trace_to_json)
from .model import ModelConfig, init_model
from .surgery import total_params
from .training import pretrain

log = logging.getLogger("mop")

CRITERIA = ("random", "cosine", "kl", "ppl", "always-width", "always-depth")


def _write(path, text: str) -> None:
    Path(path).write_text(text)


def cmd_gen_data(args) -> None:
    if args.from_text:
        corpus = load_text_corpus(args.from_text, doc_len=args.doc_len)
    else:
        corpus = gen_corpus(args.seed, args.n_docs, args.doc_len, args.vocab, args.order)
    corpus.save(args.out)
    print(f"wrote {len(corpus.documents)} documents (vocab {corpus.vocab_size}) to {args.out}")


def cmd_train(args) -> None:
    corpus = Corpus.load(args.corpus)
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, d_ff=args.d_ff,
                      vocab_size=corpus.vocab_size, max_seq_len=args.max_seq_len)
    model = init_model(cfg, args.seed)
    losses: list = []
    model = pretrain(model, corpus.train_docs, args.steps, lr=args.lr, batch=args.batch, seed=args.seed,
                     anneal_steps=args.anneal_steps, anneal_lr=args.anneal_lr, losses=losses)
    save_checkpoint(model, args.out)
    first, last = (losses[0], losses[-1]) if losses else (float("nan"),) * 2
    print(f"trained {total_params(model):,} params for {len(losses)} steps: loss {first:.4f} -> {last:.4f}")


def resolve_config(args) -> MopConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = MopConfig.from_dict(raw)
    if args.rho is not None:
        cfg.rho = args.rho
    if args.criterion is not None:
        if args.criterion.startswith("always-"):
            cfg.force_branch = args.criterion.split("-", 1)[1]
        else:
            cfg.path_criterion, cfg.force_branch = args.criterion, None
    if args.seed is not None:
        cfg.path_seed = cfg.tune_seed = cfg.ft_seed = cfg.calib_seed = args.seed
    if getattr(args, "no_rft", False):
        cfg.final_ft.enabled = False
    cfg.validate()
    return cfg


def cmd_prune(args) -> None:
    cfg = resolve_config(args)
    model = load_checkpoint(args.model)
    corpus = Corpus.load(args.corpus)
    pruned, trace = mop_prune(model, cfg, corpus)
    save_checkpoint(pruned, args.out)
    trace_path = Path(args.trace or Path(args.out).with_suffix(".trace.json"))
    _write(trace_path, trace_to_json(trace))
    _write(trace_path.with_suffix(".csv"), trace_to_csv(trace))
    print(render_table(trace), end="")


def cmd_eval(args) -> None:
    corpus = Corpus.load(args.corpus)
    segments = eval_segments(corpus, args.seg_len)
    out = {}
    for path in args.model:
        model = load_checkpoint(path)
        out[path] = {"params": total_params(model), "ppl": perplexity(model, segments)}
    print(json.dumps(out, indent=1, sort_keys=True))


def cmd_bench(args) -> None:
    models = {"dense": load_checkpoint(args.dense)}
    for path in args.model:
        models[path] = load_checkpoint(path)
    reports = compare(models, prompt_len=args.prompt_len, gen_len=args.gen_len, runs=args.runs,
                      warmup=args.warmup, seed=args.seed if args.seed is not None else 0)
    payload = []
    for name, r in zip(models, reports):
        d = r.to_dict()
        d["flops"] = flops_breakdown(models[name], args.prompt_len + args.gen_len // 2)
        payload.append(d)
        print(f"{name}: mean {r.mean:.4f}s ± {r.std:.4f}s over {len(r.retained)} runs, "
              f"speedup {r.speedup:.3f}x")
    if args.out:
        _write(args.out, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_extremes(args) -> None:
    cfg = resolve_config(args)
    model = load_checkpoint(args.model)
    corpus = Corpus.load(args.corpus)
    ratios = [float(x) for x in args.ratios.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    result = run_extremes(model, cfg, corpus, ratios=ratios, seeds=seeds)
    _write(args.out, extremes_to_csv(result.rows))
    print(render_extremes(result.summary()), end="")


def cmd_report(args) -> None:
    trace = trace_from_json(Path(args.trace).read_text())
    print(render_table(trace), end="")
    if args.csv:
        _write(args.csv, trace_to_csv(trace))


def cmd_default_config(args) -> None:
    print(json.dumps(MopConfig().to_dict(), indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="create a synthetic (or byte-level file) corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-docs", type=int, default=960)
    g.add_argument("--doc-len", type=int, default=64)
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--order", type=int, default=1, choices=(1, 2))
    g.add_argument("--from-text", help="ingest a local text file instead of sampling")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a dense toy model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--layers", type=int, default=12)
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--d-ff", type=int, default=344)
    t.add_argument("--max-seq-len", type=int, default=256)
    t.add_argument("--steps", type=int, default=250)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--anneal-steps", type=int, default=50, help="low-rate tail after the main steps")
    t.add_argument("--anneal-lr", type=float, default=3e-4)
    t.set_defaults(func=cmd_train)

    def run_args(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--config", help="JSON file mirroring MopConfig")
        sp.add_argument("--rho", type=float)
        sp.add_argument("--criterion", choices=CRITERIA)
        sp.add_argument("--seed", type=int, help="sets every seed in the config")
        sp.add_argument("--no-rft", action="store_true", help="skip recovery fine-tuning")

    pr = sub.add_parser("prune", help="run the pruning loop plus recovery fine-tuning")
    run_args(pr)
    pr.add_argument("--out", required=True)
    pr.add_argument("--trace", help="trace JSON path (CSV written alongside)")
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="held-out perplexity of checkpoints")
    e.add_argument("--model", required=True, nargs="+")
    e.add_argument("--corpus", required=True)
    e.add_argument("--seg-len", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency protocol against a dense baseline")
    b.add_argument("--dense", required=True)
    b.add_argument("--model", nargs="*", default=[])
    b.add_argument("--prompt-len", type=int, default=12)
    b.add_argument("--gen-len", type=int, default=128)
    b.add_argument("--runs", type=int, default=20)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("extremes", help="width-only vs depth-only vs random-path table")
    run_args(x)
    x.add_argument("--ratios", default="0.1,0.2,0.3,0.4")
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extremes)

    r = sub.add_parser("report", help="render a trace JSON as a table and CSV")
    r.add_argument("--trace", required=True)
    r.add_argument("--csv")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("default-config", help="print the default config as JSON")
    c.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MopError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mop {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
