"""Command-line front end: ``wayfinder <command> [--config PATH] [--seed N] ...``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from . import pipeline as pl
from .errors import ConfigError, StageOrderError, WayfinderError

COMMANDS = ("gen-world", "gen-corpus", "synth-pairs", "pretrain", "train", "evaluate", "report", "run-all")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: the shipped desk config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    common.add_argument("--out", help="output directory (default: $WAYFINDER_OUT or ./out)")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    parser = argparse.ArgumentParser(prog="wayfinder", description="Hallucination detection in toy-world navigation instructions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common], help="generate toy houses")
    sub.add_parser("gen-corpus", parents=[common], help="sample trajectories and verbalize instructions")
    p = sub.add_parser("synth-pairs", parents=[common], help="synthesize contrastive pairs and labeled dev/test sets")
    p.add_argument("--count", type=int, help="number of training pairs (overrides the config)")
    sub.add_parser("pretrain", parents=[common], help="masked-token and pair-prediction pre-training")
    for name, helptext in (("train", "fine-tune a two-tower model or train a baseline"),
                           ("evaluate", "score dev and test for one system")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--objective", choices=("contrastive", "mle"))
        p.add_argument("--pretrain", type=_on_off, metavar="on|off")
        p.add_argument("--baseline", choices=("random", "speaker", "seqscorer"))
        if name == "evaluate":
            p.add_argument("--all", action="store_true", help="evaluate every system")
    sub.add_parser("report", parents=[common], help="compile the comparison report")
    sub.add_parser("run-all", parents=[common], help="run every stage end to end")
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("WAYFINDER_OUT") or "out")


def _config(args) -> pl.PipelineConfig:
    path = args.config or pl.shipped_config_path("desk")
    cfg = pl.load_config(path)
    kw = {}
    if getattr(args, "objective", None):
        kw["objective"] = args.objective
    if getattr(args, "pretrain", None) is not None:
        kw["pretrain"] = args.pretrain
    return pl.with_overrides(cfg, args.seed, **kw)


def _run(args, say) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    cmd = args.command
    if cmd == "gen-world":
        w = pl.gen_world(cfg, out)
        say(f"wrote {len(w.houses)} houses")
    elif cmd == "gen-corpus":
        c = pl.gen_corpus(cfg, out)
        say(f"wrote {len(c.train)} train, {len(c.dev)} dev, {len(c.test)} test instructions")
    elif cmd == "synth-pairs":
        pairs, dev, test = pl.synth_pairs(cfg, out, args.count)
        say(f"wrote {len(pairs)} pairs, {len(dev)} dev and {len(test)} test examples")
    elif cmd == "pretrain":
        pl.pretrain_stage(cfg, out)
    elif cmd == "train":
        if args.baseline == "speaker":
            pl.train_speaker_stage(cfg, out)
        elif args.baseline == "seqscorer":
            h = pl.train_seqscorer(cfg, out)
            say(f"best dev F-1 {100 * h.best_f1:.1f} at step {h.best_step}")
        elif args.baseline == "random":
            say("the random baseline has no parameters; nothing to train")
        else:
            h = pl.train_twotower(cfg, out, cfg.train.pretrain, cfg.train.objective)
            say(f"best dev F-1 {100 * h.best_f1:.1f} at step {h.best_step}")
    elif cmd == "evaluate":
        if args.all:
            systems = pl.all_systems()
        elif args.baseline:
            systems = [args.baseline]
        else:
            systems = [pl.twotower_name(cfg.train.pretrain, cfg.train.objective)]
        for s in systems:
            pl.evaluate_system(cfg, out, s)
            say(f"scored {s}")
    elif cmd == "report":
        rep = pl.report_stage(cfg, out)
        sys.stdout.write(rep.to_text())
    elif cmd == "run-all":
        rep = pl.run_all(cfg, out, progress=say)
        sys.stdout.write(rep.to_text())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.time()

    def say(msg: str):
        if not args.quiet:
            print(f"[{time.time() - start:7.1f}s] {msg}", file=sys.stderr, flush=True)

    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return _run(args, say)
    except ConfigError as e:
        print("error: invalid configuration:", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    except StageOrderError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except WayfinderError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
