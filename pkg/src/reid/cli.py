"""``reid`` command line: synth | train | eval | gradcheck | hpo.

Each command prints one JSON document on stdout that includes the fully
resolved config.  Exit codes: 0 ok, 2 config error, 3 I/O error,
4 numeric or verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .datamodel import GALLERY, QUERY, TRAIN, generate_synthetic, read_tracklets, write_tracklets
from .dictconv import to_dict
from .errors import ConfigError, FormatError, NumericError, ReidError
from .evalkit import evaluate, scores_document
from .trainer import (
    apply_hyperparameters,
    fit,
    grad_check,
    load_checkpoint,
    random_search,
    save_checkpoint,
)


def _dump(doc, path=None):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name} is required for '{args.command}'")
    return value


def _split_counts(ds):
    return {s: len(ds.indices(s)) for s in (TRAIN, QUERY, GALLERY)}


def cmd_synth(cfg, args):
    out = _need(args, "out")
    ds = generate_synthetic(cfg.synth, cfg.seed)
    write_tracklets(ds, out)
    return {
        "tracklets": len(ds.tracklets),
        "identities": {s: len(ds.identities(s)) for s in (TRAIN, QUERY, GALLERY)},
        "splits": _split_counts(ds),
        "out": str(out),
    }


def cmd_train(cfg, args):
    out = _need(args, "out")
    ds = read_tracklets(_need(args, "data"))
    init = load_checkpoint(args.init) if args.init else None
    cp, log = fit(cfg.train, ds, init=init)
    save_checkpoint(cp, out)
    log_path = args.log or f"{out}.log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return {
        "checkpoint": str(out),
        "log": str(log_path),
        "epoch": cp.epoch,
        "final": log[-1] if log else None,
    }


def cmd_eval(cfg, args):
    ds = read_tracklets(_need(args, "data"))
    cp = load_checkpoint(_need(args, "checkpoint"))
    doc = scores_document(evaluate(cp.model, ds, cfg.eval), cfg.eval.ranks)
    if args.out:
        _dump(doc, args.out)
    return doc


def cmd_gradcheck(cfg, args):
    gc = cfg.gradcheck
    if args.data:
        ds = read_tracklets(args.data)
    else:
        spec = replace(cfg.synth, identities=gc.identities, H=gc.H, W=gc.W)
        ds = generate_synthetic(spec, cfg.seed)
    train = replace(cfg.train, P=gc.P, K=gc.K, N=gc.N, hidden=gc.hidden, embed=gc.embed)
    reports = [grad_check(train, ds, seed=s, tol=gc.tol, step=gc.step) for s in gc.seeds]
    passed = all(r["passed"] for r in reports)
    worst = {}
    for r in reports:
        for name, err in r["max_rel_error"].items():
            worst[name] = max(worst.get(name, 0.0), err)
    doc = {"preset": cfg.train.preset, "passed": passed, "tol": gc.tol,
           "max_rel_error": worst, "reports": reports}
    if args.out:
        _dump(doc, args.out)
    return doc


def cmd_hpo(cfg, args):
    ds = read_tracklets(_need(args, "data"))
    eval_cfg = replace(cfg.eval, rerank=False)
    trials = random_search(cfg.hpo.parsed_space(), cfg.hpo.budget, cfg.train, ds, cfg.seed, eval_cfg)
    base = cfg.to_dict()
    for t in trials:
        run = dict(base)
        train = to_dict(apply_hyperparameters(cfg.train, t["params"]))
        train.pop("seed")
        run["train"] = train
        t["config"] = run
    doc = {"trials": trials, "best": trials[0]["params"]}
    if args.out:
        _dump(doc, args.out)
    return doc


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "hpo": cmd_hpo,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="reid", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--data", help="tracklet file")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate")
    parser.add_argument("--init", help="checkpoint to finetune or resume from")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    parser.add_argument("--epochs", type=int, help="override train.epochs")
    return parser


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config)
        if args.epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
            cfg.train.validate()
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"reid: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"reid: I/O error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"reid: numeric error: {exc}", file=sys.stderr)
        return 4
    except ReidError as exc:
        print(f"reid: {exc}", file=sys.stderr)
        return exc.exit_code
    doc = {"command": args.command, "config": cfg.to_dict(), **result}
    print(_dump(doc), file=stdout)
    if args.command == "gradcheck" and not result["passed"]:
        return 4
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
