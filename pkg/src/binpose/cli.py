"""Command line entry point: gen, train, infer, eval, report."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

from .config import dump_config, load_config
from .dataset import Dataset, generate_dataset
from .errors import ConfigError, ContractError, DataError, NumericError, SettleError
from .evaluation import ADD, SYM, EvalConfig, evaluate, write_report
from .models import load_model
from .pipeline import (PoseNetwork, infer, registration_examples, train_heads,
                       train_registration)
from .posehyp import read_hypotheses, write_hypotheses

log = logging.getLogger("binpose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.bpck"


def _config(args):
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def _model(cfg):
    return load_model(dataclasses.asdict(cfg.model))


def _frames(args, cfg, split):
    ds = Dataset(args.data, cfg)
    frames = ds.frames(split, getattr(args, "scenes", None))
    if not frames:
        raise DataError(f"dataset {args.data} has no {split} frames")
    return frames


def cmd_gen(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    manifest = generate_dataset(cfg, args.out, workers=args.workers)
    dump_config(cfg, os.path.join(args.out, "config.yaml"))
    log.info("wrote %s", manifest["counts"])


def _write_trace(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train(args):
    cfg = _config(args)
    model = _model(cfg)
    net = PoseNetwork(cfg, model)
    os.makedirs(args.out, exist_ok=True)
    frames = _frames(args, cfg, "train")
    images = [f.image for f in frames]
    annotations = [f.annotation for f in frames]
    if args.stage == "heads":
        trace = train_heads(net, images, annotations, steps=args.steps)
        _write_trace(os.path.join(args.out, "loss_heads.csv"),
                     ["step", "total", "detection", "offset", "depth", "pose"],
                     [[k, repr(t.total), repr(t.detection), repr(t.offset), repr(t.depth),
                       repr(t.pose)] for k, t in enumerate(trace)])
    else:
        if not args.checkpoint or not os.path.exists(args.checkpoint):
            raise DataError("stage jointreg needs --checkpoint from stage heads")
        net.load(args.checkpoint, prefixes=("backbone.", "detect.", "posehyp."))
        examples = registration_examples(net, images, annotations, [f.id for f in frames])
        trace = train_registration(net, examples, steps=args.steps)
        _write_trace(os.path.join(args.out, "loss_jointreg.csv"), ["step", "loss"],
                     [[k, repr(v)] for k, v in enumerate(trace)])
    net.save(os.path.join(args.out, CHECKPOINT))
    dump_config(cfg, os.path.join(args.out, "config.yaml"))


def cmd_infer(args):
    cfg = _config(args)
    net = PoseNetwork(cfg, _model(cfg))
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise DataError("infer needs an existing --checkpoint")
    net.load(args.checkpoint)
    frames = _frames(args, cfg, args.split)
    results = infer(net, [f.image for f in frames], [f.annotation.view for f in frames],
                    [f.id for f in frames], use_offset=not args.no_offset,
                    use_registration=not args.no_registration)
    os.makedirs(args.out, exist_ok=True)
    write_hypotheses(os.path.join(args.out, "hypotheses_raw.jsonl"),
                     [h for r in results for h in r.hypotheses])
    write_hypotheses(os.path.join(args.out, "hypotheses.jsonl"),
                     [h for r in results for h in r.final])


def cmd_eval(args):
    cfg = _config(args)
    model = _model(cfg)
    frames = _frames(args, cfg, args.split)
    gt = {f.id: [(a.pose, a.visibility) for a in f.annotation.instances] for f in frames}
    preds = {}
    try:
        hyps = read_hypotheses(args.dump)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read hypothesis dump {args.dump}: {exc}") from exc
    for h in hyps:
        if h.frame_id not in gt:
            raise DataError(f"dump frame {h.frame_id!r} is not in the {args.split} split")
        preds.setdefault(h.frame_id, []).append((h.pose, h.confidence))
    os.makedirs(args.out, exist_ok=True)
    criteria = [SYM, ADD] if args.criterion == "both" else [args.criterion]
    for crit in criteria:
        ecfg = EvalConfig(crit, cfg.eval.threshold_factor, min_visibility=cfg.eval.min_visibility)
        metrics = evaluate(preds, gt, model, ecfg)
        write_report(metrics, os.path.join(args.out, f"metrics_{crit}.json"),
                     os.path.join(args.out, f"pr_{crit}.csv"))
        log.info("%s AP %.4f F1 %.4f", crit, metrics.ap, metrics.f1_best)


def cmd_report(args):
    """One row per metrics directory: ap/f1 under each available criterion."""
    rows = []
    for entry in args.metrics:
        name, _, path = entry.rpartition("=")
        name = name or os.path.basename(os.path.normpath(path))
        row = {"config": name}
        for crit in (SYM, ADD):
            p = os.path.join(path, f"metrics_{crit}.json")
            if os.path.exists(p):
                with open(p) as fh:
                    m = json.load(fh)
                row[f"ap_{crit}"] = repr(float(m["ap"]))
                row[f"f1_{crit}"] = repr(float(m["f1_best"]))
            else:
                row[f"ap_{crit}"] = row[f"f1_{crit}"] = ""
        rows.append(row)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["config", "ap_sym", "ap_add", "f1_sym", "f1_add"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="dataset directory")

    parser = argparse.ArgumentParser(prog="binpose", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate scenes, frames and annotations")

    p = sub.add_parser("train", parents=[common, data], help="train a stage")
    p.add_argument("--stage", choices=["heads", "jointreg"], required=True)
    p.add_argument("--checkpoint", help="heads checkpoint (stage jointreg)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--scenes", type=int, help="use only the first N training scenes")

    p = sub.add_parser("infer", parents=[common, data], help="write a hypothesis dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--no-offset", action="store_true", help="use box centers, not the offset head")
    p.add_argument("--no-registration", action="store_true", help="skip joint registration")

    p = sub.add_parser("eval", parents=[common, data], help="score a hypothesis dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--criterion", choices=["sym", "add", "both"], default="both")

    p = sub.add_parser("report", parents=[common], help="merge metrics into a table")
    p.add_argument("metrics", nargs="+", help="metrics directories, optionally NAME=DIR")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, SettleError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
