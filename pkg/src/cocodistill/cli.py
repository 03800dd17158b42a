"""Command-line entry point: ``cocodistill <verb> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, emit_defaults, parse_config

log = logging.getLogger("cocodistill")


def _thread_limit():
    n = os.environ.get("COCO_DISTILL_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _load(args):
    exp = parse_config(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        exp.run.seeds.run = args.seed
    return exp


def cmd_train_teacher(args):
    from .train import train_teacher

    exp = _load(args)
    if args.seed is not None:
        exp.run.seeds.teacher = args.seed
    out = os.path.join(args.out, "teacher")
    _, report = train_teacher(exp.run, out)
    print(json.dumps(report, indent=2, sort_keys=True))
    if not report["gate_passed"]:
        log.error("teacher val mIoU %.4f is below the gate %.2f; raise teacher_epochs or check the data config",
                  report["val_miou"], report["gate_miou"])
        return 2
    return 0


def cmd_distill(args):
    from .experiment import teacher_path
    from .train import GateError, load_teacher, run_distillation

    exp = _load(args)
    if args.arm:
        exp.run.arm = args.arm
    if args.no_paraphraser:
        exp.run.paraphraser = False
    tpath = args.teacher or teacher_path(args.out)
    if not os.path.exists(tpath):
        log.error("no teacher checkpoint at %s; run `cocodistill train-teacher` first", tpath)
        return 2
    teacher, t_report = load_teacher(tpath)
    run_dir = os.path.join(args.out, "distill", exp.run.arm, f"seed{exp.run.seeds.run}")
    try:
        _, report, _ = run_distillation(exp.run, teacher, t_report, run_dir)
    except GateError as e:
        log.error("%s", e)
        return 2
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args):
    from .checkpoint import load_network
    from .data import load_split
    from .train import evaluate

    exp = _load(args)
    net, _ = load_network(args.checkpoint)
    d = exp.run.data
    samples = load_split(d.seed, args.split, getattr(d, args.split), d.image_size)
    acc, mi, cm = evaluate(net, samples, exp.run.eval_batch)
    print(json.dumps({"split": args.split, "val_acc" if args.split == "val" else "acc": acc,
                      "val_miou" if args.split == "val" else "miou": mi,
                      "confusion": cm.counts.tolist()}, indent=2))
    return 0


def cmd_ablate(args):
    from .experiment import run_ablation
    from .train import GateError

    exp = _load(args)
    seeds = [args.seed] if args.seed is not None else None
    try:
        run_ablation(exp, args.out, resume=args.resume, seeds=seeds, jobs=args.jobs)
    except (GateError, FileNotFoundError) as e:
        log.error("%s", e)
        return 2
    with open(os.path.join(args.out, "summary.txt")) as fh:
        print(fh.read())
    return 0


def cmd_export_dataset(args):
    from .data import export_dataset

    exp = _load(args)
    d = exp.run.data
    export_dataset(args.out, d.seed, {"train": d.train, "val": d.val, "test": d.test}, d.image_size)
    return 0


def cmd_emit_defaults(args):
    text = emit_defaults(args.preset)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cocodistill", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="YAML config; missing keys take defaults")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, help="run seed (teacher seed for train-teacher)")
        sp.add_argument("--preset", choices=["desk", "full"], default="desk")
        sp.add_argument("--resume", action="store_true", help="skip arms whose report already exists")

    sp = sub.add_parser("train-teacher", help="pre-train the teacher and check the learnability gate")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="train one student arm against a gated teacher")
    common(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (default OUT/teacher/teacher.ccdn)")
    sp.add_argument("--arm", choices=["none", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD"])
    sp.add_argument("--no-paraphraser", action="store_true")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("evaluate", help="recompute ACC / mIoU of a checkpoint on a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"], default="val")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run the arm x seed ablation matrix and write the summary")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-dataset", help="write the synthetic splits as PPM/PGM files")
    common(sp, out_default="dataset")
    sp.set_defaults(func=cmd_export_dataset)

    sp = sub.add_parser("emit-defaults", help="print the fully populated default config")
    sp.add_argument("--preset", choices=["desk", "full"], default="desk")
    sp.add_argument("--out", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_emit_defaults)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    limiter = _thread_limit()
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
