"""Ablation matrix orchestration and report emission."""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import similarity as sim
from .checkpoint import load_network, save_network
from .config import FEATURE_ARMS, ArmConfig, SeedConfig
from .data import load_split
from .paraphraser import Paraphraser
from .train import (
    TeacherCache,
    load_teacher,
    require_gate,
    run_distillation,
    train_paraphrasers,
    write_curve,
)

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["arm", "switch", "paraphraser", "seeds", "acc_mean", "acc_sd",
                   "miou_mean", "miou_sd", "params", "flops"]


@dataclass
class ArmResult:
    name: str
    arm: str
    paraphraser: bool
    reports: dict = field(default_factory=dict)  # seed -> report
    dirs: dict = field(default_factory=dict)  # seed -> run directory


def arm_config(run_cfg, arm, seed):
    return run_cfg.model_copy(update={
        "arm": arm.arm,
        "paraphraser": arm.paraphraser,
        "seeds": SeedConfig(teacher=run_cfg.seeds.teacher, run=seed),
    })


_PM_ARM = ArmConfig(name="pm", arm="CoCoD")


def teacher_path(out_dir):
    return os.path.join(out_dir, "teacher", "teacher.ccdn")


def _pm_dir(out_dir, seed):
    return os.path.join(out_dir, "paraphraser", f"seed{seed}")


def _load_or_train_paraphrasers(cache, cfg, seed, out_dir, resume):
    d = _pm_dir(out_dir, seed)
    index = os.path.join(d, "index.json")
    if resume and os.path.exists(index):
        with open(index) as fh:
            info = json.load(fh)
        if info.get("config_digest") == _pm_digest(cfg):
            pms = {name: Paraphraser.from_network(load_network(os.path.join(d, f))[0])
                   for name, f in info["files"].items()}
            return pms, info["rows"]
    pms, rows = train_paraphrasers(cache, cfg, seed)
    os.makedirs(d, exist_ok=True)
    files = {}
    for name, pm in pms.items():
        files[name] = f"{name}.ccdn"
        save_network(os.path.join(d, files[name]), pm.net, {"teacher_tap": name})
    with open(index, "w") as fh:
        json.dump({"files": files, "rows": rows, "config_digest": _pm_digest(cfg)}, fh, indent=2, sort_keys=True)
    write_curve(os.path.join(d, "curve.csv"), rows)
    return pms, rows


def _pm_digest(cfg):
    neutral = cfg.model_copy(update={"arm": "CoCoD", "paraphraser": True})
    return neutral.digest()


def _resumed(cfg, run_dir, resume):
    rpath = os.path.join(run_dir, "report.json")
    if resume and os.path.exists(rpath):
        with open(rpath) as fh:
            report = json.load(fh)
        if report.get("config_digest") == cfg.digest():
            return report
    return None


class _Runner:
    """Per-process state: teacher, its cache and the paraphrasers of each seed."""

    def __init__(self, run_cfg, out_dir):
        self.run_cfg = run_cfg
        self.out_dir = out_dir
        self.teacher, self.t_report = load_teacher(teacher_path(out_dir))
        self.cache = None

    def __call__(self, arm, seed):
        cfg = arm_config(self.run_cfg, arm, seed)
        run_dir = os.path.join(self.out_dir, "arms", arm.name, f"seed{seed}")
        pms = pm_rows = None
        if cfg.arm != "none":
            self.cache = self.cache or TeacherCache(self.teacher, self.run_cfg)
        if cfg.uses_features() and cfg.paraphraser:
            pms, pm_rows = _load_or_train_paraphrasers(self.cache, cfg, seed, self.out_dir, True)
        log.info("running %s seed %d", arm.name, seed)
        _, report, _ = run_distillation(cfg, self.teacher, self.t_report, run_dir, self.cache, pms, pm_rows)
        return report


_worker = None


def _worker_init(run_json, out_dir):
    global _worker
    from .config import RunConfig

    _worker = _Runner(RunConfig.model_validate_json(run_json), out_dir)


def _worker_run(arm_json, seed):
    from .config import ArmConfig

    return _worker(ArmConfig.model_validate_json(arm_json), seed)


def run_ablation(exp_cfg, out_dir, resume=False, seeds=None, jobs=1):
    """Run every arm x seed of the plan; returns ArmResults in plan order.

    With ``jobs > 1`` runs go to that many worker processes; each run writes
    only its own directory, so results do not depend on the job count.
    """
    run_cfg = exp_cfg.run
    seeds = list(seeds if seeds is not None else exp_cfg.ablation.seeds)
    arms = exp_cfg.ablation.arms
    tpath = teacher_path(out_dir)
    if not os.path.exists(tpath):
        raise FileNotFoundError(f"no teacher checkpoint at {tpath}; run `cocodistill train-teacher --out {out_dir}` first")
    teacher, t_report = load_teacher(tpath)
    require_gate(t_report)

    results = [ArmResult(a.name, a.arm, a.paraphraser) for a in arms]
    todo = []
    for arm, res in zip(arms, results):
        for seed in seeds:
            cfg = arm_config(run_cfg, arm, seed)
            res.dirs[seed] = os.path.join(out_dir, "arms", arm.name, f"seed{seed}")
            report = _resumed(cfg, res.dirs[seed], resume)
            if report is not None:
                log.info("resume: %s seed %d already complete", arm.name, seed)
                res.reports[seed] = report
            else:
                todo.append((res, arm, seed))

    if jobs <= 1 or len(todo) <= 1:
        runner = _Runner(run_cfg, out_dir)
        for res, arm, seed in todo:
            res.reports[seed] = runner(arm, seed)
    else:
        # paraphrasers are shared by arms of one seed: train them once, up front
        pm_seeds = sorted({s for _, a, s in todo if a.paraphraser and a.arm in FEATURE_ARMS})
        if pm_seeds:
            cache = TeacherCache(teacher, run_cfg)
            for s in pm_seeds:
                _load_or_train_paraphrasers(cache, arm_config(run_cfg, _PM_ARM, s), s, out_dir, True)
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(run_cfg.model_dump_json(), out_dir)) as pool:
            futs = [(res, seed, pool.submit(_worker_run, arm.model_dump_json(), seed)) for res, arm, seed in todo]
            for res, seed, fut in futs:
                res.reports[seed] = fut.result()
    emit_report(results, out_dir, exp_cfg, teacher, t_report, seeds)
    return results


def _fmt(x):
    return repr(float(x))


def summarize(results):
    rows = []
    for r in results:
        seeds = sorted(r.reports)
        acc = np.array([r.reports[s]["val_acc"] for s in seeds])
        mi = np.array([r.reports[s]["val_miou"] for s in seeds])
        first = r.reports[seeds[0]]
        rows.append({
            "arm": r.name,
            "switch": r.arm,
            "paraphraser": str(r.paraphraser).lower(),
            "seeds": " ".join(str(s) for s in seeds),
            "acc_mean": _fmt(acc.mean()),
            "acc_sd": _fmt(acc.std(ddof=1) if len(acc) > 1 else 0.0),
            "miou_mean": _fmt(mi.mean()),
            "miou_sd": _fmt(mi.std(ddof=1) if len(mi) > 1 else 0.0),
            "params": first["params"],
            "flops": first["flops"],
        })
    return rows


def read_curve(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def coco_series(run_dir):
    """Per-epoch L_coco of the student-training step."""
    return np.array([float(r["L_coco"]) for r in read_curve(os.path.join(run_dir, "curve.csv")) if r["step"] == "3"])


def tail_variance(series, fraction=0.2):
    k = max(2, int(round(len(series) * fraction)))
    return float(np.var(series[-k:]))


def emit_report(results, out_dir, exp_cfg, teacher, t_report, seeds):
    if not results or not any(r.reports for r in results):
        raise ValueError("no completed arms to report")
    os.makedirs(out_dir, exist_ok=True)
    rows = summarize(results)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    by_name = {r.name: r for r in results}
    pairing = []
    if "CoCoD" in by_name and "CoCoD-noPM" in by_name:
        on, off = by_name["CoCoD"], by_name["CoCoD-noPM"]
        common = [s for s in seeds if s in on.dirs and s in off.dirs]
        with open(os.path.join(out_dir, "coco_curves.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            series = {(lab, s): coco_series(arm.dirs[s]) for lab, arm in (("pm", on), ("nopm", off)) for s in common}
            w.writerow(["epoch"] + [f"{lab}_seed{s}" for lab, s in series])
            n = min(len(v) for v in series.values())
            for e in range(n):
                w.writerow([e] + [_fmt(v[e]) for v in series.values()])
        v_on = [tail_variance(series[("pm", s)]) for s in common]
        v_off = [tail_variance(series[("nopm", s)]) for s in common]
        pairing = [f"L_coco tail variance (last 20% epochs), median over seeds: "
                   f"with paraphraser {_fmt(np.median(v_on))}, bypassed {_fmt(np.median(v_off))}"]

    _dump_similarity_maps(results, out_dir, exp_cfg, teacher)

    header = [
        "# cocodistill ablation summary",
        f"# config digest: {exp_cfg.run.digest()}",
        f"# seeds: {' '.join(str(s) for s in seeds)}",
        f"# platform: {platform.python_implementation()} {platform.python_version()} "
        f"numpy {np.__version__} {platform.machine()}",
        f"# teacher: val mIoU {_fmt(t_report['val_miou'])} acc {_fmt(t_report['val_acc'])} "
        f"params {t_report['params']} flops {t_report['flops']}",
    ]
    lines = header + [""] + [f"{'arm':<12} {'ACC':>17} {'mIoU':>17} {'params':>8} {'FLOPs':>10}"]
    for r in rows:
        lines.append(f"{r['arm']:<12} {float(r['acc_mean']):.4f} ± {float(r['acc_sd']):.4f}  "
                     f"{float(r['miou_mean']):.4f} ± {float(r['miou_sd']):.4f}  {r['params']:>8} {r['flops']:>10}")
    lines += [""] + pairing
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _dump_similarity_maps(results, out_dir, exp_cfg, teacher):
    """Channel-mixed similarity maps of every tap for one fixed validation image."""
    cfg = exp_cfg.run
    probe = load_split(cfg.data.seed, "val", cfg.data.val, cfg.data.image_size)[0].image
    d = os.path.join(out_dir, "simmaps")
    os.makedirs(d, exist_ok=True)

    def dump(label, taps):
        size = sim.common_size(*taps.values())
        for name, f in taps.items():
            m = sim.similarity_map(sim.align(f, size), cfg.normalization)
            sim.dump_similarity_map(m, os.path.join(d, f"{label}_{name}.pgm"))

    dump("teacher", teacher.forward(probe).taps)
    for r in results:
        seed = sorted(r.reports)[0]
        student, _ = load_network(os.path.join(r.dirs[seed], "student.ccdn"))
        dump(r.name, student.forward(probe).taps)
