"""Teacher pre-training and the three-step distillation procedure.

Step 1 trains one paraphraser per teacher tap on reconstruction (teacher
frozen). Steps 2 and 3 then alternate per iteration: one discriminator update,
one student update on ``L_ce + coco_weight * L_distill - adv_weight * L_g``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import similarity as sim
from .adversarial import AdversarialPair, disc_step, gen_loss
from .autodiff import ContractError, NonFiniteError, Tensor
from .checkpoint import load_network, save_network
from .data import NUM_CLASSES, batch_iter, load_split
from .metrics import ConfusionMatrix, accuracy, miou, predict_mask
from .nn import NetworkSpec, TapPair, build_network, check_tap_pair, count_flops, count_params
from .optim import SGD, Adam, poly_lr, step50_lr
from .paraphraser import Paraphraser, channel_projection, paraphrase, pm_train_step, project

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["step", "epoch", "lr", "L_ce", "L_coco", "L_g", "L_ad", "L_rec",
                 "val_acc", "val_miou", "wall_seconds"]


class GateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def tap_pairs(cfg):
    return [TapPair(p.shallow, p.deep, p.teacher_shallow, p.teacher_deep) for p in cfg.tap_pairs]


def teacher_spec(cfg):
    taps = sorted({n for p in tap_pairs(cfg) for n in p.teacher})
    m = cfg.model
    return NetworkSpec("teacher", list(m.teacher_widths), 3, NUM_CLASSES, taps, m.teacher_depth)


def student_spec(cfg):
    taps = sorted({n for p in tap_pairs(cfg) for n in p.student})
    m = cfg.model
    return NetworkSpec("student", list(m.student_widths), 3, NUM_CLASSES, taps, m.student_depth)


def disc_spec(cfg):
    return NetworkSpec("discriminator", list(cfg.model.disc_widths), NUM_CLASSES + 3, NUM_CLASSES)


def lr_at(base, cfg, iteration, max_iter, epoch):
    if cfg.optim.schedule == "poly":
        return poly_lr(base, iteration, max_iter, cfg.optim.poly_power)
    return step50_lr(base, epoch)


def cross_entropy(logits, masks):
    """Per-pixel cross-entropy against integer masks, mean over pixels and batch."""
    ls = ad.log_softmax_axis(logits, axis=-3)
    return ad.scale(ad.mean(ad.gather_axis(ls, masks, axis=-3)), -1.0)


def combine_losses(l_ce, l_distill, l_g, cfg):
    """L_ce + coco_weight * L_distill - adv_weight * L_g (absent terms pass 0)."""
    total = ad.as_tensor(l_ce)
    if cfg.coco_weight and l_distill is not None:
        total = ad.add(total, ad.scale(ad.as_tensor(l_distill), cfg.coco_weight))
    if cfg.adv_weight and l_g is not None:
        total = ad.sub(total, ad.scale(ad.as_tensor(l_g), cfg.adv_weight))
    return total


def evaluate(net, samples, batch_size=25):
    cm = ConfusionMatrix(NUM_CLASSES)
    for b in batch_iter(samples, batch_size):
        cm.accumulate(predict_mask(net.forward(b.images).probs.data), b.masks)
    return accuracy(cm), miou(cm), cm


def write_curve(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CURVE_COLUMNS})


def _row(step, epoch, lr, **vals):
    row = {"step": step, "epoch": epoch, "lr": repr(float(lr))}
    for k in CURVE_COLUMNS[3:]:
        v = vals.get(k)
        row[k] = "" if v is None else repr(float(v))
    return row


# ------------------------------------------------------------------ teacher


def train_teacher(cfg, out_dir=None):
    """Plain supervised training of the teacher; reports whether it clears the gate."""
    train = load_split(cfg.data.seed, "train", cfg.data.train, cfg.data.image_size)
    val = load_split(cfg.data.seed, "val", cfg.data.val, cfg.data.image_size)
    net = build_network(teacher_spec(cfg), derive_seed(cfg.seeds.teacher, 11))
    opt = Adam(net.parameters(), cfg.optim.lr_teacher, cfg.optim.weight_decay)
    per_epoch = -(-len(train) // cfg.batch_size)
    max_iter = cfg.teacher_epochs * per_epoch
    it, rows, t0 = 0, [], time.time()
    for epoch in range(cfg.teacher_epochs):
        losses = []
        for b in batch_iter(train, cfg.batch_size, derive_seed(cfg.seeds.teacher, 12, epoch), augment=True):
            opt.lr = lr_at(cfg.optim.lr_teacher, cfg, it, max_iter, epoch)
            it += 1
            with ad.Tape():
                loss = cross_entropy(net.forward(b.images).logits, b.masks)
                ad.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        acc, mi, _ = evaluate(net, val, cfg.eval_batch)
        rows.append(_row(3, epoch, opt.lr, L_ce=np.mean(losses), val_acc=acc, val_miou=mi,
                         wall_seconds=time.time() - t0))
        log.info("teacher epoch %d  L_ce %.4f  val acc %.4f  mIoU %.4f", epoch, np.mean(losses), acc, mi)
    acc, mi, _ = evaluate(net, val, cfg.eval_batch)
    report = {
        "role": "teacher",
        "val_acc": acc,
        "val_miou": mi,
        "gate_miou": cfg.gate_miou,
        "gate_passed": bool(mi >= cfg.gate_miou),
        "teacher_key": cfg.teacher_key(),
        "params": count_params(net),
        "flops": count_flops(net, (3, cfg.data.image_size, cfg.data.image_size)),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_network(os.path.join(out_dir, "teacher.ccdn"), net, {"report": report})
        write_curve(os.path.join(out_dir, "curve.csv"), rows)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return net, report


def load_teacher(path):
    net, info = load_network(path)
    report = info.get("report", {})
    return net, report


def require_gate(report):
    if not report.get("gate_passed"):
        raise GateError(
            f"teacher did not pass the learnability gate (val mIoU {report.get('val_miou', float('nan')):.4f} "
            f"< {report.get('gate_miou', 0.9)}); run `cocodistill train-teacher` until it does"
        )


# ------------------------------------------------------------------ teacher cache


class TeacherCache:
    """Frozen-teacher outputs for every training sample under every flip.

    Tap maps are stored already pooled to the size each tap pair is compared
    at, so downstream code never touches full-resolution teacher features.
    """

    FLIPS = ((False, False), (False, True), (True, False), (True, True))

    def __init__(self, teacher, cfg, batch_size=8):
        from .data import apply_flips

        self.pairs = tap_pairs(cfg)
        size = cfg.data.image_size
        student = build_network(student_spec(cfg), 0)
        for p in self.pairs:
            check_tap_pair(teacher, student, p, size, size)
        t_shapes = teacher.tap_shapes(size, size)
        s_shapes = student.tap_shapes(size, size)
        self.sizes = {}
        for p in self.pairs:
            hw = min([t_shapes[n][1:] for n in p.teacher] + [s_shapes[n][1:] for n in p.student],
                     key=lambda s: s[0] * s[1])
            for n in p.teacher:
                self.sizes[n] = hw
        self.channels = {n: t_shapes[n][0] for n in self.sizes}
        samples = load_split(cfg.data.seed, "train", cfg.data.train, size)
        n = len(samples)
        self.probs = np.zeros((n, 4, NUM_CLASSES, size, size))
        self.taps = {k: np.zeros((n, 4, self.channels[k]) + self.sizes[k]) for k in self.sizes}
        jobs = [(i, f) for i in range(n) for f in range(4)]
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start : start + batch_size]
            x = np.stack([apply_flips(samples[i], *self.FLIPS[f]).image for i, f in chunk])
            out = teacher.forward(x)
            pooled = {k: ad.pool_resize(out.taps[k], self.sizes[k]).data for k in self.sizes}
            for row, (i, f) in enumerate(chunk):
                self.probs[i, f] = out.probs.data[row]
                for k in self.sizes:
                    self.taps[k][i, f] = pooled[k][row]

    @staticmethod
    def _index(keys):
        idx = np.array([k[0] for k in keys])
        flip = np.array([int(k[1]) * 2 + int(k[2]) for k in keys])
        return idx, flip

    def lookup(self, keys):
        idx, flip = self._index(keys)
        return self.probs[idx, flip], {k: v[idx, flip] for k, v in self.taps.items()}

    def unflipped_taps(self):
        return {k: v[:, 0] for k, v in self.taps.items()}


# ------------------------------------------------------------------ paraphrasers


def train_paraphrasers(cache, cfg, seed):
    """Step 1: one paraphraser per teacher tap, trained jointly on reconstruction."""
    student = build_network(student_spec(cfg), 0)
    size = cfg.data.image_size
    s_shapes = student.tap_shapes(size, size)
    code = {}
    for p in cache.pairs:
        for t_name, s_name in zip(p.teacher, p.student):
            code[t_name] = s_shapes[s_name][0]
    pms = {}
    for j, name in enumerate(sorted(cache.sizes)):
        pms[name] = Paraphraser(cache.channels[name], code[name], derive_seed(seed, 31, j),
                                cfg.model.pm_depth, cfg.model.pm_kernel)
    opts = {k: SGD(pm.parameters(), cfg.optim.lr_paraphraser, cfg.optim.momentum, cfg.optim.weight_decay)
            for k, pm in pms.items()}
    feats = cache.unflipped_taps()
    n = next(iter(feats.values())).shape[0]
    per_epoch = -(-n // cfg.batch_size)
    max_iter = max(cfg.paraphraser_epochs * per_epoch, 1)
    rows, it = [], 0
    for epoch in range(cfg.paraphraser_epochs):
        order = np.random.Generator(np.random.PCG64(derive_seed(seed, 32, epoch))).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = lr_at(cfg.optim.lr_paraphraser, cfg, it, max_iter, epoch)
            it += 1
            total = 0.0
            for k, pm in pms.items():
                opts[k].lr = lr
                total += pm_train_step(pm, Tensor(feats[k][idx]), opts[k])
            losses.append(total / len(pms))
        rows.append(_row(1, epoch, lr, L_rec=np.mean(losses)))
        log.info("paraphraser epoch %d  L_rec %.6f", epoch, np.mean(losses))
    for pm in pms.values():
        pm.freeze()
    return pms, rows


# ------------------------------------------------------------------ distillation


@dataclass
class TeacherView:
    probs: Tensor
    taps: dict
    phi: list | None = None  # per-pair teacher correlations, CoCo arms only


class Distiller:
    """Holds the frozen teacher side of one distillation run."""

    def __init__(self, cfg, cache, paraphrasers=None):
        self.cfg = cfg
        self.cache = cache
        self.pairs = tap_pairs(cfg)
        self.paraphrasers = paraphrasers
        self.pm_ready = paraphrasers is not None and all(p.mode == "paraphrasing" for p in paraphrasers.values())
        self.projections = {}
        if cfg.uses_features() and not cfg.paraphraser:
            student = build_network(student_spec(cfg), 0)
            s_shapes = student.tap_shapes(cfg.data.image_size, cfg.data.image_size)
            for p in self.pairs:
                for t_name, s_name in zip(p.teacher, p.student):
                    self.projections[t_name] = channel_projection(
                        cache.channels[t_name], s_shapes[s_name][0], derive_seed(cfg.seeds.run, 41))
        self.sizes = [cache.sizes[p.teacher[0]] for p in self.pairs]
        self._phi = {}  # (idx, hflip, vflip) -> per-pair teacher correlation

    def _teacher_taps(self, taps):
        out = {}
        for name, f in taps.items():
            if self.cfg.paraphraser:
                if not self.pm_ready:
                    raise ContractError("distillation loss evaluated before paraphraser training completed")
                out[name] = paraphrase(self.paraphrasers[name], f)
            else:
                out[name] = project(f, self.projections[name])
        return out

    def teacher_view(self, keys):
        probs, taps = self.cache.lookup(keys)
        if not self.cfg.uses_features():
            return TeacherView(Tensor(probs), {})
        if self.cfg.arm not in ("CoCoD", "CoCoD+AdvD"):
            return TeacherView(Tensor(probs), self._teacher_taps(taps))
        # the frozen teacher side is a pure function of the sample key: memoize it
        keys = [tuple(k) for k in keys]
        missing = [i for i, k in enumerate(keys) if k not in self._phi]
        if missing:
            sub = self._teacher_taps({k: v[missing] for k, v in taps.items()})
            phis = sim.teacher_correlations(sub, self.pairs, self.sizes, self.cfg.normalization)
            for row, i in enumerate(missing):
                self._phi[keys[i]] = [ph[row] for ph in phis]
        phi = [np.array([self._phi[k][j] for k in keys]) for j in range(len(self.pairs))]
        return TeacherView(Tensor(probs), None, phi)

    def distill_term(self, student_out, teacher):
        arm = self.cfg.arm
        norm = self.cfg.normalization
        if arm in ("CoCoD", "CoCoD+AdvD"):
            return sim.coco_loss_cached(teacher.phi, student_out.taps, self.pairs, self.sizes, norm)
        if arm in ("SS", "CMSS"):
            return sim.similarity_mimic_loss(teacher.taps, student_out.taps, self.pairs, arm == "CMSS", norm)
        if arm == "KD":
            T = self.cfg.kd_temperature
            return ad.scale(sim.kd_soft_loss(student_out.probs, teacher.probs, T), T * T)
        return None


def total_loss(student_out, masks, teacher, D, X, cfg, distiller):
    """Full student objective; returns the loss tensor and its scalar parts."""
    l_ce = cross_entropy(student_out.logits, masks)
    l_distill = distiller.distill_term(student_out, teacher) if distiller else None
    l_g = gen_loss(D, student_out.probs, X) if D is not None else None
    total = combine_losses(l_ce, l_distill, l_g, cfg)
    parts = {"L_ce": l_ce.item(),
             "L_coco": 0.0 if l_distill is None else l_distill.item(),
             "L_g": 0.0 if l_g is None else l_g.item()}
    return total, parts


def run_distillation(cfg, teacher, teacher_report, out_dir=None, cache=None, paraphrasers=None, pm_rows=None):
    """Train a student under ``cfg.arm``; returns (student, report, curve rows)."""
    require_gate(teacher_report)
    size = cfg.data.image_size
    train = load_split(cfg.data.seed, "train", cfg.data.train, size)
    val = load_split(cfg.data.seed, "val", cfg.data.val, size)
    seed = cfg.seeds.run
    distiller = None
    rows = []
    needs_teacher = cfg.arm != "none"
    if needs_teacher:
        cache = cache or TeacherCache(teacher, cfg)
        if cfg.uses_features() and cfg.paraphraser and paraphrasers is None:
            paraphrasers, pm_rows = train_paraphrasers(cache, cfg, seed)
        if cfg.uses_features() and cfg.paraphraser:
            rows.extend(pm_rows or [])
        distiller = Distiller(cfg, cache, paraphrasers if cfg.paraphraser else None)

    student = build_network(student_spec(cfg), derive_seed(seed, 21))
    opt = Adam(student.parameters(), cfg.optim.lr_student, cfg.optim.weight_decay)
    adv = None
    if cfg.uses_adversary():
        adv = AdversarialPair(build_network(disc_spec(cfg), derive_seed(seed, 22)), cfg.clip, cfg.d_steps)
        d_opt = Adam(adv.D.parameters(), cfg.optim.lr_discriminator, cfg.optim.weight_decay)

    per_epoch = -(-len(train) // cfg.batch_size)
    max_iter = cfg.epochs * per_epoch
    it, t0 = 0, time.time()
    for epoch in range(cfg.epochs):
        acc_parts = {"L_ce": [], "L_coco": [], "L_g": [], "L_ad": []}
        for b in batch_iter(train, cfg.batch_size, derive_seed(seed, 23, epoch), augment=True):
            lr = lr_at(cfg.optim.lr_student, cfg, it, max_iter, epoch)
            opt.lr = lr
            try:
                teacher_view = distiller.teacher_view(b.keys) if distiller else None
                with ad.Tape():
                    out = student.forward(b.images)
                    if adv is not None:
                        d_opt.lr = lr_at(cfg.optim.lr_discriminator, cfg, it, max_iter, epoch)
                        for _ in range(adv.d_steps):
                            acc_parts["L_ad"].append(
                                disc_step(adv, teacher_view.probs, out.probs.detach(), b.images, d_opt))
                    loss, parts = total_loss(out, b.masks, teacher_view, adv.D if adv else None,
                                             b.images, cfg, distiller)
                    ad.backward(loss)
                opt.step()
                opt.zero_grad()
            except NonFiniteError as e:
                raise TrainingError(f"{cfg.arm} run, epoch {epoch}, iteration {it}: {e}") from e
            it += 1
            for k, v in parts.items():
                acc_parts[k].append(v)
        acc, mi, _ = evaluate(student, val, cfg.eval_batch)
        means = {k: (np.mean(v) if v else 0.0) for k, v in acc_parts.items()}
        rows.append(_row(3, epoch, lr, **means, val_acc=acc, val_miou=mi, wall_seconds=time.time() - t0))
        log.info("%s epoch %d  L_ce %.4f  L_coco %.3g  L_g %.3g  L_ad %.3g  val mIoU %.4f",
                 cfg.arm, epoch, means["L_ce"], means["L_coco"], means["L_g"], means["L_ad"], mi)

    report = {
        "arm": cfg.arm,
        "paraphraser": cfg.paraphraser,
        "seed": seed,
        "val_acc": acc,
        "val_miou": mi,
        "params": count_params(student),
        "flops": count_flops(student, (3, size, size)),
        "config_digest": cfg.digest(),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_network(os.path.join(out_dir, "student.ccdn"), student, {"report": report})
        write_curve(os.path.join(out_dir, "curve.csv"), rows)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return student, report, rows
