import json
import math

import numpy as np
import pytest

from cocodistill import autodiff as ad
from cocodistill import similarity as sim
from cocodistill.autodiff import Tensor
from cocodistill.config import build_config
from cocodistill.data import load_split
from cocodistill.nn import NetworkSpec, build_network
from cocodistill.train import (
    CURVE_COLUMNS,
    Distiller,
    GateError,
    TeacherCache,
    combine_losses,
    cross_entropy,
    evaluate,
    run_distillation,
    student_spec,
    tap_pairs,
    total_loss,
    train_paraphrasers,
    train_teacher,
)

TINY = {"epochs": 2, "teacher_epochs": 1, "paraphraser_epochs": 1, "gate_miou": 0.0, "batch_size": 4,
        "data": {"image_size": 16, "train": 8, "val": 4, "test": 4}}


def tiny(**over):
    run = dict(TINY)
    run.update(over)
    return build_config({"run": run}).run


@pytest.fixture(scope="module")
def teacher():
    cfg = tiny()
    return train_teacher(cfg)


def test_combine_losses_arithmetic():
    cfg = tiny()
    assert combine_losses(Tensor(0.5), Tensor(0.25), Tensor(1.0), cfg).item() == pytest.approx(0.65, abs=1e-15)


def test_zero_weights_give_plain_ce(rng):
    cfg = tiny(coco_weight=0.0, adv_weight=0.0)
    l_ce = Tensor(0.731)
    assert combine_losses(l_ce, Tensor(5.0), Tensor(9.0), cfg).item() == 0.731


def test_initial_ce_near_ln2():
    cfg = build_config().run
    net = build_network(student_spec(cfg), 0)
    b = load_split(0, "val", 4, 64)
    out = net.forward(np.stack([s.image for s in b]))
    ce = cross_entropy(out.logits, np.stack([s.mask for s in b])).item()
    assert ce > 0 and abs(ce - math.log(2)) < 0.2


def test_cross_entropy_gradient(rng):
    logits = Tensor(rng.normal(size=(2, 2, 3, 3)))
    masks = rng.integers(0, 2, size=(2, 3, 3))
    assert ad.gradcheck(lambda z: cross_entropy(z, masks), [logits]) < 1e-6


@pytest.mark.parametrize("arm", ["CoCoD+AdvD", "KD", "CMSS"])
def test_total_loss_gradient(rng, arm):
    cfg = tiny(arm=arm)
    student = build_network(NetworkSpec("student", [2, 3, 4], taps=["enc2", "dec0"]), 1)
    D = build_network(NetworkSpec("discriminator", [3], in_channels=5), 2)
    x = rng.uniform(size=(2, 3, 8, 8))
    masks = rng.integers(0, 2, size=(2, 8, 8))
    probs = rng.uniform(size=(2, 2, 8, 8))
    probs /= probs.sum(1, keepdims=True)
    t_taps = {"enc2": Tensor(np.abs(rng.normal(size=(2, 4, 2, 2)))), "dec0": Tensor(np.abs(rng.normal(size=(2, 2, 2, 2))))}

    class View:
        pass

    view = View()
    view.probs, view.taps = Tensor(probs), t_taps
    view.phi = sim.teacher_correlations(t_taps, tap_pairs(cfg), [(2, 2)])

    class Dist(Distiller):
        def __init__(self):
            self.cfg, self.pairs, self.sizes = cfg, tap_pairs(cfg), [(2, 2)]

    dist = Dist()

    def f(*ps):
        return total_loss(student.forward(x), masks, view, D if cfg.uses_adversary() else None, x, cfg, dist)[0]

    assert ad.gradcheck(f, student.parameters()) < 1e-4


def test_teacher_report_and_gate(teacher, tmp_path):
    net, report = teacher
    assert set(report) >= {"val_acc", "val_miou", "gate_passed", "params", "flops"}
    cfg = tiny(gate_miou=1.0)
    with pytest.raises(GateError):
        run_distillation(cfg, net, dict(report, gate_passed=False), None)


def test_teacher_untouched_by_distillation(teacher):
    net, report = teacher
    before = {k: v.copy() for k, v in net.state_dict().items()}
    run_distillation(tiny(arm="CoCoD+AdvD"), net, report, None)
    for k, p in net.params.items():
        assert p.grad is None and p.data.tobytes() == before[k].tobytes()


def test_scratch_matches_plain_supervised(teacher):
    net, report = teacher
    a = run_distillation(tiny(arm="none"), net, report, None)
    b = run_distillation(tiny(arm="CoCoD", coco_weight=0.0), net, report, None)
    assert a[1]["val_miou"] == b[1]["val_miou"]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a[0].state_dict().values(), b[0].state_dict().values()))


def test_run_is_deterministic(teacher, tmp_path):
    net, report = teacher
    outs = []
    for d in ("a", "b"):
        run_distillation(tiny(arm="CoCoD+AdvD"), net, report, str(tmp_path / d))
        outs.append((tmp_path / d / "student.ccdn").read_bytes())
    assert outs[0] == outs[1]
    header = (tmp_path / "a" / "curve.csv").read_text().splitlines()[0]
    assert header.split(",") == CURVE_COLUMNS
    assert json.loads((tmp_path / "a" / "report.json").read_text())["arm"] == "CoCoD+AdvD"


def test_every_arm_runs(teacher):
    net, report = teacher
    cfg = tiny()
    cache = TeacherCache(net, cfg)
    pms, rows = train_paraphrasers(cache, cfg, 0)
    assert rows and all(r["step"] == 1 for r in rows)
    for arm in ("SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD"):
        for pm in (True, False):
            _, rep, rows = run_distillation(tiny(arm=arm, paraphraser=pm), net, report, None, cache, pms if pm else None)
            assert 0.0 <= rep["val_miou"] <= 1.0
            assert rows[-1]["L_coco"] != "0.0"


def test_evaluate_reproduces_report(teacher, tmp_path):
    from cocodistill.checkpoint import load_network

    net, report = teacher
    _, rep, rows = run_distillation(tiny(arm="KD"), net, report, str(tmp_path))
    student, _ = load_network(str(tmp_path / "student.ccdn"))
    acc, mi, _ = evaluate(student, load_split(0, "val", 4, 16))
    assert (acc, mi) == (rep["val_acc"], rep["val_miou"])
    assert rows[-1]["val_miou"] == repr(mi)
