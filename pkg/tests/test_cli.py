import csv
import json
import os

import pytest
import yaml

from cocodistill.cli import main

TINY = {"run": {"epochs": 2, "teacher_epochs": 1, "paraphraser_epochs": 1, "gate_miou": 0.0, "batch_size": 4,
                "data": {"image_size": 16, "train": 8, "val": 4, "test": 4}},
        "ablation": {"seeds": [0, 1]}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = d / "out"
    assert main(["train-teacher", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_emit_defaults(tmp_path, capsys):
    assert main(["emit-defaults"]) == 0
    assert "coco_weight: 1.0" in capsys.readouterr().out
    p = tmp_path / "d.yaml"
    assert main(["emit-defaults", "--preset", "full", "--out", str(p)]) == 0
    assert yaml.safe_load(p.read_text())["run"]["epochs"] == 200


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("run:\n  bogus: 1\n")
    assert main(["train-teacher", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_missing_teacher_refused(tmp_path, workdir):
    cfg, _ = workdir
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "none")]) == 2
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "none")]) == 2


def test_gate_failure_exit_code(tmp_path, workdir):
    cfg, _ = workdir
    raw = yaml.safe_load(cfg.read_text())
    raw["run"]["gate_miou"] = 1.0
    p = tmp_path / "strict.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert main(["train-teacher", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_summary_contract(workdir):
    _, out = workdir
    rows = _rows(out / "summary.csv")
    assert [r["arm"] for r in rows] == ["scratch", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD", "CoCoD-noPM"]
    assert all(r["seeds"] == "0 1" for r in rows)
    curves = _rows(out / "coco_curves.csv")
    assert set(curves[0]) == {"epoch", "pm_seed0", "pm_seed1", "nopm_seed0", "nopm_seed1"}
    text = (out / "summary.txt").read_text()
    assert "config digest" in text and "platform" in text
    assert (out / "simmaps" / "teacher_enc2.pgm").exists() and (out / "simmaps" / "CoCoD_dec0.pgm").exists()
    for arm in ("scratch", "CoCoD-noPM"):
        assert (out / "arms" / arm / "seed1" / "curve.csv").exists()


def test_resume_is_idempotent(workdir):
    cfg, out = workdir
    before = {p: (out / p).read_bytes() for p in ("summary.csv", "coco_curves.csv")}
    stamp = os.path.getmtime(out / "arms" / "CoCoD" / "seed0" / "student.ccdn")
    assert main(["ablate", "--config", str(cfg), "--out", str(out), "--resume"]) == 0
    assert os.path.getmtime(out / "arms" / "CoCoD" / "seed0" / "student.ccdn") == stamp
    assert all((out / p).read_bytes() == b for p, b in before.items())


def test_scratch_equals_standalone_distill(tmp_path, workdir):
    cfg, out = workdir
    assert main(["distill", "--config", str(cfg), "--out", str(out), "--arm", "none", "--seed", "1"]) == 0
    solo = json.loads((out / "distill" / "none" / "seed1" / "report.json").read_text())
    ablated = json.loads((out / "arms" / "scratch" / "seed1" / "report.json").read_text())
    assert solo == ablated


def test_evaluate_matches_report(workdir, capsys):
    cfg, out = workdir
    run = out / "arms" / "CoCoD+AdvD" / "seed0"
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(run / "student.ccdn")]) == 0
    got = json.loads(capsys.readouterr().out)
    report = json.loads((run / "report.json").read_text())
    assert got["val_miou"] == report["val_miou"] and got["val_acc"] == report["val_acc"]
    last = _rows(run / "curve.csv")[-1]
    assert float(last["val_miou"]) == report["val_miou"]


def test_export_dataset(tmp_path, workdir):
    cfg, _ = workdir
    assert main(["export-dataset", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    assert len(list((tmp_path / "ds" / "train").glob("*_image.ppm"))) == 8


def test_parallel_jobs_match_serial(tmp_path, workdir):
    cfg, out = workdir
    par = tmp_path / "par"
    (par / "teacher").mkdir(parents=True)
    for f in os.listdir(out / "teacher"):
        (par / "teacher" / f).write_bytes((out / "teacher" / f).read_bytes())
    assert main(["ablate", "--config", str(cfg), "--out", str(par), "--jobs", "2"]) == 0
    assert (par / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()
