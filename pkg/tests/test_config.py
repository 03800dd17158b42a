import pytest
import yaml

from cocodistill.config import ConfigError, build_config, emit_defaults, parse_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = parse_config(str(p))
    assert cfg.run.coco_weight == 1.0 and cfg.run.adv_weight == 0.1 and cfg.run.n_pairs == 1
    assert cfg.run.clip == 0.01 and cfg.run.gate_miou == 0.9
    assert [a.name for a in cfg.ablation.arms] == ["scratch", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD", "CoCoD-noPM"]


def test_negative_weight_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("run:\n  coco_weight: -1\n")
    with pytest.raises(ConfigError, match="run.coco_weight"):
        parse_config(str(p))


def test_unknown_key_and_type_errors(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("run:\n  optim:\n    lr_studnet: 0.1\n")
    with pytest.raises(ConfigError, match="run.optim.lr_studnet"):
        parse_config(str(p))
    p.write_text("run:\n  epochs: many\n")
    with pytest.raises(ConfigError, match="run.epochs"):
        parse_config(str(p))
    with pytest.raises(ConfigError, match="not found"):
        parse_config(str(tmp_path / "missing.yaml"))


def test_round_trip(tmp_path):
    for preset in ("desk", "full"):
        p = tmp_path / f"{preset}.yaml"
        p.write_text(emit_defaults(preset))
        assert parse_config(str(p), preset) == build_config(preset=preset)
        assert parse_config(str(p)) == build_config(preset=preset)


def test_full_preset():
    cfg = build_config(preset="full").run
    assert cfg.epochs == 200 and cfg.optim.lr_student == 0.03
    with pytest.raises(ConfigError):
        build_config(preset="huge")


def test_validators():
    with pytest.raises(ConfigError, match="n_pairs"):
        build_config({"run": {"n_pairs": 2}})
    with pytest.raises(ConfigError, match="teacher widths"):
        build_config({"run": {"model": {"teacher_widths": [2, 2, 2]}}})
    with pytest.raises(ConfigError, match="unique"):
        build_config({"ablation": {"arms": [{"name": "a", "arm": "none"}, {"name": "a", "arm": "KD"}]}})


def test_digest_tracks_content():
    a, b = build_config().run, build_config({"run": {"epochs": 3}}).run
    assert a.digest() == build_config().run.digest() and a.digest() != b.digest()
    assert a.teacher_key() == build_config({"run": {"arm": "KD"}}).run.teacher_key()


def test_emit_is_yaml():
    d = yaml.safe_load(emit_defaults())
    assert d["run"]["optim"]["schedule"] == "poly"
