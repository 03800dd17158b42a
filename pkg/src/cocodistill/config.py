"""Run configuration: defaults, presets, validation and YAML round-trip."""
from __future__ import annotations

import hashlib
import json
import os
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

ARMS = ("none", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD")
FEATURE_ARMS = ("SS", "CMSS", "CoCoD", "CoCoD+AdvD")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TapPairConfig(_Strict):
    shallow: str = "enc2"
    deep: str = "dec0"
    teacher_shallow: Optional[str] = None
    teacher_deep: Optional[str] = None


class DataConfig(_Strict):
    seed: int = 0
    image_size: int = Field(64, ge=8)
    train: int = Field(400, ge=1)
    val: int = Field(50, ge=1)
    test: int = Field(50, ge=1)


class ModelConfig(_Strict):
    teacher_widths: List[int] = [16, 32, 64]
    student_widths: List[int] = [4, 8, 16]
    teacher_depth: int = Field(1, ge=1)
    student_depth: int = Field(1, ge=1)
    disc_widths: List[int] = [8, 16, 32]
    pm_depth: int = Field(2, ge=1)
    pm_kernel: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _teacher_is_larger(self):
        if len(self.teacher_widths) != len(self.student_widths):
            raise ValueError("teacher and student need the same number of stages")
        if any(t < s for t, s in zip(self.teacher_widths, self.student_widths)):
            raise ValueError("teacher widths must be >= student widths stage-wise")
        return self


class OptimConfig(_Strict):
    lr_student: float = Field(0.003, gt=0)
    lr_teacher: float = Field(0.003, gt=0)
    lr_paraphraser: float = Field(0.03, gt=0)
    lr_discriminator: float = Field(0.0002, gt=0)
    poly_power: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0002, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    schedule: Literal["poly", "step50"] = "poly"


class SeedConfig(_Strict):
    teacher: int = 0
    run: int = 0


class RunConfig(_Strict):
    coco_weight: float = Field(1.0, ge=0)
    adv_weight: float = Field(0.1, ge=0)
    n_pairs: int = Field(1, ge=1)
    tap_pairs: List[TapPairConfig] = [TapPairConfig()]
    epochs: int = Field(40, ge=1)
    teacher_epochs: int = Field(60, ge=1)
    paraphraser_epochs: int = Field(30, ge=0)
    batch_size: int = Field(8, ge=1)
    arm: Literal["none", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD"] = "none"
    paraphraser: bool = True
    kd_temperature: float = Field(4.0, gt=0)
    clip: float = Field(0.01, gt=0)
    d_steps: int = Field(1, ge=1)
    normalization: Literal["as-written", "cosine"] = "as-written"
    gate_miou: float = Field(0.90, ge=0, le=1)
    eval_batch: int = Field(25, ge=1)
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    seeds: SeedConfig = SeedConfig()

    @model_validator(mode="after")
    def _pairs_match_n(self):
        if len(self.tap_pairs) != self.n_pairs:
            raise ValueError(f"n_pairs={self.n_pairs} but {len(self.tap_pairs)} tap_pairs given")
        return self

    def uses_features(self):
        return self.arm in FEATURE_ARMS

    def uses_adversary(self):
        return self.arm == "CoCoD+AdvD"

    def teacher_key(self):
        """Hash of everything the teacher checkpoint depends on."""
        d = {"data": self.data.model_dump(), "model": self.model.model_dump(),
             "epochs": self.teacher_epochs, "batch": self.batch_size, "optim": self.optim.model_dump(),
             "seed": self.seeds.teacher}
        return _digest(d)

    def digest(self):
        return _digest(self.model_dump())


class ArmConfig(_Strict):
    name: str
    arm: Literal["none", "SS", "CMSS", "CoCoD", "CoCoD+AdvD", "KD"]
    paraphraser: bool = True


DEFAULT_ARMS = [
    ArmConfig(name="scratch", arm="none"),
    ArmConfig(name="SS", arm="SS"),
    ArmConfig(name="CMSS", arm="CMSS"),
    ArmConfig(name="CoCoD", arm="CoCoD"),
    ArmConfig(name="CoCoD+AdvD", arm="CoCoD+AdvD"),
    ArmConfig(name="KD", arm="KD"),
    ArmConfig(name="CoCoD-noPM", arm="CoCoD", paraphraser=False),
]


class AblationConfig(_Strict):
    arms: List[ArmConfig] = DEFAULT_ARMS
    seeds: List[int] = [0, 1, 2, 3, 4]

    @model_validator(mode="after")
    def _unique(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError(f"arm names must be unique, got {names}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self


class ExperimentConfig(_Strict):
    run: RunConfig = RunConfig()
    ablation: AblationConfig = AblationConfig()


PRESETS = {
    "desk": {},
    "full": {"run": {"epochs": 200, "teacher_epochs": 200,
                     "optim": {"lr_student": 0.03, "lr_teacher": 0.03}}},
}


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _format_error(err, path):
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{key}: {e['msg']}")
    return f"{path}: invalid config\n  " + "\n  ".join(lines)


def build_config(overrides=None, preset="desk", source="<overrides>"):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    raw = _merge(PRESETS[preset], overrides or {})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_error(e, source)) from None


def parse_config(path=None, preset="desk"):
    """Load a YAML config; missing keys take defaults, unknown keys are errors."""
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"{path}: config file not found")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(raw, preset, source=path or "<defaults>")


def emit_defaults(preset="desk"):
    return yaml.safe_dump(build_config(preset=preset).model_dump(), sort_keys=False)
