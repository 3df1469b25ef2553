"""Experiment configuration: a TOML file with nested sections.

Angles are written in degrees in the file and converted to radians when the
trigger objects are built.
"""

from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import asdict, dataclass, field, fields

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import SYNTHETIC_CLASSES
from .preprocess import PipelineSpec
from .trigger import TRIGGER_KINDS, BallTriggerParams, RotationTriggerParams, WltParams, make_trigger


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source: str = "synthetic"          # "synthetic" or a path to a manifest CSV
    classes: list = field(default_factory=lambda: list(SYNTHETIC_CLASSES))
    per_class_train: int = 40
    per_class_test: int = 20
    points: int = 512
    noise_sigma: float = 0.01
    pose_jitter_deg: float = 0.0
    vary_proportions: bool = False


@dataclass
class PoisonSection:
    rate: float = 0.1
    target: int = 0
    trigger: str = "wlt"


@dataclass
class WltSection:
    anchors: int = 16
    alpha_deg: float = 5.0
    scale: float = 5.0
    bandwidth: float = 0.5
    seed: int = 0
    renormalize: bool = True


@dataclass
class BallSection:
    center: list = field(default_factory=lambda: [0.05, 0.05, 0.05])
    radius: float = 0.05
    ratio: float = 0.01


@dataclass
class RotationSection:
    angle_deg: float = 10.0


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.001
    pipeline: list = field(default_factory=list)


@dataclass
class EvalSection:
    pipeline: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    wlt: WltSection = field(default_factory=WltSection)
    ball: BallSection = field(default_factory=BallSection)
    rotation: RotationSection = field(default_factory=RotationSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    # -- building domain objects ------------------------------------------------

    def wlt_params(self) -> WltParams:
        w = self.wlt
        return WltParams(w.anchors, math.radians(w.alpha_deg), w.scale, w.bandwidth, w.seed, w.renormalize)

    def trigger(self, kind: str | None = None):
        kind = kind or self.poison.trigger
        if kind == "wlt":
            return make_trigger("wlt", self.wlt_params())
        if kind == "ball":
            b = self.ball
            return make_trigger("ball", BallTriggerParams(tuple(b.center), b.radius, b.ratio))
        if kind == "rotation":
            return make_trigger("rotation", RotationTriggerParams(math.radians(self.rotation.angle_deg)))
        raise ConfigError(f"unknown trigger {kind!r}")

    def train_pipeline(self) -> PipelineSpec:
        return PipelineSpec.from_list(self.train.pipeline)

    def eval_pipeline(self) -> PipelineSpec:
        return PipelineSpec.from_list(self.eval.pipeline)

    # -- validation / serialization --------------------------------------------

    def validate(self):
        try:
            if self.poison.trigger not in TRIGGER_KINDS:
                raise ConfigError(f"poison.trigger must be one of {TRIGGER_KINDS}")
            if not 0 <= self.poison.rate < 1:
                raise ConfigError("poison.rate must be in [0, 1)")
            d = self.dataset
            if d.per_class_train < 1 or d.per_class_test < 1:
                raise ConfigError("dataset.per_class_train/test must be >= 1")
            if d.points < 2:
                raise ConfigError("dataset.points must be >= 2")
            if d.source == "synthetic" and not 0 <= self.poison.target < len(d.classes):
                raise ConfigError("poison.target out of range for dataset.classes")
            self.wlt_params()
            for kind in TRIGGER_KINDS:
                self.trigger(kind)
            if self.train.epochs < 1 or self.train.batch_size < 1 or not self.train.lr > 0:
                raise ConfigError("train.epochs, train.batch_size must be >= 1 and train.lr > 0")
            self.train_pipeline()
            self.eval_pipeline()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kwargs = {}
        sections = {f.name: f for f in fields(cls)}
        for key, value in data.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            f = sections[key]
            if isinstance(value, dict):
                section_cls = type(f.default_factory())
                allowed = {sf.name for sf in fields(section_cls)}
                extra = set(value) - allowed
                if extra:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(extra)}")
                try:
                    kwargs[key] = section_cls(**value)
                except TypeError as exc:
                    raise ConfigError(f"[{key}]: {exc}") from exc
            else:
                if f.name not in ("seed", "out"):
                    raise ConfigError(f"[{key}] must be a table")
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_toml(text)
