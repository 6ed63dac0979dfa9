"""Run configuration: a YAML file of sections mirroring the module defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .render import RenderConfig
from .scenegen import SceneConfig, ViewConfig


@dataclass
class ModelSection:
    mesh: str = "zblock"
    symmetry_generators: list | None = None
    symmetry_axial: list | None = None


@dataclass
class DatasetSection:
    train_scenes: int = 50
    test_scenes: int = 20


@dataclass
class DetectSection:
    anchor_sizes: tuple = (16, 24, 32)
    pos_iou: float = 0.5
    neg_iou: float = 0.2
    max_positives: int = 64
    max_negatives: int = 64
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 40
    min_visibility: float = 0.25  # less visible GTs are ignore regions, not targets


@dataclass
class PosehypSection:
    pitch_bins: int = 30
    yaw_bins: int = 13
    roll_bins: int = 30
    depth_bins: int = 140
    hidden: int = 256
    k_per_head: int = 3
    top_n: int = 5
    nms_factor: float = 0.05
    use_offset: bool = True
    use_detection_score: bool = True
    jitter: float = 0.2
    jitter_copies: int = 1
    train_min_visibility: float = 0.25


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    steps: int = 3000
    batch_size: int = 1
    weight_detection: float = 1.0
    weight_offset: float = 1.0
    weight_depth: float = 1.0
    weight_pose: float = 1.0


@dataclass
class JointregSection:
    n_blocks: int = 1
    appearance: int = 64
    hidden: int = 128
    negative_weight: float = 16.0
    keep_threshold: float | None = 0.0  # None keeps every hypothesis
    learning_rate: float = 1e-3
    steps: int = 2000


@dataclass
class EvalSection:
    criterion: str = "sym"
    threshold_factor: float = 0.1
    min_visibility: float = 0.0


SECTIONS = {
    "model": ModelSection, "scene": SceneConfig, "views": ViewConfig, "render": RenderConfig,
    "dataset": DatasetSection, "detect": DetectSection, "posehyp": PosehypSection,
    "train": TrainSection, "jointreg": JointregSection, "eval": EvalSection,
}
# sections that determine the generated dataset bytes
DATA_SECTIONS = ("model", "scene", "views", "render", "dataset")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    scene: SceneConfig = field(default_factory=SceneConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    detect: DetectSection = field(default_factory=DetectSection)
    posehyp: PosehypSection = field(default_factory=PosehypSection)
    train: TrainSection = field(default_factory=TrainSection)
    jointreg: JointregSection = field(default_factory=JointregSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = _as_int(data["seed"], "seed")
        for name, section_cls in SECTIONS.items():
            if name in data:
                kwargs[name] = _section(section_cls, data[name], name)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def section_hash(self, names=DATA_SECTIONS):
        """SHA-256 of the canonical JSON of the given sections."""
        d = self.to_dict()
        payload = {n: d[n] for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _as_int(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return v


def _section(section_cls, values, name):
    if values is None:
        return section_cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for key, v in values.items():
        default = fields[key].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[key] = v
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path=None, overrides=None):
    """Parse a YAML config file (or defaults) and apply dict overrides."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            data.setdefault(key, {})
            data[key] = {**(data[key] or {}), **value}
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
