"""Declarative pipeline configuration: one JSON document with a section per stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig
from .data import PreprocessConfig
from .gan import GanConfig
from .trainer import EvalConfig, TrainConfig

# fields that never change results and so stay out of the hash
UNHASHED = {"output_dir", "workers"}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass
class DataConfig:
    root: Optional[str] = None
    n_identities: int = 30
    n_latent_clusters: int = 3
    images_per_identity: int = 10
    image_size: int = 32
    n_cameras: int = 3
    keep_distractors: bool = True


@dataclass
class ReportConfig:
    ks: tuple[int, ...] = (1, 2, 3, 4, 5)
    generated_totals: tuple[int, ...] = (0, 150, 300, 600)


# stage name -> (sections, train keys) feeding its hash; upstream hashes are chained
STAGE_ORDER = ("synth", "train-features", "cluster", "gan", "generate", "train", "eval")
STAGE_INPUTS = {
    "synth": (("data",), ()),
    "train-features": (("preprocess", "backbone"), ("stage1_epochs", "stage1_lr", "stage1_momentum",
                                                   "batch_size", "weight_decay", "validation_holdout")),
    "cluster": ((), ("K", "cluster_layer", "silhouette_ks", "kmeans_max_iter", "support_mode")),
    "gan": (("gan",), ("generator",)),
    "generate": ((), ("generated_total", "generator", "pseudo_noise", "allocation")),
    "train": ((), ("scheme", "epochs", "base_lr", "inv_gamma", "inv_power", "momentum",
                   "generated_loss_scale")),
    "eval": (("eval",), ()),
}


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    backbone: dict = field(default_factory=dict)
    gan: GanConfig = field(default_factory=GanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        # store every backbone field so equal configs hash equally however they were spelled
        full = BackboneConfig(n_classes=1, **{k: v for k, v in self.backbone.items() if k != "n_classes"})
        self.backbone = {k: v for k, v in full.to_json().items() if k != "n_classes"}

    @classmethod
    def desk(cls) -> "PipelineConfig":
        """Synthetic 30-identity corpus at 32 px; minutes per run on one CPU core."""
        return cls(
            preprocess=PreprocessConfig.desk(),
            backbone={"architecture": "small_convnet", "input_size": 32},
            gan=GanConfig.desk(base_channels=32, epochs=160),
            train=TrainConfig(epochs=20, stage1_epochs=4),
        )

    @classmethod
    def market(cls, root: str = "Market-1501") -> "PipelineConfig":
        """Full-scale settings for a Market-1501 tree."""
        return cls(
            data=DataConfig(root=root),
            backbone={"architecture": "resnet_style", "input_size": 224},
            gan=GanConfig(),
            train=TrainConfig(generated_total=12000, validation_holdout=True),
        )

    def backbone_config(self, n_classes: int) -> BackboneConfig:
        return BackboneConfig(n_classes=n_classes, **self.backbone)

    def gan_config(self) -> GanConfig:
        return self.gan

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "preprocess": asdict(self.preprocess),
            "backbone": dict(self.backbone),
            "gan": {k: v for k, v in self.gan.to_json().items() if k != "seed"},
            "train": {k: v for k, v in self.train.to_json().items() if k != "seed"},
            "eval": self.eval.to_json(),
            "report": {k: list(v) for k, v in asdict(self.report).items()},
        }

    def hash(self) -> str:
        return _digest(_strip(self.to_json()))

    def stage_hash(self, stage: str) -> str:
        """Hash of everything a stage's outputs depend on, chained through upstream stages."""
        cfg = _strip(self.to_json())
        h = _digest({"seed": self.seed})
        for name in STAGE_ORDER:
            sections, keys = STAGE_INPUTS[name]
            part = {s: cfg[s] for s in sections}
            part["train"] = {k: cfg["train"][k] for k in keys}
            h = _digest({"up": h, "own": part})
            if name == stage:
                return h
        raise KeyError(stage)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _strip(d: dict) -> dict:
    if isinstance(d, dict):
        return {k: _strip(v) for k, v in d.items() if k not in UNHASHED}
    return d


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# strict parsing


def _check_type(value, tp, path: str):
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: expected {tp}, got {value!r}")
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        inner = typing.get_args(tp)[0] if typing.get_args(tp) else Any
        return tuple(_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return value
    return value


def _build(cls, raw, path: str, base=None, exclude=(), fixed=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    for key in raw:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = asdict(base) if base is not None else {}
    for k in exclude:
        kwargs.pop(k, None)
    kwargs.update(fixed or {})
    for key, value in raw.items():
        kwargs[key] = _check_type(value, hints[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def from_dict(raw: dict, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Validate ``raw`` on top of ``base`` (the desk preset by default)."""
    base = base or PipelineConfig.desk()
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        base = PRESETS[preset]()
    sections = {
        "data": (DataConfig, ()),
        "preprocess": (PreprocessConfig, ()),
        "gan": (GanConfig, ("seed",)),
        "train": (TrainConfig, ("seed",)),
        "eval": (EvalConfig, ()),
        "report": (ReportConfig, ()),
    }
    out = dataclasses.replace(base)
    for key, value in raw.items():
        if key == "preset":
            continue
        if key == "seed":
            out.seed = _check_type(value, int, "seed")
        elif key == "output_dir":
            out.output_dir = _check_type(value, Optional[str], "output_dir")
        elif key == "backbone":
            bb = _build(BackboneConfig, value, "backbone",
                        BackboneConfig(n_classes=1, **base.backbone), exclude=("n_classes",),
                        fixed={"n_classes": 1})
            out.backbone = {k: v for k, v in bb.to_json().items() if k != "n_classes"}
        elif key in sections:
            cls, exclude = sections[key]
            setattr(out, key, _build(cls, value, key, getattr(base, key), exclude))
        else:
            raise ConfigError(f"{key}: unknown key")
    if out.train.scheme == "all_in_one" and not out.backbone.get("extra_class", False):
        raise ConfigError("backbone.extra_class: must be true for the all_in_one scheme")
    if out.data.root is None and out.data.n_identities % out.data.n_latent_clusters:
        raise ConfigError("data.n_identities: must be divisible by data.n_latent_clusters")
    return out


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {path}: {e}") from e
    return from_dict(raw)


PRESETS = {"desk": PipelineConfig.desk, "market": PipelineConfig.market}
