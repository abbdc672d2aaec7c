"""Run configuration: defaults, config-file parsing and flag overrides.

Config files are sectioned key=value text (INI-style sections mirroring
the dataclasses below). Command-line flags override file values, which
override defaults. Every constraint is validated up front so a pipeline
run fails before any work starts, and the effective config has a stable
hash that gets embedded in every artifact it produces.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from vdk.classifier import ARCHS, default_hparams
from vdk.codebook import METRICS
from vdk.datasets import DATASET_NAMES, DEFAULT_SHAPE_CLASSES, SHAPE_NAMES
from vdk.debate import MASK_MODES, MODES
from vdk.errors import ConfigurationError
from vdk.training import DIVERSITY_SIGNS

DATA_ROOT_ENV = "VDK_DATA_ROOT"


@dataclass
class RunSection:
    dataset: str = "shape"
    arch: str = "vanilla"
    seed: int = 0
    data_root: str = ""
    out_root: str = "outputs"

    def validate(self):
        if self.dataset not in DATASET_NAMES:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}")


@dataclass
class ClassifierSection:
    epochs: int = 0  # 0 = use the per-arch published recipe
    lr: float = 1e-3
    weight_decay: float = -1.0  # <0 = per-arch default
    batch_size: int = 64
    conv_depth: int = 7

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError("classifier.lr must be > 0")
        if self.conv_depth not in (5, 7):
            raise ConfigurationError("classifier.conv_depth must be 5 or 7")


@dataclass
class CodebookSection:
    size: int = 0  # 0 = per-dataset default (64, afhq: 512)
    metric: str = "euclidean"
    hessian_beta: float = 0.05
    hessian_probes: int = 2
    hessian_eps: float = 0.1
    commitment: float = 0.25
    distill_epochs: int = 20
    distill_lr: float = 1e-2
    distill_batch_size: int = 64

    def validate(self):
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown codebook metric {self.metric!r}")
        if self.size and self.size < 2:
            raise ConfigurationError("codebook.size must be >= 2")
        if self.hessian_beta < 0:
            raise ConfigurationError("codebook.hessian_beta must be >= 0")
        if self.hessian_probes < 1:
            raise ConfigurationError("codebook.hessian_probes must be >= 1")


@dataclass
class DebateSection:
    n: int = 10
    tau: float = 0.5
    mode: str = "committed"
    allow_repeats: bool = False
    mask_mode: str = "remove_played"

    def validate(self):
        if self.n < 1:
            raise ConfigurationError("debate.n must be >= 1")
        if not (0.0 < self.tau < 1.0):
            raise ConfigurationError(
                "debate.tau must lie strictly between 0 and 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown debate mode {self.mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"unknown mask mode {self.mask_mode!r}")


@dataclass
class PlayersSection:
    hidden_size: int = 256

    def validate(self):
        if self.hidden_size < 1:
            raise ConfigurationError("players.hidden_size must be >= 1")


@dataclass
class TrainingSection:
    mc_samples: int = 8
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.01
    lambda_ad: float = 0.5
    diversity_sign: str = "paper"
    lr: float = 1e-4
    supportive_epochs: int = 20
    contrastive_epochs: int = 15
    batch_size: int = 32

    def validate(self):
        if self.mc_samples < 1:
            raise ConfigurationError("training.mc_samples must be >= 1")
        if self.diversity_sign not in DIVERSITY_SIGNS:
            raise ConfigurationError(
                f"unknown training.diversity_sign {self.diversity_sign!r}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda_ad"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"training.{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("training.lr must be > 0")


@dataclass
class ShapeSection:
    classes: str = ",".join(DEFAULT_SHAPE_CLASSES)
    train_per_class: int = 200
    val_per_class: int = 40
    test_per_class: int = 60

    def class_tuple(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.classes.split(",") if c.strip())

    def validate(self):
        for c in self.class_tuple():
            if c not in SHAPE_NAMES:
                raise ConfigurationError(f"unknown shape class {c!r}")
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"shape.{name} must be >= 1")


_SECTIONS = {
    "run": RunSection,
    "classifier": ClassifierSection,
    "codebook": CodebookSection,
    "debate": DebateSection,
    "players": PlayersSection,
    "training": TrainingSection,
    "shape": ShapeSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    debate: DebateSection = field(default_factory=DebateSection)
    players: PlayersSection = field(default_factory=PlayersSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    shape: ShapeSection = field(default_factory=ShapeSection)

    def validate(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def finalize(self) -> "RunConfig":
        """Resolve data-dependent defaults, then validate."""
        if not self.run.data_root:
            self.run.data_root = os.environ.get(DATA_ROOT_ENV, "data")
        if self.codebook.size == 0:
            self.codebook.size = 512 if self.run.dataset == "afhq" else 64
        arch_hp = default_hparams(self.run.arch)
        if self.classifier.epochs == 0:
            self.classifier.epochs = arch_hp.epochs
        if self.classifier.weight_decay < 0:
            self.classifier.weight_decay = arch_hp.weight_decay
        return self.validate()

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def out_dir(self) -> Path:
        return (Path(self.run.out_root) / self.run.dataset / self.run.arch
                / self.config_hash())

    def echo(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(section: str, key: str, raw: str, target_type):
    try:
        if target_type is bool:
            lowered = str(raw).strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"bad value {raw!r} for {section}.{key} (expected {target_type.__name__})"
        ) from None


def _apply(cfg: RunConfig, section: str, key: str, value) -> None:
    if section not in _SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    known = {f.name: f.type for f in fields(target)}
    if key not in known:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    current = getattr(target, key)
    target_type = type(current) if current is not None else str
    setattr(target, key, value if not isinstance(value, str)
            else _coerce(section, key, value, target_type))


def parse_config(path: str | Path | None = None,
                 overrides: dict[str, object] | None = None) -> RunConfig:
    """Build the effective config from an optional file plus overrides.

    ``overrides`` keys are dotted ``section.key`` names (the CLI maps its
    flags onto these). Unknown sections or keys raise a configuration
    error naming the offender; all constraints are validated here.
    """
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigurationError(f"config file {path} is missing or unreadable")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigurationError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        _apply(cfg, section, key, value)
    return cfg.finalize()
