"""Конфигурация эксперимента: строгий загрузчик JSON"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from models import AirwayErrorParams, GapTable, ModelSpec, RefinementMode, VesselErrorParams


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Размеры сети"""
    levels: int = 3
    base_channels: int = 8
    norm: str = "affine"
    convs_per_level: int = 2

    def spec(self, kind: str, in_channels: int) -> ModelSpec:
        return ModelSpec(kind=kind, in_channels=in_channels, levels=self.levels,
                         base_channels=self.base_channels, norm=self.norm,
                         convs_per_level=self.convs_per_level)


@dataclass(frozen=True)
class AugmentConfig:
    """Флаги аугментации: отражения по умолчанию, повороты и масштаб по запросу"""
    flip: bool = True
    rot90: bool = False
    rotate: bool = False
    scale: bool = False
    max_rotation_deg: float = 30.0
    scale_range: Tuple[float, float] = (0.7, 1.4)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f"scale_range invalid: {self.scale_range}")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError(f"max_rotation_deg must be in [0, 180], got {self.max_rotation_deg}")


@dataclass
class ExperimentConfig:
    """Все параметры одного запуска конвейера"""
    data_dir: str = "data"
    out_dir: str = "runs/default"
    structure: str = "airway"
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    unlabeled: List[str] = field(default_factory=list)

    patch_size: int = 32
    overlap: float = 0.5
    batch_size: int = 2
    base_steps: int = 300
    lasn_steps: int = 200
    refiner_steps: int = 300
    validate_every: int = 50
    log_every: int = 10

    lr: float = 1e-2
    lam: float = 0.01
    saturating: bool = False
    threshold: float = 0.5
    mix_ratio: float = 0.5
    syn_per_case: int = 2
    mode: str = RefinementMode.LR_SYN_LASN.value
    seed: int = 0
    threads: Optional[int] = None

    model: ModelConfig = field(default_factory=ModelConfig)
    discriminator: ModelConfig = field(default_factory=ModelConfig)
    airway: AirwayErrorParams = field(default_factory=lambda: AirwayErrorParams(0.75, 0.1))
    vessel: VesselErrorParams = field(default_factory=lambda: VesselErrorParams(0.6))
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.structure not in ("airway", "vessel"):
            raise ValueError(f"structure must be 'airway' or 'vessel', got {self.structure!r}")
        splits = {"train": self.train, "val": self.val, "test": self.test, "unlabeled": self.unlabeled}
        seen = {}
        for name, ids in splits.items():
            for case_id in ids:
                if case_id in seen:
                    raise ValueError(f"case {case_id!r} appears in both {seen[case_id]} and {name} splits")
                seen[case_id] = name
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        for name in ("threshold", "mix_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("patch_size", "batch_size", "validate_every", "log_every", "syn_per_case"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("base_steps", "lasn_steps", "refiner_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        RefinementMode(self.mode)
        self.discriminator.spec("discriminator", 1)
        divisor = self.model.spec("unet", 1).divisor
        if self.patch_size % divisor:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {divisor}")

    @property
    def refinement_mode(self) -> RefinementMode:
        return RefinementMode(self.mode)

    @property
    def error_params(self) -> Union[AirwayErrorParams, VesselErrorParams]:
        return self.airway if self.structure == "airway" else self.vessel

    def with_fidelity(self) -> "ExperimentConfig":
        """Параметры, близкие к полноразмерной постановке: 5 уровней, 16 каналов, instance norm"""
        model = ModelConfig(levels=5, base_channels=16, norm="instance")
        augment = replace(self.augment, flip=True, rotate=True, scale=True)
        patch = max(self.patch_size, 16)
        patch += (-patch) % model.spec("unet", 1).divisor
        return replace(self, model=model, augment=augment, patch_size=patch)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "discriminator"): ModelConfig,
    (ExperimentConfig, "airway"): AirwayErrorParams,
    (ExperimentConfig, "vessel"): VesselErrorParams,
    (ExperimentConfig, "augment"): AugmentConfig,
    (VesselErrorParams, "long"): GapTable,
    (VesselErrorParams, "medium"): GapTable,
    (VesselErrorParams, "short"): GapTable,
}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (frozenset, set)):
        return sorted(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def build(cls, payload, prefix: str = ""):
    """Создает dataclass из словаря, отвергая неизвестные ключи на любом уровне"""
    if not isinstance(payload, dict):
        raise ValueError(f"{prefix.rstrip('.') or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in payload.items():
        nested = NESTED.get((cls, name))
        kwargs[name] = build(nested, value, f"{prefix}{name}.") if nested else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValueError(f"invalid config section {prefix.rstrip('.') or 'config'}: {e}") from e


def load_config(path: Union[str, os.PathLike], seed: Optional[int] = None,
                fidelity: bool = False) -> ExperimentConfig:
    """Читает JSON-конфигурацию; seed и fidelity переопределяют значения файла"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    config = build(ExperimentConfig, payload)
    if seed is not None:
        config = replace(config, seed=seed)
    if fidelity:
        config = config.with_fidelity()
    logger.info(f"Loaded config {path} (structure={config.structure}, mode={config.mode}, seed={config.seed})")
    return config


def save_config(config: ExperimentConfig, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
