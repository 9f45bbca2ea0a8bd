from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Dict, FrozenSet, List, Optional, Tuple

import numpy as np


Voxel = Tuple[int, int, int]
Point = Tuple[float, float, float]


def _as_spacing(spacing) -> Tuple[float, float, float]:
    values = tuple(float(s) for s in spacing)
    if len(values) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(values)}")
    if not all(np.isfinite(s) and s > 0 for s in values):
        raise ValueError(f"spacing components must be > 0, got {values}")
    return values


@dataclass(frozen=True, eq=False)
class Volume:
    """Трехмерный скалярный объем; data индексируется как [x, y, z]"""
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    dtype: ClassVar[type] = np.float64

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) == 0:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {raw.shape}")
        self._validate(raw)
        data = np.array(raw, dtype=self.dtype)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    def _validate(self, raw: np.ndarray):
        if not np.all(np.isfinite(raw)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> Voxel:
        """Размеры (nx, ny, nz)"""
        return tuple(int(n) for n in self.data.shape)

    def like(self, data: np.ndarray) -> "Volume":
        """Новый объем того же типа и с тем же spacing"""
        return type(self)(data, self.spacing)

    def require_same_grid(self, other: "Volume", what: str = "volumes"):
        """Проверяет совпадение размеров двух объемов"""
        if self.dims != other.dims:
            raise ValueError(f"dims mismatch between {what}: {self.dims} vs {other.dims}")


@dataclass(frozen=True, eq=False)
class BinaryMask(Volume):
    """Бинарная маска: каждый воксель равен 0 или 1"""

    dtype: ClassVar[type] = np.uint8

    def _validate(self, raw: np.ndarray):
        if raw.dtype == np.bool_:
            return
        if not np.all((raw == 0) | (raw == 1)):
            raise ValueError("binary mask values must be 0 or 1")

    @classmethod
    def empty(cls, dims: Voxel, spacing=(1.0, 1.0, 1.0)) -> "BinaryMask":
        return cls(np.zeros(dims, dtype=np.uint8), spacing)

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


class NodeKind(Enum):
    ENDPOINT = "endpoint"
    BIFURCATION = "bifurcation"


@dataclass
class Node:
    """Узел графа центральных линий: конечная точка или бифуркация"""
    node_id: int
    xyz: Voxel
    kind: NodeKind
    voxels: Tuple[Voxel, ...] = ()


@dataclass
class Branch:
    """Ветвь между двумя узлами; path упорядочен от проксимального конца к дистальному"""
    branch_id: int
    node_from: int
    node_to: int
    path: List[Voxel] = field(default_factory=list)
    generation: int = 0
    is_terminal: bool = False
    mean_diameter_vox: Optional[float] = None

    @property
    def length_vox(self) -> int:
        return len(self.path)


@dataclass
class CenterlineGraph:
    """Граф ветвей, полученный из скелета"""
    nodes: List[Node]
    branches: List[Branch]
    root: int
    dims: Voxel

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def branch(self, branch_id: int) -> Branch:
        return self.branches[branch_id]

    @property
    def bifurcations(self) -> List[Node]:
        return [n for n in self.nodes if n.kind == NodeKind.BIFURCATION]

    @property
    def endpoints(self) -> List[Node]:
        return [n for n in self.nodes if n.kind == NodeKind.ENDPOINT]


@dataclass(frozen=True)
class AirwayErrorParams:
    """Параметры синтетических ошибок для дыхательных путей"""
    max_rate_terminal: float = 0.0
    max_rate_discontinuity: float = 0.0
    min_gap_len_vox: int = 10
    mask_width_factor: float = 3.0
    excluded_generations: FrozenSet[int] = frozenset({0, 1, 2})

    def __post_init__(self):
        for name in ("max_rate_terminal", "max_rate_discontinuity"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.min_gap_len_vox < 1:
            raise ValueError(f"min_gap_len_vox must be >= 1, got {self.min_gap_len_vox}")
        if not self.mask_width_factor > 0:
            raise ValueError(f"mask_width_factor must be > 0, got {self.mask_width_factor}")
        object.__setattr__(self, "excluded_generations", frozenset(self.excluded_generations))


@dataclass(frozen=True)
class GapTable:
    """Максимальное число разрывов и диапазон их длины для группы сосудов"""
    max_gaps: int
    min_len: int
    max_len: int

    def __post_init__(self):
        if self.max_gaps < 0:
            raise ValueError(f"max_gaps must be >= 0, got {self.max_gaps}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"gap length range invalid: {self.min_len}..{self.max_len}")


@dataclass(frozen=True)
class VesselErrorParams:
    """Параметры синтетических разрывов для сосудов"""
    max_rate: float = 0.0
    long: GapTable = GapTable(6, 10, 35)
    medium: GapTable = GapTable(4, 10, 20)
    short: GapTable = GapTable(2, 6, 15)

    def __post_init__(self):
        if not 0.0 <= self.max_rate <= 1.0:
            raise ValueError(f"max_rate must be in [0, 1], got {self.max_rate}")

    def table(self, group: str) -> GapTable:
        return {"long": self.long, "medium": self.medium, "short": self.short}[group]


class ErrorType(Enum):
    TERMINAL = "terminal"
    DISCONTINUITY = "discontinuity"
    VESSEL_GAP = "vessel_gap"


@dataclass
class ErrorEvent:
    """Одна наложенная маска: ветвь, диапазон индексов пути [start, stop), ширина и выбранная длина"""
    error_type: ErrorType
    branch_id: int
    start: int
    stop: int
    width_vox: float
    length_vox: int = 0
    group: Optional[str] = None


@dataclass
class CorruptionRecord:
    """Полное происхождение синтетических ошибок в метке"""
    dims: Voxel
    seed: Optional[int] = None
    sampled_rates: Dict[str, float] = field(default_factory=dict)
    affected: Dict[str, List[int]] = field(default_factory=dict)
    removal_masks: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    removed_counts: Dict[str, int] = field(default_factory=dict)
    events: List[ErrorEvent] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def merge(self, other: "CorruptionRecord") -> "CorruptionRecord":
        """Объединяет две частичные записи"""
        if other.dims != self.dims:
            raise ValueError(f"dims mismatch between records: {self.dims} vs {other.dims}")
        return CorruptionRecord(
            dims=self.dims,
            seed=self.seed if self.seed is not None else other.seed,
            sampled_rates={**self.sampled_rates, **other.sampled_rates},
            affected={**self.affected, **other.affected},
            removal_masks={**self.removal_masks, **other.removal_masks},
            removed_counts={**self.removed_counts, **other.removed_counts},
            events=self.events + other.events,
            warnings=self.warnings + other.warnings,
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Параметры генератора синтетического дерева"""
    dims: Voxel = (64, 64, 64)
    depth: int = 3
    trunk_radius_vox: float = 3.0
    radius_decay: float = 0.75
    branch_len_range: Tuple[float, float] = (14.0, 20.0)
    length_decay: float = 0.8
    branch_angle_range: Tuple[float, float] = (25.0, 45.0)
    foreground_intensity: float = 0.8
    background_intensity: float = 0.2
    noise_sigma: float = 0.05
    seed: int = 0
    style: str = "airway"
    max_retries: int = 50

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims must be three values >= 4, got {self.dims}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if not self.trunk_radius_vox > 0:
            raise ValueError(f"trunk_radius_vox must be > 0, got {self.trunk_radius_vox}")
        if not 0.0 < self.radius_decay <= 1.0:
            raise ValueError(f"radius_decay must be in (0, 1], got {self.radius_decay}")
        if not 0.0 < self.length_decay <= 1.0:
            raise ValueError(f"length_decay must be in (0, 1], got {self.length_decay}")
        low, high = self.branch_len_range
        if not 0 < low <= high:
            raise ValueError(f"branch_len_range invalid: {self.branch_len_range}")
        low, high = self.branch_angle_range
        if not 0 <= low <= high <= 90:
            raise ValueError(f"branch_angle_range invalid: {self.branch_angle_range}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.style not in ("airway", "vessel"):
            raise ValueError(f"style must be 'airway' or 'vessel', got {self.style!r}")


@dataclass(frozen=True)
class TreeSegment:
    """Прямой отрезок ветви, как его построил генератор"""
    level: int
    start: Point
    end: Point
    radius: float
    parent: Optional[int] = None


@dataclass
class PhantomSample:
    """Синтетический случай: изображение, эталон, центральные линии, граф и ограничивающая маска"""
    image: Volume
    gt_mask: BinaryMask
    gt_centerline: BinaryMask
    graph: CenterlineGraph
    bounding_mask: BinaryMask
    segments: List[TreeSegment]
    root_hint: Voxel


@dataclass
class RefinementSample:
    """Обучающий патч сети уточнения: изображение, входная метка, цель и маска"""
    image: np.ndarray
    label: np.ndarray
    target: np.ndarray
    bounds: np.ndarray
    source: str = "x1"


@dataclass
class CaseMetrics:
    """Метрики одного случая"""
    case_id: str
    dice: float
    completeness: float
    leakage: float
    gaps: int
    ncc_detected: int = 0


@dataclass
class MetricsReport:
    """Отчет по набору случаев: значения по случаям и среднее (стандартное отклонение)"""
    cases: List[CaseMetrics] = field(default_factory=list)

    METRICS: ClassVar[Tuple[str, ...]] = ("dice", "completeness", "leakage", "gaps")

    @property
    def case_ids(self) -> List[str]:
        return [c.case_id for c in self.cases]

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(c, metric) for c in self.cases], dtype=np.float64)

    @property
    def aggregate(self) -> Dict[str, Dict[str, float]]:
        result = {}
        for metric in self.METRICS:
            values = self.values(metric)
            if values.size == 0:
                result[metric] = {"mean": float("nan"), "std": float("nan")}
            else:
                result[metric] = {"mean": float(values.mean()), "std": float(values.std())}
        return result

    def to_dict(self) -> dict:
        return {
            "cases": [
                {"id": c.case_id, "dice": c.dice, "completeness": c.completeness,
                 "leakage": c.leakage, "gaps": c.gaps, "ncc_detected": c.ncc_detected}
                for c in self.cases
            ],
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls([
            CaseMetrics(case_id=c["id"], dice=c["dice"], completeness=c["completeness"],
                        leakage=c["leakage"], gaps=int(c["gaps"]), ncc_detected=int(c.get("ncc_detected", 0)))
            for c in payload["cases"]
        ])

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        """Конкатенация отчетов (например, по нескольким разбиениям данных)"""
        return MetricsReport(self.cases + other.cases)


@dataclass
class CommandResult:
    """Результат команды CLI"""
    exit_code: int
    message: str = ""
    paths: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ModelSpec:
    """Описание сети: тип, число входных каналов, уровни, базовые каналы, нормализация"""
    kind: str = "unet"
    in_channels: int = 1
    levels: int = 3
    base_channels: int = 8
    norm: str = "affine"
    convs_per_level: int = 2

    KINDS: ClassVar[Tuple[str, ...]] = ("unet", "discriminator", "linear")
    NORMS: ClassVar[Tuple[str, ...]] = ("affine", "instance", "none")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"model kind must be one of {self.KINDS}, got {self.kind!r}")
        if self.norm not in self.NORMS:
            raise ValueError(f"norm must be one of {self.NORMS}, got {self.norm!r}")
        if self.in_channels < 1 or self.levels < 1 or self.base_channels < 1 or self.convs_per_level < 1:
            raise ValueError(f"model sizes must be >= 1: {self}")

    @property
    def divisor(self) -> int:
        """Пространственные размеры входа U-Net должны делиться на это число"""
        return 2 ** (self.levels - 1) if self.kind == "unet" else 1

    def layers(self) -> List[str]:
        """Последовательность слоев в словаре операций сети"""
        block = ["conv3x3x3", "norm" if self.norm != "none" else None, "leaky_relu"]
        block = [op for op in block if op] * self.convs_per_level
        if self.kind == "linear":
            return ["conv3x3x3", "sigmoid"]
        encoder = []
        for level in range(self.levels):
            if level > 0:
                encoder.append("downsample2")
            encoder.extend(block)
        if self.kind == "discriminator":
            return encoder + ["conv1x1x1", "global_average", "sigmoid"]
        decoder = []
        for _ in range(self.levels - 1):
            decoder.extend(["upsample2", "skip_concat"] + block)
        return encoder + decoder + ["conv1x1x1", "sigmoid"]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "levels": self.levels,
                "base_channels": self.base_channels, "norm": self.norm,
                "convs_per_level": self.convs_per_level}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        return cls(**payload)


class RefinementMode(Enum):
    """Источник входной метки сети уточнения"""
    LR = "lr"
    LR_SYN_INIT = "lr_syn_init"
    LR_SYN = "lr_syn"
    LR_SYN_LASN = "lr_syn_lasn"
