"""Синтез структурных ошибок в метках деревьев (только удаление вокселей)"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from models import (
    AirwayErrorParams, BinaryMask, Branch, CenterlineGraph, CorruptionRecord, ErrorEvent, ErrorType,
    VesselErrorParams, Voxel,
)
from skeleton import GraphError, branch_samples, graph_to_mask, terminal_branches
from volume import dilate_cube3, rle_decode, rle_encode


logger = logging.getLogger(__name__)

GROUPS = ("long", "medium", "short")


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def sample_error_rate(upper: float, rng: np.random.Generator) -> float:
    """Доля ошибок, равномерно из [0, upper]"""
    if not 0.0 <= upper <= 1.0:
        raise ValueError(f"rate upper bound must be in [0, 1], got {upper}")
    if upper == 0.0:
        return 0.0
    return float(rng.uniform(0.0, upper))


def select_branches_weighted(candidates: Sequence[Tuple[int, float]], rate: float,
                             rng: np.random.Generator) -> List[int]:
    """Выбор round(rate * N) ветвей без возвращения с вероятностями, пропорциональными весам"""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    ids = [int(c[0]) for c in candidates]
    weights = np.array([float(c[1]) for c in candidates], dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("candidate weights must be >= 0")
    k = round_half_up(rate * len(ids))
    if k == 0:
        return []
    if weights.sum() == 0:
        raise ValueError("all candidate weights are zero")

    remaining = list(range(len(ids)))
    selected = []
    for _ in range(k):
        w = weights[remaining]
        total = w.sum()
        # веса оставшихся могут обнулиться после нескольких выборов
        p = w / total if total > 0 else np.full(len(remaining), 1.0 / len(remaining))
        pick = int(rng.choice(len(remaining), p=p))
        selected.append(ids[remaining.pop(pick)])
    return selected


def cylinder_mask(path_segment: Sequence[Voxel], width_vox: float, dims) -> BinaryMask:
    """Воксели на расстоянии не более width/2 от центра любого вокселя отрезка"""
    segment = np.asarray(path_segment, dtype=np.int64).reshape(-1, 3)
    if segment.shape[0] == 0:
        raise ValueError("path segment is empty")
    if not width_vox > 0:
        raise ValueError(f"width_vox must be > 0, got {width_vox}")
    dims = np.asarray(dims, dtype=np.int64)
    if np.any(segment < 0) or np.any(segment >= dims):
        raise ValueError("path segment lies outside the volume")

    radius = width_vox / 2.0
    pad = int(math.ceil(radius)) + 1
    lo = np.maximum(segment.min(axis=0) - pad, 0)
    hi = np.minimum(segment.max(axis=0) + pad + 1, dims)
    box = np.ones(tuple(hi - lo), dtype=bool)
    box[tuple((segment - lo).T)] = False
    distances = ndimage.distance_transform_edt(box)

    out = np.zeros(tuple(dims), dtype=bool)
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = distances <= radius
    return BinaryMask(out)


def _require_match(label: BinaryMask, g: CenterlineGraph):
    if tuple(label.dims) != tuple(g.dims):
        raise GraphError(f"graph dims {g.dims} do not match label dims {label.dims}")


def _diameter(b: Branch) -> float:
    if b.mean_diameter_vox is None:
        raise GraphError(f"branch {b.branch_id} has no diameter estimate")
    return b.mean_diameter_vox


def _window(length: int, center: int, size: int) -> Tuple[int, int]:
    """Окно [start, stop) длины size вокруг center, сдвинутое внутрь пути"""
    size = min(size, length)
    start = min(max(center - size // 2, 0), length - size)
    return start, start + size


def _partial_record(label: BinaryMask, error_type: ErrorType, rate: float, affected: List[int],
                    removed: np.ndarray, events: List[ErrorEvent]) -> CorruptionRecord:
    key = error_type.value
    return CorruptionRecord(
        dims=label.dims,
        sampled_rates={key: rate},
        affected={key: affected},
        removal_masks={key: rle_encode(removed)},
        removed_counts={key: int(removed.sum())},
        events=events,
    )


def inject_airway_terminal_errors(label: BinaryMask, g: CenterlineGraph, rate: float,
                                  params: AirwayErrorParams,
                                  rng: np.random.Generator) -> Tuple[BinaryMask, CorruptionRecord]:
    """Частичное или полное удаление терминальных ветвей, начиная с проксимальной половины"""
    _require_match(label, g)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    terminals = sorted(terminal_branches(g))
    k = round_half_up(rate * len(terminals))
    chosen = [int(i) for i in rng.choice(terminals, size=k, replace=False)] if k else []

    union = np.zeros(label.dims, dtype=bool)
    events = []
    for branch_id in chosen:
        b = g.branch(branch_id)
        width = params.mask_width_factor * _diameter(b)
        length = b.length_vox
        start = int(rng.integers(0, (length - 1) // 2 + 1)) if length > 0 else 0
        segment = list(b.path[start:]) + [g.node(b.node_to).xyz]
        union |= cylinder_mask(segment, width, label.dims).as_bool()
        events.append(ErrorEvent(ErrorType.TERMINAL, branch_id, start, length, width,
                                 length_vox=length - start))

    original = label.as_bool()
    removed = original & union
    logger.debug(f"Terminal errors: {len(chosen)} of {len(terminals)} branches, {int(removed.sum())} voxels")
    return (label.like(original & ~union),
            _partial_record(label, ErrorType.TERMINAL, rate, chosen, removed, events))


def inject_airway_discontinuities(label: BinaryMask, g: CenterlineGraph, rate: float,
                                  params: AirwayErrorParams,
                                  rng: np.random.Generator) -> Tuple[BinaryMask, CorruptionRecord]:
    """Разрывы внутри ветвей; ветви старших поколений выбираются чаще"""
    _require_match(label, g)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    candidates = [(b.branch_id, b.generation) for b in g.branches
                  if b.generation not in params.excluded_generations]

    if not candidates or all(weight == 0 for _, weight in candidates):
        empty = np.zeros(label.dims, dtype=bool)
        record = _partial_record(label, ErrorType.DISCONTINUITY, rate, [], empty, [])
        if rate > 0:
            message = "no branches eligible for discontinuity errors"
            record.warnings.append(message)
            logger.warning(f"{message} (excluded generations {sorted(params.excluded_generations)})")
        return label.like(label.as_bool()), record

    chosen = select_branches_weighted(candidates, rate, rng)
    union = np.zeros(label.dims, dtype=bool)
    events = []
    for branch_id in chosen:
        b = g.branch(branch_id)
        width = params.mask_width_factor * _diameter(b)
        samples = branch_samples(g, b)
        n = len(samples)
        center = int(rng.integers(0, n))
        size = int(rng.integers(min(params.min_gap_len_vox, n), n + 1))
        start, stop = _window(n, center, size)
        union |= cylinder_mask(samples[start:stop], width, label.dims).as_bool()
        events.append(ErrorEvent(ErrorType.DISCONTINUITY, branch_id, start, stop, width, length_vox=size))

    original = label.as_bool()
    removed = original & union
    logger.debug(f"Discontinuities: {len(chosen)} of {len(candidates)} candidates, {int(removed.sum())} voxels")
    return (label.like(original & ~union),
            _partial_record(label, ErrorType.DISCONTINUITY, rate, chosen, removed, events))


def length_groups(g: CenterlineGraph) -> Dict[int, str]:
    """Делит ветви на три равные группы по длине (long, medium, short); ничьи по id"""
    ranked = sorted(g.branches, key=lambda b: (-b.length_vox, b.branch_id))
    groups = {}
    for name, indices in zip(GROUPS, np.array_split(np.arange(len(ranked)), 3)):
        for i in indices:
            groups[ranked[int(i)].branch_id] = name
    return groups


def inject_vessel_gaps(centerline_mask: BinaryMask, g: CenterlineGraph, params: VesselErrorParams,
                       rate: float, rng: np.random.Generator) -> Tuple[BinaryMask, CorruptionRecord]:
    """Случайные разрывы центральных линий сосудов, затем дилатация кубом 3x3x3"""
    _require_match(centerline_mask, g)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    groups = length_groups(g)
    ids = sorted(groups)
    k = round_half_up(rate * len(ids))
    chosen = [int(i) for i in rng.choice(ids, size=k, replace=False)] if k else []

    gaps = np.zeros(centerline_mask.dims, dtype=bool)
    events = []
    for branch_id in chosen:
        b = g.branch(branch_id)
        group = groups[branch_id]
        table = params.table(group)
        n_gaps = int(rng.integers(0, table.max_gaps + 1))
        length = b.length_vox
        for _ in range(n_gaps if length > 0 else 0):
            size = min(int(rng.integers(table.min_len, table.max_len + 1)), length)
            center = int(rng.integers(0, length))
            start, stop = _window(length, center, size)
            gaps[tuple(np.array(b.path[start:stop]).T)] = True
            events.append(ErrorEvent(ErrorType.VESSEL_GAP, branch_id, start, stop, 1.0,
                                     length_vox=size, group=group))

    centerline = centerline_mask.as_bool()
    full = dilate_cube3(centerline_mask).as_bool()
    kept = dilate_cube3(centerline_mask.like(centerline & ~gaps)).as_bool()
    removed = full & ~kept
    logger.debug(f"Vessel gaps: {len(events)} gaps on {len(chosen)} of {len(ids)} branches")
    return (centerline_mask.like(kept),
            _partial_record(centerline_mask, ErrorType.VESSEL_GAP, rate, chosen, removed, events))


def removal_union(record: CorruptionRecord) -> np.ndarray:
    """Объединение всех масок удаления записи"""
    union = np.zeros(record.dims, dtype=bool)
    for runs in record.removal_masks.values():
        union |= rle_decode(runs, record.dims)
    return union


def corrupt(label: BinaryMask, g: CenterlineGraph, params: Union[AirwayErrorParams, VesselErrorParams],
            rng: np.random.Generator, centerline: Optional[BinaryMask] = None,
            seed: Optional[int] = None) -> Tuple[BinaryMask, CorruptionRecord]:
    """Синтетическая метка x_syn и полная запись о том, что было удалено"""
    _require_match(label, g)
    original = label.as_bool()

    if isinstance(params, AirwayErrorParams):
        rate_terminal = sample_error_rate(params.max_rate_terminal, rng)
        rate_discontinuity = sample_error_rate(params.max_rate_discontinuity, rng)
        _, terminal = inject_airway_terminal_errors(label, g, rate_terminal, params, rng)
        _, discontinuity = inject_airway_discontinuities(label, g, rate_discontinuity, params, rng)
        record = terminal.merge(discontinuity)
        removed = removal_union(record)
    elif isinstance(params, VesselErrorParams):
        rate = sample_error_rate(params.max_rate, rng)
        if centerline is None:
            centerline = graph_to_mask(g, label.spacing)
        centerline.require_same_grid(label, "centerline and label")
        _, record = inject_vessel_gaps(centerline, g, params, rate, rng)
        removed = original & removal_union(record)
        key = ErrorType.VESSEL_GAP.value
        record.removal_masks[key] = rle_encode(removed)
        record.removed_counts[key] = int(removed.sum())
    else:
        raise ValueError(f"unsupported error parameters: {type(params).__name__}")

    record.seed = seed
    x_syn = original & ~removed
    logger.info(f"Corrupted label: rates {record.sampled_rates}, removed {int(removed.sum())} voxels")
    return label.like(x_syn), record


def record_to_dict(record: CorruptionRecord) -> dict:
    return {
        "dims": list(record.dims),
        "seed": record.seed,
        "sampled_rates": dict(record.sampled_rates),
        "affected": {k: list(v) for k, v in record.affected.items()},
        "removal_masks": {k: [list(run) for run in v] for k, v in record.removal_masks.items()},
        "removed_counts": dict(record.removed_counts),
        "events": [
            {"type": e.error_type.value, "branch_id": e.branch_id, "start": e.start, "stop": e.stop,
             "width_vox": e.width_vox, "length_vox": e.length_vox, "group": e.group}
            for e in record.events
        ],
        "warnings": list(record.warnings),
    }


def record_from_dict(payload: dict) -> CorruptionRecord:
    return CorruptionRecord(
        dims=tuple(int(d) for d in payload["dims"]),
        seed=payload.get("seed"),
        sampled_rates={k: float(v) for k, v in payload.get("sampled_rates", {}).items()},
        affected={k: [int(i) for i in v] for k, v in payload.get("affected", {}).items()},
        removal_masks={k: [(int(a), int(n)) for a, n in v] for k, v in payload.get("removal_masks", {}).items()},
        removed_counts={k: int(v) for k, v in payload.get("removed_counts", {}).items()},
        events=[
            ErrorEvent(ErrorType(e["type"]), int(e["branch_id"]), int(e["start"]), int(e["stop"]),
                       float(e["width_vox"]), int(e.get("length_vox", 0)), e.get("group"))
            for e in payload.get("events", [])
        ],
        warnings=list(payload.get("warnings", [])),
    )
