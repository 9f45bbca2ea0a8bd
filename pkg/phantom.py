"""Генератор синтетических ветвящихся деревьев: изображение, эталон, центральные линии, граф"""

import logging
import math
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from models import BinaryMask, CenterlineGraph, PhantomSample, PhantomSpec, TreeSegment, Volume, Voxel
from rng import derive_seed, make_rng
from skeleton import (
    GraphError, assign_generations, build_graph, estimate_diameters, extract_graph, skeletonize, terminal_branches,
)
from volume import count_components, dilate_cube3


logger = logging.getLogger(__name__)

BOUNDS_MARGIN_VOX = 8.0
MIN_SEPARATION_VOX = 2.0
RETRY_LENGTH_SHRINK = 0.9


class _DrawRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotate_away(direction: np.ndarray, angle_deg: float, azimuth: float) -> np.ndarray:
    """Направление под углом angle_deg к direction с азимутом azimuth вокруг него"""
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(direction, helper))
    w = np.cross(direction, u)
    a = math.radians(angle_deg)
    return _unit(math.cos(a) * direction + math.sin(a) * (math.cos(azimuth) * u + math.sin(azimuth) * w))


def max_level(spec: PhantomSpec) -> int:
    """Самый глубокий уровень с радиусом не меньше 0.5 вокселя"""
    level = 0
    while level < spec.depth and spec.trunk_radius_vox * spec.radius_decay ** (level + 1) >= 0.5:
        level += 1
    return level


def _effective_radius(spec: PhantomSpec, radius: float) -> float:
    return radius if spec.style == "airway" else 1.0


def _draw_segments(spec: PhantomSpec, rng: np.random.Generator, length_scale: float) -> List[TreeSegment]:
    dims = np.asarray(spec.dims, dtype=np.float64)
    top = max_level(spec)
    margin = _effective_radius(spec, spec.trunk_radius_vox) + 2.0
    start = np.array([math.floor(dims[0] / 2), math.floor(dims[1] / 2), math.ceil(margin)])

    segments: List[TreeSegment] = []
    pending = [(0, start, np.array([0.0, 0.0, 1.0]), None)]
    while pending:
        level, origin, direction, parent = pending.pop(0)
        radius = spec.trunk_radius_vox * spec.radius_decay ** level
        low, high = spec.branch_len_range
        length = rng.uniform(low, high) * spec.length_decay ** level * length_scale
        end = origin + direction * length
        index = len(segments)
        segments.append(TreeSegment(level, tuple(float(c) for c in origin), tuple(float(c) for c in end),
                                    float(radius), parent))
        if level < top:
            azimuth = rng.uniform(0.0, 2.0 * math.pi)
            for offset in (0.0, math.pi):
                angle = rng.uniform(*spec.branch_angle_range)
                pending.append((level + 1, end, _rotate_away(direction, angle, azimuth + offset), index))
    return segments


def _check_fit(spec: PhantomSpec, segments: List[TreeSegment]):
    upper = np.asarray(spec.dims, dtype=np.float64) - 1.0
    for s in segments:
        margin = _effective_radius(spec, s.radius) + 1.0
        for point in (np.array(s.start), np.array(s.end)):
            if np.any(point < margin) or np.any(point > upper - margin):
                raise _DrawRejected("fit")


def _sample_points(segment: TreeSegment, step: float = 0.25) -> np.ndarray:
    start, end = np.array(segment.start), np.array(segment.end)
    n = max(2, int(math.ceil(np.linalg.norm(end - start) / step)) + 1)
    return start + np.linspace(0.0, 1.0, n)[:, None] * (end - start)


def _adjacent(segments: List[TreeSegment], i: int, j: int) -> bool:
    a, b = segments[i], segments[j]
    return a.parent == j or b.parent == i or (a.parent is not None and a.parent == b.parent)


def _check_separation(spec: PhantomSpec, segments: List[TreeSegment]):
    points = [_sample_points(s) for s in segments]
    for i in range(len(segments)):
        for j in range(i + 1, len(segments)):
            if _adjacent(segments, i, j):
                continue
            gap = (cdist(points[i], points[j]).min()
                   - _effective_radius(spec, segments[i].radius) - _effective_radius(spec, segments[j].radius))
            if gap <= MIN_SEPARATION_VOX:
                raise _DrawRejected("separation")


def bresenham_3d(start: Voxel, end: Voxel) -> List[Voxel]:
    """26-связная растеризация отрезка между центрами вокселей"""
    p = np.array(start, dtype=np.int64)
    q = np.array(end, dtype=np.int64)
    delta = np.abs(q - p)
    step = np.sign(q - p)
    axis = int(np.argmax(delta))
    n = int(delta[axis])
    errors = 2 * delta - n
    voxels = [tuple(int(c) for c in p)]
    for _ in range(n):
        for k in range(3):
            if k != axis and errors[k] > 0:
                p[k] += step[k]
                errors[k] -= 2 * n
        p[axis] += step[axis]
        errors += 2 * delta
        voxels.append(tuple(int(c) for c in p))
    return voxels


def _round_voxel(point) -> Voxel:
    return tuple(int(math.floor(c + 0.5)) for c in point)


def rasterize_centerline(dims: Voxel, segments: List[TreeSegment]) -> np.ndarray:
    data = np.zeros(dims, dtype=bool)
    for s in segments:
        data[tuple(np.array(bresenham_3d(_round_voxel(s.start), _round_voxel(s.end))).T)] = True
    return data


def rasterize_capsules(dims: Voxel, segments: List[TreeSegment]) -> np.ndarray:
    """Объединение капсул (отрезок + радиус) вокруг ветвей"""
    data = np.zeros(dims, dtype=bool)
    upper = np.asarray(dims) - 1
    for s in segments:
        a, b = np.array(s.start), np.array(s.end)
        lo = np.clip(np.floor(np.minimum(a, b) - s.radius).astype(int), 0, upper)
        hi = np.clip(np.ceil(np.maximum(a, b) + s.radius).astype(int), 0, upper)
        grid = np.stack(np.meshgrid(*(np.arange(l, h + 1) for l, h in zip(lo, hi)), indexing="ij"), axis=-1)
        ab = b - a
        t = np.clip(((grid - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
        nearest = a + t[..., None] * ab
        inside = np.linalg.norm(grid - nearest, axis=-1) <= s.radius
        data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside
    return data


def _same_tree(graph: CenterlineGraph, segments: List[TreeSegment], top: int) -> bool:
    bifurcations = sum(1 for s in segments if s.level < top)
    return len(graph.branches) == len(segments) and len(graph.bifurcations) == bifurcations


def _check_mask_skeleton(gt: BinaryMask, segments: List[TreeSegment], root_hint: Voxel, top: int):
    """Скелет эталонной маски должен давать то же дерево, что и нарисованные ветви"""
    skel = skeletonize(gt)
    if count_components(skel.as_bool(), 26) != 1:
        raise _DrawRejected("topology")
    try:
        graph = extract_graph(gt, root_hint, skel=skel)
    except GraphError:
        raise _DrawRejected("topology")
    terminals = sum(1 for s in segments if s.level == top)
    if not _same_tree(graph, segments, top) or len(terminal_branches(graph)) != terminals:
        raise _DrawRejected("topology")


def _attempt(spec: PhantomSpec, rng: np.random.Generator, length_scale: float):
    segments = _draw_segments(spec, rng, length_scale)
    _check_fit(spec, segments)
    _check_separation(spec, segments)

    centerline = rasterize_centerline(spec.dims, segments)
    if spec.style == "airway":
        gt = rasterize_capsules(spec.dims, segments) | centerline
    else:
        gt = dilate_cube3(BinaryMask(centerline)).as_bool()

    root_hint = _round_voxel(segments[0].start)
    top = max_level(spec)
    graph = build_graph(BinaryMask(centerline), root_hint)
    if not _same_tree(graph, segments, top):
        raise _DrawRejected("topology")
    _check_mask_skeleton(BinaryMask(gt), segments, root_hint, top)
    graph = estimate_diameters(assign_generations(graph), BinaryMask(gt))
    return segments, centerline, gt, graph, root_hint


def generate_tree(spec: PhantomSpec) -> PhantomSample:
    """Детерминированный по (spec, seed) синтетический случай"""
    rng = make_rng(spec.seed, "phantom")
    length_scale = 1.0
    reasons = []
    for _ in range(spec.max_retries):
        try:
            segments, centerline, gt, graph, root_hint = _attempt(spec, rng, length_scale)
        except _DrawRejected as e:
            reasons.append(e.reason)
            if e.reason == "fit":
                length_scale *= RETRY_LENGTH_SHRINK
            continue

        gt_mask = BinaryMask(gt)
        outside = ndimage.distance_transform_edt(~gt)
        sample = PhantomSample(
            image=Volume(np.zeros(spec.dims)),
            gt_mask=gt_mask,
            gt_centerline=BinaryMask(centerline),
            graph=graph,
            bounding_mask=BinaryMask(outside <= BOUNDS_MARGIN_VOX),
            segments=segments,
            root_hint=root_hint,
        )
        sample.image = render_image(sample, spec)
        logger.debug(f"Generated tree seed={spec.seed}: {len(segments)} branches after {len(reasons)} rejected draws")
        return sample

    counts = {r: reasons.count(r) for r in sorted(set(reasons))}
    raise ValueError(f"tree cannot fit in {spec.dims} after {spec.max_retries} attempts ({counts})")


def render_image(sample: PhantomSample, spec: PhantomSpec) -> Volume:
    """Изображение: фон/объект с линейным спадом в 1 воксель на поверхности плюс гауссов шум"""
    outside = ndimage.distance_transform_edt(~sample.gt_mask.as_bool())
    soft = np.clip(1.5 - outside, 0.0, 1.0)
    clean = spec.background_intensity * (1.0 - soft) + spec.foreground_intensity * soft
    if spec.noise_sigma > 0:
        noise = make_rng(spec.seed, "phantom", "noise").normal(0.0, spec.noise_sigma, size=clean.shape)
        clean = clean + noise
    return Volume(np.clip(clean, 0.0, 1.0))


def case_spec(spec: PhantomSpec, index: int, seed: Optional[int] = None) -> PhantomSpec:
    """Спецификация i-го случая набора: собственное зерно из (seed, index)"""
    master = spec.seed if seed is None else seed
    return replace(spec, seed=derive_seed(master, "case", index))


def generate_dataset(spec: PhantomSpec, n: int, seed: Optional[int] = None) -> List[Tuple[str, PhantomSpec, PhantomSample]]:
    """n случаев с идентификаторами case_000, case_001, ..."""
    if n < 1:
        raise ValueError(f"number of cases must be >= 1, got {n}")
    cases = []
    for i in range(n):
        child = case_spec(spec, i, seed)
        cases.append((f"case_{i:03d}", child, generate_tree(child)))
    logger.info(f"Generated {n} phantom cases ({spec.style}, depth {spec.depth})")
    return cases
