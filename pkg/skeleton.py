"""Скелетизация масок и разбиение центральных линий на граф ветвей"""

import logging
from collections import deque
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _skimage_skeletonize

from models import BinaryMask, Branch, CenterlineGraph, Node, NodeKind, Voxel
from volume import CUBE3, distance_transform


logger = logging.getLogger(__name__)

OFFSETS = [(dx, dy, dz)
           for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
           if (dx, dy, dz) != (0, 0, 0)]


class GraphError(ValueError):
    """Нарушено предположение о структуре графа (пустой скелет, цикл, несовпадение с маской)"""


def skeletonize(m: BinaryMask) -> BinaryMask:
    """Топологически корректное 3D-утончение (метод Lee) до центральных линий"""
    if m.count == 0:
        return BinaryMask.empty(m.dims, m.spacing)
    skel = _skimage_skeletonize(m.as_bool(), method="lee")
    return m.like(np.asarray(skel) > 0)


def neighbor_counts(skel: np.ndarray) -> np.ndarray:
    """Число 26-соседей каждого вокселя скелета (0 вне скелета)"""
    skel = np.asarray(skel, dtype=np.int16)
    counts = ndimage.convolve(skel, CUBE3.astype(np.int16), mode="constant", cval=0)
    return (counts - skel) * skel


def _neighbors(voxel: Voxel, voxels: set) -> List[Voxel]:
    x, y, z = voxel
    return [(x + dx, y + dy, z + dz) for dx, dy, dz in OFFSETS if (x + dx, y + dy, z + dz) in voxels]


def _sorted_by_index(voxels: Iterable[Voxel], dims) -> List[Voxel]:
    return sorted(voxels, key=lambda v: v[0] + dims[0] * (v[1] + dims[1] * v[2]))


def build_graph(skel: BinaryMask, root_hint: Optional[Sequence[float]] = None) -> CenterlineGraph:
    """Строит граф: узлы = воксели с числом соседей != 2, ветви = максимальные цепочки между ними.

    Соседствующие воксели бифуркаций объединяются в один узел с представителем
    с наименьшим линейным индексом. Ветви ориентируются обходом в ширину от
    корня (узла, ближайшего к root_hint) в каждой компоненте.
    """
    arr = skel.as_bool()
    if not arr.any():
        raise GraphError("empty skeleton")
    dims = skel.dims
    degree = neighbor_counts(arr)

    # Группы вокселей-узлов: кластеры бифуркаций и отдельные концевые воксели
    groups: List[Tuple[List[Voxel], NodeKind]] = []
    bif_labels, n_bif = ndimage.label(arr & (degree >= 3), structure=CUBE3)
    if n_bif:
        coords = np.argwhere(bif_labels > 0)
        labels = bif_labels[tuple(coords.T)]
        for lab in range(1, n_bif + 1):
            members = [tuple(int(c) for c in v) for v in coords[labels == lab]]
            groups.append((_sorted_by_index(members, dims), NodeKind.BIFURCATION))
    for v in np.argwhere(arr & (degree <= 1)):
        groups.append(([tuple(int(c) for c in v)], NodeKind.ENDPOINT))

    skeleton_voxels = {tuple(int(c) for c in v) for v in np.argwhere(arr)}
    chain_voxels = {tuple(int(c) for c in v) for v in np.argwhere(arr & (degree == 2))}

    # Замкнутые цепочки без узлов получают узел в вокселе с наименьшим индексом
    reached = set()
    for members, _ in groups:
        for v in members:
            reached.update(n for n in _neighbors(v, chain_voxels))
    chain_labels, n_chain = ndimage.label(arr & (degree == 2), structure=CUBE3)
    if n_chain:
        coords = np.argwhere(chain_labels > 0)
        labels = chain_labels[tuple(coords.T)]
        for lab in range(1, n_chain + 1):
            members = [tuple(int(c) for c in v) for v in coords[labels == lab]]
            if not any(v in reached for v in members):
                loop_node = _sorted_by_index(members, dims)[0]
                logger.warning(f"Closed skeleton loop without nodes at {loop_node}")
                chain_voxels.discard(loop_node)
                groups.append(([loop_node], NodeKind.ENDPOINT))

    groups.sort(key=lambda g: g[0][0][0] + dims[0] * (g[0][0][1] + dims[1] * g[0][0][2]))
    nodes: List[Node] = []
    node_of: Dict[Voxel, int] = {}
    for node_id, (members, kind) in enumerate(groups):
        nodes.append(Node(node_id=node_id, xyz=members[0], kind=kind, voxels=tuple(members)))
        for v in members:
            node_of[v] = node_id

    # Трассировка цепочек от каждого узла
    edges: List[Tuple[int, int, List[Voxel]]] = []
    visited = set()
    direct_pairs = set()
    for node in nodes:
        for v in node.voxels:
            for n in _neighbors(v, skeleton_voxels):
                if n in node_of:
                    other = node_of[n]
                    pair = (min(node.node_id, other), max(node.node_id, other))
                    if other != node.node_id and pair not in direct_pairs:
                        direct_pairs.add(pair)
                        edges.append((node.node_id, other, []))
                    continue
                if n in visited:
                    continue
                path = [n]
                visited.add(n)
                prev, cur = v, n
                end_node = None
                while end_node is None:
                    nxt = [w for w in _neighbors(cur, skeleton_voxels) if w != prev]
                    if len(nxt) != 1:
                        raise GraphError(f"skeleton is not thin at {cur}")
                    prev, cur = cur, nxt[0]
                    if cur in node_of:
                        end_node = node_of[cur]
                    else:
                        visited.add(cur)
                        path.append(cur)
                edges.append((node.node_id, end_node, path))

    root = _nearest_node(nodes, root_hint)
    branches = [Branch(branch_id=i, node_from=a, node_to=b, path=list(path))
                for i, (a, b, path) in enumerate(edges)]
    graph = CenterlineGraph(nodes=nodes, branches=branches, root=root, dims=dims)
    return _orient(graph)


def _nearest_node(nodes: List[Node], root_hint) -> int:
    if root_hint is None:
        endpoints = [n.node_id for n in nodes if n.kind == NodeKind.ENDPOINT]
        return endpoints[0] if endpoints else 0
    hint = np.asarray(root_hint, dtype=np.float64)
    distances = [float(np.sum((np.asarray(n.xyz, dtype=np.float64) - hint) ** 2)) for n in nodes]
    return int(np.argmin(distances))


def to_networkx(g: CenterlineGraph) -> nx.MultiGraph:
    """Мультиграф узлов с ветвями в качестве ребер (key = id ветви)"""
    graph = nx.MultiGraph()
    graph.add_nodes_from(n.node_id for n in g.nodes)
    for b in g.branches:
        graph.add_edge(b.node_from, b.node_to, key=b.branch_id)
    return graph


def _component_starts(g: CenterlineGraph, graph: nx.MultiGraph) -> List[Tuple[int, set]]:
    starts = []
    for component in sorted(nx.connected_components(graph), key=min):
        if g.root in component:
            start = g.root
        else:
            endpoints = sorted(n for n in component if g.nodes[n].kind == NodeKind.ENDPOINT)
            start = endpoints[0] if endpoints else min(component)
        starts.append((start, component))
    return starts


def _bfs(graph: nx.MultiGraph, start: int) -> Tuple[Dict[int, int], Dict[int, Optional[int]]]:
    order = {start: 0}
    parent: Dict[int, Optional[int]] = {start: None}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for w in sorted(graph.neighbors(u)):
            if w not in order:
                order[w] = len(order)
                parent[w] = u
                queue.append(w)
    return order, parent


def _orient(g: CenterlineGraph) -> CenterlineGraph:
    """Ориентирует ветви от корня компоненты и выставляет признак терминальности"""
    graph = to_networkx(g)
    order: Dict[int, int] = {}
    for start, _ in _component_starts(g, graph):
        component_order, _ = _bfs(graph, start)
        order.update(component_order)

    branches = []
    for b in g.branches:
        node_from, node_to, path = b.node_from, b.node_to, list(b.path)
        if order[node_to] < order[node_from]:
            node_from, node_to, path = node_to, node_from, path[::-1]
        is_terminal = node_from != node_to and g.nodes[node_to].kind == NodeKind.ENDPOINT
        branches.append(Branch(branch_id=b.branch_id, node_from=node_from, node_to=node_to, path=path,
                               generation=b.generation, is_terminal=is_terminal,
                               mean_diameter_vox=b.mean_diameter_vox))
    return CenterlineGraph(nodes=g.nodes, branches=branches, root=g.root, dims=g.dims)


def assign_generations(g: CenterlineGraph) -> CenterlineGraph:
    """Поколение ветви = число бифуркаций на пути от корня до ее проксимального узла"""
    graph = to_networkx(g)
    counts: Dict[int, int] = {}
    for start, component in _component_starts(g, graph):
        sub = graph.subgraph(component)
        if sub.number_of_edges() != sub.number_of_nodes() - 1:
            if start == g.root:
                raise GraphError(f"cycle detected in root component (root node {g.root})")
            logger.warning(f"Cyclic skeleton component at node {start}; generations follow a BFS tree")
        order, parent = _bfs(graph, start)
        for node_id in sorted(order, key=order.get):
            p = parent[node_id]
            if p is None:
                counts[node_id] = 0
            else:
                counts[node_id] = counts[p] + (1 if g.nodes[node_id].kind == NodeKind.BIFURCATION else 0)

    branches = [Branch(branch_id=b.branch_id, node_from=b.node_from, node_to=b.node_to, path=list(b.path),
                       generation=counts[b.node_from], is_terminal=b.is_terminal,
                       mean_diameter_vox=b.mean_diameter_vox)
                for b in g.branches]
    return CenterlineGraph(nodes=g.nodes, branches=branches, root=g.root, dims=g.dims)


def branch_samples(g: CenterlineGraph, b: Branch) -> List[Voxel]:
    """Воксели пути ветви; для ветви без пути: дистальный узел"""
    return list(b.path) if b.path else [g.nodes[b.node_to].xyz]


def estimate_diameters(g: CenterlineGraph, m: BinaryMask) -> CenterlineGraph:
    """Диаметр = 2 x среднее расстояние до фона вдоль пути ветви"""
    if tuple(m.dims) != tuple(g.dims):
        raise GraphError(f"graph dims {g.dims} do not match mask dims {m.dims}")
    edt = distance_transform(m).data
    branches = []
    for b in g.branches:
        samples = np.array(branch_samples(g, b))
        values = edt[tuple(samples.T)]
        if np.any(values <= 0):
            raise GraphError(f"branch {b.branch_id} has path voxels outside the mask foreground")
        branches.append(Branch(branch_id=b.branch_id, node_from=b.node_from, node_to=b.node_to,
                               path=list(b.path), generation=b.generation, is_terminal=b.is_terminal,
                               mean_diameter_vox=float(2.0 * values.mean())))
    return CenterlineGraph(nodes=g.nodes, branches=branches, root=g.root, dims=g.dims)


def terminal_branches(g: CenterlineGraph) -> List[int]:
    """Ветви без дальнейших бифуркаций"""
    return [b.branch_id for b in g.branches if b.is_terminal]


def extract_graph(m: BinaryMask, root_hint=None, skel: Optional[BinaryMask] = None) -> CenterlineGraph:
    """Полный разбор маски: скелет, граф, поколения, диаметры"""
    if skel is None:
        skel = skeletonize(m)
    graph = assign_generations(build_graph(skel, root_hint))
    return estimate_diameters(graph, m)


def graph_to_mask(g: CenterlineGraph, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
    """Растеризует узлы и пути ветвей графа"""
    data = np.zeros(g.dims, dtype=bool)
    for n in g.nodes:
        data[tuple(np.array(n.voxels or (n.xyz,)).T)] = True
    for b in g.branches:
        if b.path:
            data[tuple(np.array(b.path).T)] = True
    return BinaryMask(data, spacing)


def graph_to_dict(g: CenterlineGraph) -> dict:
    return {
        "dims": list(g.dims),
        "root": g.root,
        "nodes": [{"id": n.node_id, "xyz": list(n.xyz), "kind": n.kind.value,
                   "voxels": [list(v) for v in n.voxels]} for n in g.nodes],
        "branches": [{"id": b.branch_id, "node_from": b.node_from, "node_to": b.node_to,
                      "path": [list(v) for v in b.path], "generation": b.generation,
                      "is_terminal": b.is_terminal, "mean_diameter_vox": b.mean_diameter_vox}
                     for b in g.branches],
    }


def graph_from_dict(payload: dict) -> CenterlineGraph:
    nodes = [Node(node_id=int(n["id"]), xyz=tuple(int(c) for c in n["xyz"]), kind=NodeKind(n["kind"]),
                  voxels=tuple(tuple(int(c) for c in v) for v in n.get("voxels", [n["xyz"]])))
             for n in payload["nodes"]]
    branches = [Branch(branch_id=int(b["id"]), node_from=int(b["node_from"]), node_to=int(b["node_to"]),
                       path=[tuple(int(c) for c in v) for v in b["path"]],
                       generation=int(b.get("generation", 0)), is_terminal=bool(b.get("is_terminal", False)),
                       mean_diameter_vox=b.get("mean_diameter_vox"))
                for b in payload["branches"]]
    for i, n in enumerate(nodes):
        if n.node_id != i:
            raise GraphError(f"node ids must be consecutive, got {n.node_id} at position {i}")
    for i, b in enumerate(branches):
        if b.branch_id != i:
            raise GraphError(f"branch ids must be consecutive, got {b.branch_id} at position {i}")
    return CenterlineGraph(nodes=nodes, branches=branches, root=int(payload["root"]),
                           dims=tuple(int(d) for d in payload["dims"]))
