"""Directed orchard navigation graph and heading-constrained route planning.

Every corridor between two adjacent tree rows carries two antiparallel one-way
lanes: the lane nearer the lower-indexed row runs along +axis, the other along
-axis. Lanes are closed into a loop by U-turn links in the open areas beyond
the row ends, and neighbouring corridors are joined there by switch links, so
the robot only ever reverses direction outside the rows. A layout with a single
row gets one lane on each side of it instead.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import pathlib
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .geometry import Detection, footprint
from .semantic import Label, TreeRow

log = logging.getLogger(__name__)

TREE_ACCESS, ROW_END, UTURN = "tree_access", "row_end", "uturn"
LANE, UTURN_EDGE, SWITCH = "lane", "uturn", "switch"


class GraphBuildError(ValueError):
    pass


class OffGraphError(LookupError):
    pass


class UnreachableError(LookupError):
    pass


@dataclass(frozen=True)
class GraphParams:
    lane_offset: float | None = None
    end_extension: float = 2.0
    heading_tolerance: float = math.radians(15.0)
    clearance_min: float = 0.5
    snap_radius: float = 2.0
    canopy_radius: float | None = None
    open_side_offset: float = 1.0


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float
    heading: float
    kind: str
    row: int
    side: str
    corridor: int
    tree: int | None = None

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    length: float
    kind: str
    lane_direction: float | None = None


@dataclass
class Corridor:
    id: int
    rows: tuple[int, int]
    width: float | None
    plus_lane: list[int]
    minus_lane: list[int]
    axis: tuple[float, float]


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class PlanRequest:
    start: Pose
    goal: Pose


@dataclass
class Path:
    nodes: list[int]
    length: float
    headings: list[float]
    elapsed_s: float = 0.0

    def to_dict(self, graph: "VisibilityGraph | None" = None) -> dict:
        out = {"nodes": self.nodes, "length": self.length, "headings": self.headings}
        if graph is not None:
            out["polyline"] = [list(graph.nodes[n].xy) for n in self.nodes]
            out["kinds"] = [graph.nodes[n].kind for n in self.nodes]
        return out


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def heading_diff(a: float, b: float) -> float:
    return abs(wrap_angle(a - b))


@dataclass(eq=False)
class VisibilityGraph:
    nodes: list[Node]
    edges: list[Edge]
    corridors: list[Corridor] = field(default_factory=list)
    params: GraphParams = field(default_factory=GraphParams)

    def __post_init__(self):
        self._out: dict[int, list[Edge]] = defaultdict(list)
        self._in: dict[int, list[Edge]] = defaultdict(list)
        for e in self.edges:
            self._out[e.src].append(e)
            self._in[e.dst].append(e)
        for lst in self._out.values():
            lst.sort(key=lambda e: e.dst)
        self._xy = np.array([n.xy for n in self.nodes]).reshape(-1, 2)
        self._heading = np.array([n.heading for n in self.nodes])

    def out_edges(self, node: int) -> list[Edge]:
        return self._out.get(node, [])

    def in_edges(self, node: int) -> list[Edge]:
        return self._in.get(node, [])

    def edge(self, src: int, dst: int) -> Edge:
        for e in self.out_edges(src):
            if e.dst == dst:
                return e
        raise KeyError((src, dst))

    def _reach(self, start: int, forward: bool) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            n = stack.pop()
            nxt = self.out_edges(n) if forward else self.in_edges(n)
            for e in nxt:
                m = e.dst if forward else e.src
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return seen

    def strongly_connected(self) -> bool:
        if not self.nodes:
            return False
        everyone = len(self.nodes)
        return len(self._reach(0, True)) == everyone and len(self._reach(0, False)) == everyone

    def snap(self, pose: Pose, radius: float | None = None, tol: float | None = None) -> list[int]:
        """Nodes within ``radius`` of the pose whose heading matches, nearest first."""
        radius = self.params.snap_radius if radius is None else radius
        tol = self.params.heading_tolerance if tol is None else tol
        if not self.nodes:
            return []
        d = np.hypot(self._xy[:, 0] - pose.x, self._xy[:, 1] - pose.y)
        dh = np.abs((self._heading - pose.heading + math.pi) % (2 * math.pi) - math.pi)
        ok = np.flatnonzero((d <= radius) & (dh <= tol + 1e-12))
        return [int(i) for i in ok[np.lexsort((ok, d[ok]))]]

    # ------------------------------------------------------------------ io

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id, "x": n.x, "y": n.y, "heading": n.heading, "kind": n.kind,
                    "refs": {"tree": n.tree, "row": n.row, "side": n.side, "corridor": n.corridor},
                }
                for n in self.nodes
            ],
            "edges": [
                {"from": e.src, "to": e.dst, "length": e.length, "kind": e.kind, "lane_direction": e.lane_direction}
                for e in self.edges
            ],
            "corridors": [asdict(c) for c in self.corridors],
            "params": asdict(self.params),
            "strongly_connected": self.strongly_connected(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VisibilityGraph":
        nodes = []
        for k, n in enumerate(d["nodes"]):
            refs = n.get("refs", {})
            if int(n["id"]) != k:
                raise ValueError("node ids must be 0..N-1 in order")
            nodes.append(Node(
                k, float(n["x"]), float(n["y"]), float(n["heading"]), n.get("kind", TREE_ACCESS),
                int(refs.get("row", -1)), refs.get("side", ""), int(refs.get("corridor", -1)), refs.get("tree"),
            ))
        edges = [
            Edge(int(e["from"]), int(e["to"]), float(e["length"]), e.get("kind", LANE), e.get("lane_direction"))
            for e in d["edges"]
        ]
        corridors = [
            Corridor(c["id"], tuple(c["rows"]), c["width"], c["plus_lane"], c["minus_lane"], tuple(c["axis"]))
            for c in d.get("corridors", [])
        ]
        params = GraphParams(**d["params"]) if "params" in d else GraphParams()
        return cls(nodes, edges, corridors, params)

    def save(self, path: str | pathlib.Path) -> None:
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | pathlib.Path) -> "VisibilityGraph":
        return cls.from_dict(json.loads(pathlib.Path(path).read_text()))


# ---------------------------------------------------------------------- build


def _estimate_canopy_radius(trees: Sequence[Detection]) -> float:
    half = [0.25 * (fp.x_max - fp.x_min + fp.y_max - fp.y_min) for fp in (footprint(t.box) for t in trees)]
    return float(np.mean(half)) if half else 0.0


class _Builder:
    def __init__(self, axis: NDArray, normal: NDArray):
        self.axis = axis
        self.normal = normal
        self.nodes: list[Node] = []
        self.edges: list[Edge] = []

    def point(self, s: float, lateral: float) -> tuple[float, float]:
        p = s * self.axis + lateral * self.normal
        return float(p[0]), float(p[1])

    def add_node(self, s, lateral, heading, kind, row, side, corridor, tree=None) -> int:
        x, y = self.point(s, lateral)
        nid = len(self.nodes)
        self.nodes.append(Node(nid, x, y, heading, kind, row, side, corridor, tree))
        return nid

    def link(self, a: int, b: int, kind: str) -> None:
        na, nb = self.nodes[a], self.nodes[b]
        straight = math.hypot(nb.x - na.x, nb.y - na.y)
        if kind == LANE:
            self.edges.append(Edge(a, b, straight, LANE, na.heading))
            return
        # a reversal is driven as a half circle across the lateral gap
        lateral = abs(float(np.dot([nb.x - na.x, nb.y - na.y], self.normal)))
        self.edges.append(Edge(a, b, max(straight, 0.5 * math.pi * lateral), kind))

    def lane(self, trees, s_of, s_start, s_end, lateral, heading, row, side, corridor) -> list[int]:
        """Entry node, one access node per tree in travel order, exit node."""
        sign = 1.0 if s_end >= s_start else -1.0
        ids = [self.add_node(s_start, lateral, heading, UTURN, row, side, corridor)]
        for t in sorted(trees, key=lambda t: (sign * s_of[t], t)):
            ids.append(self.add_node(s_of[t], lateral, heading, TREE_ACCESS, row, side, corridor, int(t)))
        ids.append(self.add_node(s_end, lateral, heading, ROW_END, row, side, corridor))
        for a, b in zip(ids, ids[1:]):
            self.link(a, b, LANE)
        return ids


def build_graph(
    rows: Sequence[TreeRow],
    trees: Sequence[Detection] | NDArray[np.float64],
    params: GraphParams = GraphParams(),
) -> VisibilityGraph:
    """Lay lanes, access points, U-turns and corridor switches over detected rows.

    ``trees`` is the tree list the rows index into: detections, or an (N, 2)
    array of hand-placed centers.
    """
    if not rows:
        raise GraphBuildError("no tree rows to build a graph from")
    if isinstance(trees, np.ndarray):
        centers = np.asarray(trees, dtype=np.float64).reshape(-1, 2)
        canopy_r = params.canopy_radius if params.canopy_radius is not None else 0.0
    else:
        centers = np.array([footprint(t.box).center for t in trees], dtype=np.float64).reshape(-1, 2)
        canopy_r = params.canopy_radius if params.canopy_radius is not None else _estimate_canopy_radius(trees)

    ref = rows[0].direction
    dirs = [r.direction if np.dot(r.direction, ref) >= 0 else -r.direction for r in rows]
    axis = np.sum(dirs, axis=0)
    axis /= np.linalg.norm(axis)
    normal = np.array([-axis[1], axis[0]])
    heading_plus = math.atan2(axis[1], axis[0])
    heading_minus = wrap_angle(heading_plus + math.pi)

    s_of = {int(t): float(centers[t] @ axis) for r in rows for t in r.members}
    lateral_of_row = [float(np.mean(centers[r.members] @ normal)) for r in rows]
    order = sorted(range(len(rows)), key=lambda k: (lateral_of_row[k], k))
    b = _Builder(axis, normal)
    corridors: list[Corridor] = []
    # per corridor: (plus exit, plus entry, minus exit, minus entry)
    ends: list[tuple[int, int, int, int]] = []

    def add_corridor(row_lo, row_hi, lat_plus, lat_minus, trees_plus, trees_minus, width):
        cid = len(corridors)
        s_all = [s_of[t] for t in list(trees_plus) + list(trees_minus)]
        s_start = min(s_all) - params.end_extension
        s_end = max(s_all) + params.end_extension
        plus = b.lane(trees_plus, s_of, s_start, s_end, lat_plus, heading_plus, row_lo, "left", cid)
        minus = b.lane(trees_minus, s_of, s_end, s_start, lat_minus, heading_minus, row_hi, "right", cid)
        b.link(plus[-1], minus[0], UTURN_EDGE)
        b.link(minus[-1], plus[0], UTURN_EDGE)
        corridors.append(Corridor(cid, (row_lo, row_hi), width, plus, minus, (float(axis[0]), float(axis[1]))))
        ends.append((plus[-1], plus[0], minus[-1], minus[0]))

    if len(rows) == 1:
        r = order[0]
        offset = max(params.lane_offset or params.open_side_offset, params.clearance_min)
        lat = lateral_of_row[r]
        members = rows[r].members
        add_corridor(r, r, lat + canopy_r + offset, lat - canopy_r - offset, members, members, None)
    else:
        for lo_k, hi_k in zip(order, order[1:]):
            gap = lateral_of_row[hi_k] - lateral_of_row[lo_k]
            width = gap - 2 * canopy_r
            if width < 2 * params.clearance_min:
                log.warning(
                    "corridor between rows %d and %d is %.2f m wide (< %.2f m); omitted",
                    lo_k, hi_k, width, 2 * params.clearance_min,
                )
                continue
            offset = params.lane_offset if params.lane_offset is not None else width / 4
            offset = min(max(offset, params.clearance_min), width - params.clearance_min)
            add_corridor(
                lo_k, hi_k,
                lateral_of_row[lo_k] + canopy_r + offset,
                lateral_of_row[hi_k] - canopy_r - offset,
                rows[lo_k].members, rows[hi_k].members, width,
            )
    if not corridors:
        raise GraphBuildError("no corridor is wide enough for the clearance requirement")

    for (p_out_a, p_in_a, m_out_a, m_in_a), (p_out_b, p_in_b, m_out_b, m_in_b) in zip(ends, ends[1:]):
        b.link(p_out_a, m_in_b, SWITCH)
        b.link(p_out_b, m_in_a, SWITCH)
        b.link(m_out_a, p_in_b, SWITCH)
        b.link(m_out_b, p_in_a, SWITCH)

    return VisibilityGraph(b.nodes, b.edges, corridors, params)


# ---------------------------------------------------------------------- plan


def shortest_path(graph: VisibilityGraph, source: int, target: int) -> tuple[list[int], float]:
    """Uniform-cost search over edge lengths; ties resolved by lower node id."""
    dist = {source: 0.0}
    parent: dict[int, int] = {}
    heap = [(0.0, source)]
    done: set[int] = set()
    while heap:
        d, n = heapq.heappop(heap)
        if n in done:
            continue
        if n == target:
            path = [n]
            while path[-1] != source:
                path.append(parent[path[-1]])
            return path[::-1], d
        done.add(n)
        for e in graph.out_edges(n):
            nd = d + e.length
            if e.dst not in dist or nd < dist[e.dst]:
                dist[e.dst] = nd
                parent[e.dst] = n
                heapq.heappush(heap, (nd, e.dst))
    raise UnreachableError(f"node {target} is not reachable from node {source}")


def plan_path(graph: VisibilityGraph, request: PlanRequest) -> Path:
    """Snap both poses to the nearest heading-compatible node and run Dijkstra; ``elapsed_s`` is wall time."""
    t0 = time.perf_counter()
    starts = graph.snap(request.start)
    if not starts:
        raise OffGraphError(f"no node with a matching heading within snap radius of start {request.start}")
    goals = graph.snap(request.goal)
    if not goals:
        raise OffGraphError(f"no node with a matching heading within snap radius of goal {request.goal}")
    nodes, length = shortest_path(graph, starts[0], goals[0])
    return Path(nodes, length, [graph.nodes[n].heading for n in nodes], time.perf_counter() - t0)


def path_respects_lanes(graph: VisibilityGraph, path: Path, tol: float = 1e-6) -> bool:
    """True if every lane edge on the path is driven along its lane direction."""
    for a, b in zip(path.nodes, path.nodes[1:]):
        e = graph.edge(a, b)
        if e.kind != LANE:
            continue
        na, nb = graph.nodes[a], graph.nodes[b]
        dx, dy = nb.x - na.x, nb.y - na.y
        if math.hypot(dx, dy) <= tol:
            continue
        if heading_diff(math.atan2(dy, dx), e.lane_direction) > graph.params.heading_tolerance:
            return False
    return True


# ------------------------------------------------------------ grid baseline


@dataclass
class GridPath:
    cells: list[tuple[int, int]]
    points: list[tuple[float, float]]
    length: float
    expanded: int


class BlockedCellError(ValueError):
    pass


def occupancy_grid(xyz: NDArray, labels: NDArray, cell: float):
    """Blocked mask over the cloud's xy bounds: any Tree/Obstacle point blocks its cell."""
    lo = xyz[:, :2].min(axis=0)
    hi = xyz[:, :2].max(axis=0)
    nx = int(math.floor((hi[0] - lo[0]) / cell)) + 1
    ny = int(math.floor((hi[1] - lo[1]) / cell)) + 1
    ij = np.floor((xyz[:, :2] - lo) / cell).astype(np.int64)
    blocked = np.zeros((ny, nx), dtype=bool)
    bad = np.asarray(labels) != Label.GROUND
    blocked[ij[bad, 1], ij[bad, 0]] = True
    return blocked, (float(lo[0]), float(lo[1]))


_MOVES = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def naive_grid_plan(xyz: NDArray, labels: NDArray, request: PlanRequest, cell: float = 0.2) -> GridPath:
    """8-connected Dijkstra over free cells; ignores headings and lanes."""
    blocked, (ox, oy) = occupancy_grid(np.asarray(xyz), labels, cell)
    ny, nx = blocked.shape

    def to_cell(p: Pose) -> tuple[int, int]:
        i, j = int(math.floor((p.x - ox) / cell)), int(math.floor((p.y - oy) / cell))
        if not (0 <= i < nx and 0 <= j < ny):
            raise BlockedCellError(f"pose {p} lies outside the grid")
        if blocked[j, i]:
            raise BlockedCellError(f"pose {p} lies in a blocked cell")
        return j, i

    start, goal = to_cell(request.start), to_cell(request.goal)
    diag = math.sqrt(2.0)
    dist = {start: 0.0}
    parent = {}
    heap = [(0.0, start)]
    done = set()
    while heap:
        d, c = heapq.heappop(heap)
        if c in done:
            continue
        done.add(c)
        if c == goal:
            break
        j, i = c
        for dj, di in _MOVES:
            jj, ii = j + dj, i + di
            if not (0 <= jj < ny and 0 <= ii < nx) or blocked[jj, ii]:
                continue
            nd = d + (diag if dj and di else 1.0)
            if nd < dist.get((jj, ii), math.inf):
                dist[(jj, ii)] = nd
                parent[(jj, ii)] = c
                heapq.heappush(heap, (nd, (jj, ii)))
    if goal not in done:
        raise UnreachableError("goal cell not reachable on the occupancy grid")
    cells = [goal]
    while cells[-1] != start:
        cells.append(parent[cells[-1]])
    cells.reverse()
    pts = [(ox + (i + 0.5) * cell, oy + (j + 0.5) * cell) for j, i in cells]
    return GridPath(cells, pts, dist[goal] * cell, len(done))
