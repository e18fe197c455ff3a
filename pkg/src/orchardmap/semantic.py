"""Per-point semantic labels and tree-row extraction by iterative Hough voting."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .geometry import Box3D, Detection, PointCloudMap, detection_from_dict, detection_to_dict, footprint, save_labeled_xyz
from .terrain import GroundSegmentation

log = logging.getLogger(__name__)


class Label(IntEnum):
    GROUND = 0
    TREE = 1
    OBSTACLE = 2


@dataclass
class TreeRow:
    theta: float
    rho: float
    members: list[int]
    endpoints: tuple[tuple[float, float], tuple[float, float]]

    @property
    def normal(self) -> NDArray[np.float64]:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    @property
    def direction(self) -> NDArray[np.float64]:
        """Unit vector along the row; members are ordered along it."""
        return np.array([math.sin(self.theta), -math.cos(self.theta)])

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "rho": self.rho,
            "members": list(self.members),
            "endpoints": [list(self.endpoints[0]), list(self.endpoints[1])],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeRow":
        a, b = d["endpoints"]
        return cls(float(d["theta"]), float(d["rho"]), [int(m) for m in d["members"]], (tuple(a), tuple(b)))


@dataclass(eq=False)
class SemanticMap:
    labels: NDArray[np.int8]
    trees: list[Detection] = field(default_factory=list)
    rows: list[TreeRow] = field(default_factory=list)

    @property
    def unassigned_trees(self) -> list[int]:
        used = {m for r in self.rows for m in r.members}
        return [k for k in range(len(self.trees)) if k not in used]

    def counts(self) -> dict[str, int]:
        return {lab.name.lower(): int(np.count_nonzero(self.labels == lab)) for lab in Label}

    def tree_centers(self) -> NDArray[np.float64]:
        return tree_centers(self.trees)

    def to_dict(self) -> dict:
        return {
            "trees": [detection_to_dict(t) for t in self.trees],
            "rows": [r.to_dict() for r in self.rows],
            "unassigned_trees": self.unassigned_trees,
            "label_counts": self.counts(),
        }

    def save(self, json_path: str | Path, cloud: PointCloudMap | None = None, xyz_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        if cloud is not None and xyz_path is not None:
            save_labeled_xyz(xyz_path, cloud, self.labels)

    @classmethod
    def load(cls, json_path: str | Path, labels: NDArray | None = None) -> "SemanticMap":
        d = json.loads(Path(json_path).read_text())
        return cls(
            np.asarray(labels if labels is not None else [], dtype=np.int8),
            [detection_from_dict(t) for t in d["trees"]],
            [TreeRow.from_dict(r) for r in d["rows"]],
        )


def tree_centers(trees: Sequence[Detection]) -> NDArray[np.float64]:
    if not trees:
        return np.zeros((0, 2))
    return np.array([footprint(t.box).center for t in trees], dtype=np.float64)


def fuse_labels(cloud: PointCloudMap, trees: Sequence[Detection], ground: GroundSegmentation) -> SemanticMap:
    """Tree box membership beats the ground set; everything else is an obstacle."""
    n = len(cloud)
    labels = np.full(n, Label.OBSTACLE, dtype=np.int8)
    labels[ground.ground_indices] = Label.GROUND
    xyz = cloud.xyz
    for t in trees:
        if isinstance(t.box, Box3D):
            inside = t.box.contains(xyz)
        else:
            inside = t.box.contains_xy(xyz)
        labels[inside] = Label.TREE
    return SemanticMap(labels, list(trees))


# --------------------------------------------------------------------------
# rows


def _normal_form(direction: NDArray, point: NDArray) -> tuple[float, float]:
    """(theta, rho) with theta in [0, pi) for the line through ``point`` along ``direction``."""
    nx, ny = -direction[1], direction[0]
    theta = math.atan2(ny, nx)
    if theta < 0:
        theta += math.pi
        nx, ny = -nx, -ny
    if theta >= math.pi:
        theta -= math.pi
        nx, ny = -nx, -ny
    return theta, float(nx * point[0] + ny * point[1])


def fit_line(points: NDArray[np.float64]) -> tuple[float, float]:
    """Orthogonal least-squares line through 2D points, in (theta, rho) normal form."""
    mean = points.mean(axis=0)
    d = points - mean
    _, _, vt = np.linalg.svd(d, full_matrices=False)
    return _normal_form(vt[0], mean)


def _line_distance(points: NDArray, theta: float, rho: float) -> NDArray:
    return np.abs(points[:, 0] * math.cos(theta) + points[:, 1] * math.sin(theta) - rho)


def _make_row(centers: NDArray, members: NDArray, theta: float, rho: float) -> TreeRow:
    direction = np.array([math.sin(theta), -math.cos(theta)])
    normal = np.array([math.cos(theta), math.sin(theta)])
    t = centers[members] @ direction
    order = np.lexsort((members, t))
    members = members[order]
    t = t[order]
    ends = tuple(tuple(float(v) for v in rho * normal + tt * direction) for tt in (t[0], t[-1]))
    return TreeRow(theta, rho, [int(m) for m in members], ends)


def detect_rows_from_centers(
    centers: NDArray[np.float64],
    lateral_tolerance: float = 0.5,
    min_trees_per_row: int = 3,
    theta_bins: int = 180,
) -> list[TreeRow]:
    """Peak-pick / assign / refit / remove until no accumulator peak reaches ``min_trees_per_row``."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    min_trees_per_row = max(2, int(min_trees_per_row))
    thetas = np.arange(theta_bins) * (math.pi / theta_bins)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    bin_w = lateral_tolerance / 2
    # votes within this many neighbouring rho bins are all inside the tolerance
    k = max(0, int(math.floor(lateral_tolerance / bin_w - 0.5)))
    kernel = np.ones(2 * k + 1)

    remaining = np.arange(len(centers))
    rows: list[TreeRow] = []
    while len(remaining) >= min_trees_per_row:
        pts = centers[remaining]
        rho = pts[:, :1] * cos_t + pts[:, 1:] * sin_t
        base = math.floor(rho.min() / bin_w)
        ridx = np.floor(rho / bin_w).astype(np.int64) - base
        nrho = int(ridx.max()) + 1
        acc = np.zeros((theta_bins, nrho))
        np.add.at(acc, (np.broadcast_to(np.arange(theta_bins), ridx.shape), ridx), 1.0)
        smooth = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, acc) if k else acc
        flat = np.lexsort((np.arange(acc.size), -acc.ravel(), -smooth.ravel()))
        peak = flat[0]
        if smooth.ravel()[peak] < min_trees_per_row:
            break
        ti, ri = divmod(int(peak), nrho)
        theta0, rho0 = float(thetas[ti]), (ri + base + 0.5) * bin_w

        members = remaining[_line_distance(pts, theta0, rho0) <= lateral_tolerance]
        if len(members) < min_trees_per_row:
            break
        theta, rho_fit = fit_line(centers[members])
        refined = remaining[_line_distance(pts, theta, rho_fit) <= lateral_tolerance]
        if len(refined) >= min_trees_per_row:
            members = refined
            theta, rho_fit = fit_line(centers[members])
        rows.append(_make_row(centers, members, theta, rho_fit))
        remaining = np.setdiff1d(remaining, members, assume_unique=True)
    return rows


def detect_tree_rows(
    trees: Sequence[Detection], lateral_tolerance: float = 0.5, min_trees_per_row: int = 3
) -> list[TreeRow]:
    if len(trees) < min_trees_per_row:
        return []
    rows = detect_rows_from_centers(tree_centers(trees), lateral_tolerance, min_trees_per_row)
    used = sum(len(r.members) for r in rows)
    if used < len(trees):
        log.info("%d of %d trees not assigned to any row", len(trees) - used, len(trees))
    return rows


def rows_from_center_lists(groups: Sequence[Sequence[Sequence[float]]]) -> tuple[NDArray[np.float64], list[TreeRow]]:
    """Build rows directly from hand-placed tree positions, one list per row.

    Returns the stacked centers and rows whose members index into them.
    """
    centers, rows = [], []
    for group in groups:
        pts = np.asarray(group, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("each manual row needs at least two trees")
        start = sum(len(c) for c in centers)
        centers.append(pts)
        members = np.arange(start, start + len(pts))
        theta, rho = fit_line(pts)
        rows.append((members, theta, rho))
    allc = np.vstack(centers) if centers else np.zeros((0, 2))
    return allc, [_make_row(allc, m, th, rh) for m, th, rh in rows]
