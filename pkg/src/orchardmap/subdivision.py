"""Sliding-window tiling of a global map and merging of per-window detections."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .geometry import Detection, EmptyMapError, PointCloudMap, footprint, nms

log = logging.getLogger(__name__)

_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class WindowSpec:
    window_size: float = 10.0
    stride: float = 8.0
    max_canopy_diameter: float = 2.0

    def __post_init__(self):
        if not 0 < self.stride <= self.window_size:
            raise ValueError("need 0 < stride <= window_size")
        if self.overlap < self.max_canopy_diameter:
            log.warning(
                "window overlap %.2f m is below the expected canopy diameter %.2f m; "
                "trees on window seams may be cut", self.overlap, self.max_canopy_diameter,
            )

    @property
    def overlap(self) -> float:
        return self.window_size - self.stride


@dataclass(frozen=True, eq=False)
class LocalWindow:
    index: int
    origin: tuple[float, float]
    size: float
    point_indices: NDArray[np.intp]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return (ox, oy, ox + self.size, oy + self.size)


def axis_origins(lo: float, hi: float, size: float, stride: float) -> list[float]:
    """Window origins along one axis: a regular stride grid whose last entry is
    pulled back so its far edge lands on ``hi``."""
    origins = [lo]
    while origins[-1] + size < hi - _EDGE_EPS:
        origins.append(lo + len(origins) * stride)
    if len(origins) > 1:
        origins[-1] = max(lo, hi - size)
    return origins


def generate_windows(cloud: PointCloudMap, spec: WindowSpec = WindowSpec()) -> list[LocalWindow]:
    """Cover the map footprint with square windows in row-major order (x fastest).

    Cells are half-open ``[origin, origin + size)`` except that a window whose far
    edge reaches the map maximum also keeps points lying exactly on that maximum.
    """
    if cloud.is_empty:
        raise EmptyMapError("cannot subdivide an empty map")
    lo, hi = cloud.bounds
    xs = axis_origins(lo[0], hi[0], spec.window_size, spec.stride)
    ys = axis_origins(lo[1], hi[1], spec.window_size, spec.stride)
    x, y = cloud.xyz[:, 0], cloud.xyz[:, 1]

    def axis_mask(coord, origin, top):
        far = origin + spec.window_size
        # (hi - size) + size can round below hi, so the closing edge is top itself
        upper = coord <= max(far, top) if far >= top - _EDGE_EPS else coord < far
        return (coord >= origin) & upper

    xmasks = [axis_mask(x, ox, hi[0]) for ox in xs]
    windows = []
    for oy in ys:
        ym = axis_mask(y, oy, hi[1])
        for ox, xm in zip(xs, xmasks):
            idx = np.flatnonzero(xm & ym)
            windows.append(LocalWindow(len(windows), (ox, oy), spec.window_size, idx))
    return windows


class WindowContractError(ValueError):
    pass


def touches_interior_edge(
    box_local, window: LocalWindow, map_lo: tuple[float, float], map_hi: tuple[float, float], tol: float = 1e-6
) -> bool:
    """True if a window-local footprint reaches a window edge that lies inside the map.

    Such a box may be a tree cut by the window seam; with overlap at least one
    canopy diameter the whole tree is seen by a neighbouring window.
    """
    fp = footprint(box_local)
    ox, oy = window.origin
    size = window.size
    if fp.x_min <= tol and ox > map_lo[0] + tol:
        return True
    if fp.y_min <= tol and oy > map_lo[1] + tol:
        return True
    if fp.x_max >= size - tol and ox + size < map_hi[0] - tol:
        return True
    if fp.y_max >= size - tol and oy + size < map_hi[1] - tol:
        return True
    return False


def merge_window_detections(
    per_window: Sequence[tuple[LocalWindow, Sequence[Detection]]],
    iou_threshold: float = 0.5,
    map_bounds: tuple[Sequence[float], Sequence[float]] | None = None,
    tol: float = 1e-6,
) -> list[Detection]:
    """Translate window-local detections to the global frame and run one NMS pass.

    With ``map_bounds`` given, detections truncated by an interior window seam
    are discarded before NMS.
    """
    merged: list[Detection] = []
    for window, dets in sorted(per_window, key=lambda p: p[0].index):
        ox, oy = window.origin
        for det in dets:
            fp = footprint(det.box)
            if (
                fp.x_min < -tol or fp.y_min < -tol
                or fp.x_max > window.size + tol or fp.y_max > window.size + tol
            ):
                raise WindowContractError(
                    f"detection {fp} outside window {window.index} extent [0, {window.size}]"
                )
            if map_bounds is not None and touches_interior_edge(fp, window, map_bounds[0], map_bounds[1]):
                continue
            merged.append(det.translated(ox, oy))
    return nms(merged, iou_threshold)


def coverage_counts(cloud: PointCloudMap, windows: Sequence[LocalWindow]) -> NDArray[np.int64]:
    counts = np.zeros(len(cloud), dtype=np.int64)
    for w in windows:
        counts[w.point_indices] += 1
    return counts

