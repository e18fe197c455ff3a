"""Detector slot on feature images, a density-blob baseline, and 2D->3D lifting."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .encoder import DENSITY, FeatureImage
from .geometry import Box2D, Box3D, Detection, detection_from_dict

LIFT_EPS = 0.01
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class Detector(Protocol):
    def detect(self, img: FeatureImage) -> list[Detection]:
        """Return detections with Box2D footprints in window-local meters."""
        ...


@dataclass(frozen=True)
class BaselineDetectorParams:
    density_floor: float = 0.05
    min_cells: int = 20
    box_padding: float = 0.0

    def __post_init__(self):
        if not 0 < self.density_floor < 1:
            raise ValueError("density_floor must lie in (0, 1)")
        if self.min_cells < 1:
            raise ValueError("min_cells must be >= 1")


def baseline_detect(img: FeatureImage, params: BaselineDetectorParams = BaselineDetectorParams()) -> list[Detection]:
    density = img.data[DENSITY]
    mask = density >= params.density_floor
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return []
    side = img.pillar_side
    size = img.window_size
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        cells = labels[sl] == k
        ncell = int(cells.sum())
        if ncell < params.min_cells:
            continue
        rows, cols = sl
        box = Box2D(
            max(0.0, cols.start * side - params.box_padding),
            max(0.0, rows.start * side - params.box_padding),
            min(size, cols.stop * side + params.box_padding),
            min(size, rows.stop * side + params.box_padding),
        )
        conf = float(density[sl][cells].mean())
        dets.append(Detection(box, min(1.0, conf), 0))
    return dets


class BaselineDetector:
    def __init__(self, params: BaselineDetectorParams = BaselineDetectorParams()):
        self.params = params

    def detect(self, img: FeatureImage) -> list[Detection]:
        return baseline_detect(img, self.params)


class ExternalDetector:
    """Reads precomputed window-local detections from ``<directory>/window_<index>.json``.

    Windows are looked up by image origin (see ``register``); a missing
    file means no detections for that window.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._index: dict[tuple[float, float], int] = {}

    def register(self, origin: tuple[float, float], index: int) -> None:
        self._index[(round(origin[0], 6), round(origin[1], 6))] = index

    def path_for(self, index: int) -> Path:
        return self.directory / f"window_{index:04d}.json"

    def detect(self, img: FeatureImage) -> list[Detection]:
        key = (round(img.origin[0], 6), round(img.origin[1], 6))
        if key not in self._index:
            raise KeyError(f"no window registered at origin {img.origin}")
        path = self.path_for(self._index[key])
        if not path.exists():
            return []
        return [detection_from_dict(d) for d in json.loads(path.read_text())]


class EmptyFootprintError(ValueError):
    pass


def lift_to_3d(det: Detection, points: NDArray[np.float64], eps: float = LIFT_EPS) -> Detection:
    """Give a footprint detection the z extent of the points standing inside it."""
    fp = det.box.footprint if isinstance(det.box, Box3D) else det.box
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[fp.contains_xy(pts), 2]
    if len(z) == 0:
        raise EmptyFootprintError(f"no points inside {fp}")
    z_lo, z_hi = float(z.min()), float(z.max())
    if z_hi <= z_lo:
        z_lo, z_hi = z_lo - eps, z_hi + eps
    return Detection(Box3D(fp, z_lo, z_hi), det.confidence, det.class_id)


def check_detections(dets: Sequence[Detection], window_size: float, tol: float = 1e-9) -> None:
    """Assert the detector-slot contract: boxes inside the window, confidence in [0, 1]."""
    for d in dets:
        fp = d.box.footprint if isinstance(d.box, Box3D) else d.box
        if fp.x_min < -tol or fp.y_min < -tol or fp.x_max > window_size + tol or fp.y_max > window_size + tol:
            raise ValueError(f"box {fp} leaves the window [0, {window_size}]")
        if not 0.0 <= d.confidence <= 1.0:
            raise ValueError(f"confidence {d.confidence} outside [0, 1]")
