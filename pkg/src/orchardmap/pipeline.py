"""Stage orchestration: windows, encode, detect, merge, terrain, lift, labels, rows and graph."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .detector import (
    BaselineDetector,
    BaselineDetectorParams,
    Detector,
    EmptyFootprintError,
    ExternalDetector,
    lift_to_3d,
)
from .encoder import EncoderParams, encode_window
from .geometry import Detection, PointCloudMap
from .graph import GraphParams, VisibilityGraph, build_graph
from .semantic import SemanticMap, detect_tree_rows, fuse_labels
from .subdivision import LocalWindow, WindowSpec, generate_windows, merge_window_detections
from .terrain import CsfParams, GroundSegmentation, csf_segment

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DetectionRun:
    windows: list[LocalWindow]
    per_window: list[list[Detection]]
    detections: list[Detection]
    timings: dict[str, float] = field(default_factory=dict)
    dropped_empty: int = 0


def _as_detector(detector: Detector | BaselineDetectorParams | None) -> Detector:
    if detector is None:
        return BaselineDetector()
    if isinstance(detector, BaselineDetectorParams):
        return BaselineDetector(detector)
    return detector


def detect_trees(
    cloud: PointCloudMap,
    spec: WindowSpec = WindowSpec(),
    encoder: EncoderParams = EncoderParams(),
    detector: Detector | BaselineDetectorParams | None = None,
    nms_iou: float = 0.5,
    threads: int = 1,
    lift: bool = True,
) -> DetectionRun:
    """Sliding-window detection over the whole map.

    With ``lift`` the merged footprints become 3D boxes spanning the z range
    of all points inside them; otherwise they stay 2D.

    Windows are independent, so encoding and detection may use ``threads``
    workers; results are gathered in window order, which keeps the output
    identical to a serial run.
    """
    det = _as_detector(detector)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    windows = generate_windows(cloud, spec)
    timings["subdivide"] = time.perf_counter() - t0

    if isinstance(det, ExternalDetector):
        for w in windows:
            det.register(w.origin, w.index)

    def encode(w):
        return encode_window(cloud, w, encoder)

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            images = list(ex.map(encode, windows))
    else:
        images = [encode(w) for w in windows]
    timings["encode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            per_window = list(ex.map(det.detect, images))
    else:
        per_window = [det.detect(img) for img in images]
    timings["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lo, hi = cloud.bounds
    merged = merge_window_detections(
        list(zip(windows, per_window)), nms_iou, map_bounds=((lo[0], lo[1]), (hi[0], hi[1]))
    )
    timings["merge"] = time.perf_counter() - t0

    run = DetectionRun(windows, per_window, merged, timings)
    if lift:
        t0 = time.perf_counter()
        run.detections, run.dropped_empty = lift_detections(merged, cloud.xyz)
        timings["lift"] = time.perf_counter() - t0
    return run


def lift_detections(dets: Sequence[Detection], points: NDArray[np.float64]) -> tuple[list[Detection], int]:
    """Lift every footprint against ``points``; footprints holding none are dropped and counted."""
    lifted, dropped = [], 0
    for d in dets:
        try:
            lifted.append(lift_to_3d(d, points))
        except EmptyFootprintError:
            dropped += 1
    if dropped:
        log.warning("dropped %d detections with no points in their footprint", dropped)
    return lifted, dropped


@dataclass
class PipelineResult:
    detection: DetectionRun | None = None
    ground: GroundSegmentation | None = None
    semantic: SemanticMap | None = None
    graph: VisibilityGraph | None = None
    timings: dict[str, float] = field(default_factory=dict)


def run_pipeline(
    cloud: PointCloudMap,
    spec: WindowSpec = WindowSpec(),
    encoder: EncoderParams = EncoderParams(),
    detector: Detector | BaselineDetectorParams | None = None,
    nms_iou: float = 0.5,
    csf: CsfParams = CsfParams(),
    row_tolerance: float = 0.5,
    min_trees_per_row: int = 3,
    graph_params: GraphParams = GraphParams(),
    threads: int = 1,
    result: PipelineResult | None = None,
) -> PipelineResult:
    """Run every stage in order.

    Pass ``result`` to collect partial outputs: when a stage raises, the
    stages that finished are already stored on it and a ``StageError`` names
    the one that failed.
    """
    res = result if result is not None else PipelineResult()

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:  # noqa: BLE001  re-raised with the stage name
            raise StageError(name, exc) from exc
        res.timings[name] = time.perf_counter() - t0
        return out

    res.detection = stage(
        "detect", lambda: detect_trees(cloud, spec, encoder, detector, nms_iou, threads, lift=False)
    )
    res.ground = stage("terrain", lambda: csf_segment(cloud, csf))
    # lift against non-ground points so boxes start above the terrain and
    # the ground beneath each crown keeps its ground label
    run = res.detection
    run.detections, run.dropped_empty = stage(
        "lift", lambda: lift_detections(run.detections, cloud.xyz[res.ground.nonground_indices])
    )
    res.semantic = stage("fuse", lambda: fuse_labels(cloud, res.detection.detections, res.ground))
    res.semantic.rows = stage(
        "rows", lambda: detect_tree_rows(res.semantic.trees, row_tolerance, min_trees_per_row)
    )
    res.graph = stage("graph", lambda: build_graph(res.semantic.rows, res.semantic.trees, graph_params))
    return res

