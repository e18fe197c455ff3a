from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import FIXTURE_DETECTOR, FIXTURE_ENCODER
from orchardmap.detector import ExternalDetector
from orchardmap.evaluation import eval_detections
from orchardmap.geometry import Box3D, Detection, detection_to_dict
from orchardmap.pipeline import PipelineResult, StageError, detect_trees, run_pipeline
from orchardmap.subdivision import WindowSpec


@pytest.fixture(scope="module")
def run_3x10(orchard_3x10):
    cloud, _ = orchard_3x10
    return detect_trees(cloud, encoder=FIXTURE_ENCODER, detector=FIXTURE_DETECTOR)


def test_fixture_detection_quality(orchard_3x10, run_3x10):
    _, truth = orchard_3x10
    res = eval_detections(run_3x10.detections, truth.tree_boxes)
    assert res.recall >= 0.9
    assert res.precision >= 0.9
    assert res.miou >= 0.6


def test_detections_are_lifted(run_3x10):
    assert all(isinstance(d.box, Box3D) for d in run_3x10.detections)


def test_window_grid_of_fixture(orchard_3x10, run_3x10):
    cloud, _ = orchard_3x10
    lo, hi = cloud.bounds
    assert run_3x10.windows[0].origin == (lo[0], lo[1])
    assert len(run_3x10.per_window) == len(run_3x10.windows)


def test_threads_do_not_change_result(orchard_2x5):
    cloud, _ = orchard_2x5
    a = detect_trees(cloud, encoder=FIXTURE_ENCODER, detector=FIXTURE_DETECTOR, threads=1)
    b = detect_trees(cloud, encoder=FIXTURE_ENCODER, detector=FIXTURE_DETECTOR, threads=4)
    assert a.detections == b.detections


def test_external_detector_slot(tmp_path, orchard_2x5):
    cloud, truth = orchard_2x5
    spec = WindowSpec()
    # hand the first truth footprint to whichever window fully contains it
    fp = truth.tree_boxes[0].footprint
    probe = detect_trees(cloud, spec, FIXTURE_ENCODER, ExternalDetector(tmp_path), lift=False)
    for w in probe.windows:
        ox, oy = w.origin
        if ox + 0.5 <= fp.x_min and fp.x_max <= ox + w.size - 0.5 and oy + 0.5 <= fp.y_min and fp.y_max <= oy + w.size - 0.5:
            local = Detection(fp.translated(-ox, -oy), 0.75)
            (tmp_path / f"window_{w.index:04d}.json").write_text(json.dumps([detection_to_dict(local)]))
            break
    run = detect_trees(cloud, spec, FIXTURE_ENCODER, ExternalDetector(tmp_path))
    assert len(run.detections) == 1
    got = run.detections[0].box.footprint
    np.testing.assert_allclose([got.x_min, got.y_min, got.x_max, got.y_max], [fp.x_min, fp.y_min, fp.x_max, fp.y_max])

def test_full_pipeline_on_small_orchard(orchard_2x5):
    cloud, _ = orchard_2x5
    res = run_pipeline(cloud, encoder=FIXTURE_ENCODER, detector=FIXTURE_DETECTOR)
    assert len(res.semantic.rows) == 2
    assert res.graph.strongly_connected()
    assert set(res.timings) == {"detect", "terrain", "lift", "fuse", "rows", "graph"}
    # crowns start above the terrain, so lifted boxes do not reach ground level
    assert min(d.box.z_min for d in res.detection.detections) > 0.05


def test_stage_failure_keeps_earlier_outputs(orchard_2x5):
    cloud, _ = orchard_2x5
    partial = PipelineResult()
    with pytest.raises(StageError) as info:
        run_pipeline(cloud, encoder=FIXTURE_ENCODER, detector=FIXTURE_DETECTOR,
                     min_trees_per_row=50, result=partial)
    assert info.value.stage == "graph"
    assert partial.detection is not None and partial.ground is not None
    assert partial.graph is None
