from __future__ import annotations

import numpy as np
import pytest

from _oracles import expected_origins
from orchardmap.geometry import Box2D, Detection, EmptyMapError, PointCloudMap, iou_2d
from orchardmap.subdivision import (
    LocalWindow,
    WindowContractError,
    WindowSpec,
    axis_origins,
    coverage_counts,
    generate_windows,
    merge_window_detections,
)


def cloud_over(x_hi, y_hi, n=400, seed=0, x_lo=0.0, y_lo=0.0):
    rng = np.random.default_rng(seed)
    xyz = np.column_stack([
        rng.uniform(x_lo, x_hi, n), rng.uniform(y_lo, y_hi, n), rng.uniform(0, 3, n)
    ])
    # pin the extent exactly
    xyz[0, :2] = (x_lo, y_lo)
    xyz[1, :2] = (x_hi, y_hi)
    return PointCloudMap(xyz)


def test_origins_for_26m_span():
    assert axis_origins(0.0, 26.0, 10.0, 8.0) == [0.0, 8.0, 16.0]


def test_map_smaller_than_window_gives_one_window_at_min_corner():
    cloud = cloud_over(4.0, 3.0, x_lo=-2.0, y_lo=1.0)
    wins = generate_windows(cloud)
    assert len(wins) == 1
    assert wins[0].origin == (-2.0, 1.0)
    assert len(wins[0].point_indices) == len(cloud)


def test_default_overlap_is_two_metres():
    assert WindowSpec().overlap == 2.0


def test_small_overlap_warns(caplog):
    WindowSpec(10.0, 9.5, 2.0)
    assert "overlap" in caplog.text


@pytest.mark.parametrize("stride", [0.0, 11.0])
def test_bad_stride_rejected(stride):
    with pytest.raises(ValueError):
        WindowSpec(10.0, stride)


def test_empty_map_rejected():
    with pytest.raises(EmptyMapError):
        generate_windows(PointCloudMap(np.zeros((0, 3))))


def test_row_major_order_x_fastest():
    wins = generate_windows(cloud_over(26.0, 18.0))
    origins = [w.origin for w in wins]
    assert origins == [(x, y) for y in (0.0, 8.0) for x in (0.0, 8.0, 16.0)]
    assert [w.index for w in wins] == list(range(6))


@pytest.mark.parametrize("seed", range(25))
def test_random_extents_cover_every_point(seed):
    rng = np.random.default_rng(seed)
    x_lo, y_lo = rng.uniform(-50, 50, 2)
    w, h = rng.uniform(0.5, 60, 2)
    cloud = cloud_over(x_lo + w, y_lo + h, n=2000, seed=seed, x_lo=x_lo, y_lo=y_lo)
    wins = generate_windows(cloud)
    assert coverage_counts(cloud, wins).min() >= 1
    xs = sorted({wi.origin[0] for wi in wins})
    assert xs == pytest.approx(sorted(set(expected_origins(x_lo, x_lo + w, 10.0, 8.0))))
    for win in wins:
        local = cloud.xyz[win.point_indices, :2] - win.origin
        assert local.min() >= 0.0
        assert local.max() <= win.size + 1e-9


def test_map_maximum_covered_when_tail_origin_rounds():
    # (-29.9997 - 10) + 10 rounds one ulp below -29.9997
    cloud = cloud_over(20.0, -29.9997, x_lo=0.0, y_lo=-50.0)
    lo, hi = cloud.bounds
    assert (hi[1] - 10.0) + 10.0 < hi[1]
    assert coverage_counts(cloud, generate_windows(cloud)).min() == 1


def test_points_on_interior_seam_go_to_the_upper_window_only():
    xyz = np.array([[0, 0, 0], [10.0, 1, 0], [26, 1, 0]], dtype=float)
    wins = generate_windows(PointCloudMap(xyz))
    owners = [w.origin[0] for w in wins if 1 in w.point_indices]
    # x=10 is the far edge of window 0 (half-open) and interior of window 8
    assert owners == [8.0]


# ---------------------------------------------------------------- merge


def win(index, origin, size=10.0):
    return LocalWindow(index, origin, size, np.zeros(0, dtype=np.intp))


def test_merge_translates_to_global_frame():
    out = merge_window_detections([(win(0, (8.0, 0.0)), [Detection(Box2D(2, 2, 4, 4), 0.6)])])
    assert out == [Detection(Box2D(10, 2, 12, 4), 0.6)]


def test_duplicate_tree_in_two_windows_keeps_higher_confidence():
    # global footprints [8.2, 10] and [8.4, 10.2] in x, same y: IoU = 1.6 / 2.0 = 0.8
    a = (win(0, (0.0, 0.0)), [Detection(Box2D(8.2, 3, 10, 5), 0.7)])
    b = (win(1, (8.0, 0.0)), [Detection(Box2D(0.4, 3, 2.2, 5), 0.9)])
    assert iou_2d(Box2D(8.2, 3, 10, 5), Box2D(8.4, 3, 10.2, 5)) == pytest.approx(0.8)
    out = merge_window_detections([a, b], 0.5)
    assert len(out) == 1
    assert out[0].confidence == 0.9


def test_merge_of_nothing_is_empty():
    assert merge_window_detections([(win(0, (0, 0)), []), (win(1, (8, 0)), [])]) == []


def test_box_outside_window_violates_contract():
    with pytest.raises(WindowContractError):
        merge_window_detections([(win(0, (0, 0)), [Detection(Box2D(9, 0, 10.5, 1), 0.5)])])


def test_seam_truncated_boxes_dropped_but_map_edge_boxes_kept():
    bounds = ((0.0, 0.0), (18.0, 10.0))
    w0, w1 = win(0, (0.0, 0.0)), win(1, (8.0, 0.0))
    cut = Detection(Box2D(9.2, 4, 10.0, 5), 0.8)      # touches w0's interior right edge
    edge = Detection(Box2D(0.0, 4, 1.0, 5), 0.8)      # touches the map's left boundary
    whole = Detection(Box2D(1.2, 4, 3.0, 5), 0.8)     # inside w1, becomes [9.2, 11]
    out = merge_window_detections([(w0, [cut, edge]), (w1, [whole])], 0.5, map_bounds=bounds)
    assert Detection(Box2D(0.0, 4, 1.0, 5), 0.8) in out
    assert Detection(Box2D(9.2, 4, 11.0, 5), 0.8) in out
    assert len(out) == 2
