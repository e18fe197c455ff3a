"""Detection metrics (mIoU, 11-point AP) and the window-size / resolution study."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import BaselineDetectorParams
from .encoder import EncoderParams
from .geometry import Box, Detection, PointCloudMap, box_iou, footprint
from .pipeline import detect_trees
from .subdivision import WindowSpec
from .terrain import compute_ser_sar  # noqa: F401  re-exported for the eval CLI


@dataclass
class Match:
    pred: int
    truth: int
    iou: float


@dataclass
class DetectionEvalResult:
    miou: float
    map50: float
    matches: list[Match]
    n_pred: int
    n_truth: int
    miou_defined: bool = True
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return len(self.matches) / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return len(self.matches) / self.n_truth

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_defined": self.miou_defined,
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "n_pred": self.n_pred,
            "n_truth": self.n_truth,
            "matches": [[m.pred, m.truth, m.iou] for m in self.matches],
            "timing": self.timing,
        }


def _confidence_order(preds: Sequence[Detection]) -> list[int]:
    def key(k):
        fp = footprint(preds[k].box)
        return (-preds[k].confidence, fp.x_min, fp.y_min, k)

    return sorted(range(len(preds)), key=key)


def greedy_match(
    preds: Sequence[Detection], truths: Sequence[Box], iou_threshold: float = 0.5, use_3d: bool = False
) -> tuple[list[Match], list[int]]:
    """Match in descending confidence; returns matches and the evaluation order."""
    order = _confidence_order(preds)
    taken: set[int] = set()
    matches = []
    for p in order:
        best, best_iou = -1, -1.0
        for t, tb in enumerate(truths):
            if t in taken:
                continue
            v = box_iou(preds[p].box, tb, use_3d)
            if v > best_iou:
                best, best_iou = t, v
        if best >= 0 and best_iou >= iou_threshold:
            taken.add(best)
            matches.append(Match(p, best, best_iou))
    return matches, order


def average_precision_11(tp_flags: Sequence[bool], n_truth: int) -> float:
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / n_truth
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11


def eval_detections(
    preds: Sequence[Detection], truths: Sequence[Box], iou_threshold: float = 0.5, use_3d: bool = False
) -> DetectionEvalResult:
    if not truths:
        raise ValueError("cannot evaluate against an empty truth set")
    matches, order = greedy_match(preds, truths, iou_threshold, use_3d)
    matched = {m.pred for m in matches}
    ap = average_precision_11([p in matched for p in order], len(truths))
    if matches:
        miou, defined = float(np.mean([m.iou for m in matches])), True
    else:
        miou, defined = 0.0, False
    return DetectionEvalResult(miou, ap, matches, len(preds), len(truths), defined)


# --------------------------------------------------------------------------
# study


@dataclass
class StudyRow:
    window_size: float
    resolution: int
    feature_time_per_window: float
    feature_time_total: float
    predict_time_per_window: float
    predict_time_total: float
    miou: float
    windows: int

    @property
    def strategy(self) -> str:
        s = f"{self.window_size:g}m"
        return f"{s}×{s}+{self.resolution}×{self.resolution}"

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, **self.__dict__}


def run_subdivision_study(
    cloud: PointCloudMap,
    truths: Sequence[Box],
    sizes: Sequence[float] = (5.0, 10.0, 20.0),
    resolutions: Sequence[int] = (64, 128, 256),
    repeats: int = 5,
    overlap: float = 2.0,
    encoder: EncoderParams = EncoderParams(),
    detector: BaselineDetectorParams = BaselineDetectorParams(),
    iou_threshold: float = 0.5,
    reference: tuple[float, int] = (10.0, 128),
    scale_thresholds: bool = True,
) -> list[StudyRow]:
    """Sweep window size x resolution with the baseline detector.

    ``encoder`` and ``detector`` are tuned for the ``reference`` (size,
    resolution) pair. With ``scale_thresholds`` the per-pillar point counts
    follow the pillar area and the minimum blob size follows its inverse, so
    every cell of the sweep asks for the same physical density and crown area.

    Times are medians over ``repeats`` serial runs; the per-window figures are
    the mean over windows within a run.
    """
    ref_area = (reference[0] / reference[1]) ** 2
    out = []
    for res in resolutions:
        for size in sizes:
            spec = WindowSpec(size, size - overlap, max_canopy_diameter=overlap)
            k = (size / res) ** 2 / ref_area if scale_thresholds else 1.0
            enc = EncoderParams(res, round(encoder.min_points * k), encoder.density_cap * k)
            det = BaselineDetectorParams(
                detector.density_floor, max(1, round(detector.min_cells / k)), detector.box_padding
            )
            runs = []
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                run = detect_trees(cloud, spec, enc, det, iou_threshold)
                run.timings["wall"] = time.perf_counter() - t0
                runs.append(run)
            ev = eval_detections(runs[0].detections, truths, iou_threshold)
            nwin = len(runs[0].windows)
            med = lambda key: statistics.median(r.timings[key] for r in runs)  # noqa: E731
            out.append(StudyRow(
                size, res,
                med("encode") / nwin, med("encode"),
                med("detect") / nwin, med("detect"),
                ev.miou, nwin,
            ))
    return out


def write_study(rows: Sequence[StudyRow], csv_path: str | Path | None = None, json_path: str | Path | None = None) -> None:
    dicts = [r.to_dict() for r in rows]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(dicts[0]))
            w.writeheader()
            w.writerows(dicts)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(dicts, indent=1) + "\n")


def format_study(rows: Sequence[StudyRow]) -> str:
    lines = [f"{'strategy':<18} {'feature map time (s)':>20} {'Predict time (s)':>17} {'mIoU':>6}"]
    for r in rows:
        lines.append(
            f"{r.strategy:<18} {r.feature_time_per_window:>20.4f} {r.predict_time_per_window:>17.4f} {r.miou:>6.3f}"
        )
    return "\n".join(lines)
