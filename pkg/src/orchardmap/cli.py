"""Command-line entry point: ``orchardmap <subcommand> ...``.

Configuration precedence, lowest to highest: built-in defaults, the YAML file
given with ``--config``, then each ``--set section.key=value``. Commands that
take a config write the fully resolved config next to their outputs.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 stage failure, 5 planning
failure (unreachable goal or pose off the graph).
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig
from .detector import BaselineDetector, ExternalDetector
from .evaluation import eval_detections, format_study, run_subdivision_study, write_study
from .geometry import ParseError, load_detections, load_pointcloud, save_detections, save_pointcloud
from .graph import (
    OffGraphError,
    PlanRequest,
    Pose,
    UnreachableError,
    VisibilityGraph,
    build_graph,
    plan_path,
)
from .pipeline import PipelineResult, StageError, detect_trees, run_pipeline
from .semantic import SemanticMap, TreeRow, detect_tree_rows, rows_from_center_lists
from .synthetic import GroundProfile, GroundTruth, OrchardSpec, SpecError, generate
from .terrain import compute_ser_sar, csf_segment, load_segmentation, save_segmentation

log = logging.getLogger("orchardmap")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STAGE, EXIT_PLAN = 0, 2, 3, 4, 5

# Detector settings matched to the synthetic fixture's point density; the
# library defaults assume a dense survey-grade map.
FIXTURE_ENCODER = {"min_points": 2, "density_cap": 10.0}
FIXTURE_DETECTOR = {"density_floor": 0.05, "min_cells": 20}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _pose(text: str) -> Pose:
    try:
        x, y, h = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pose must be x,y,heading_rad, got {text!r}") from None
    return Pose(x, y, h)


# ---------------------------------------------------------------- config


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}", EXIT_IO)
        cfg = PipelineConfig.load(path)
        base = path.resolve().parent
    else:
        cfg = PipelineConfig()
        base = Path.cwd()
    cfg = cfg.override(getattr(args, "set", None) or [])
    for name in ("input", "output", "truth"):
        cli_value = getattr(args, name, None)
        if cli_value:
            setattr(cfg, name, str(Path(cli_value).resolve()))
        elif getattr(cfg, name) and not Path(getattr(cfg, name)).is_absolute():
            setattr(cfg, name, str((base / getattr(cfg, name)).resolve()))
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def _read_cloud(cfg: PipelineConfig):
    if not cfg.input:
        raise CliError("no input cloud (set `input` in the config or pass --input)", EXIT_CONFIG)
    if not Path(cfg.input).exists():
        raise CliError(f"input not found: {cfg.input}", EXIT_IO)
    return load_pointcloud(cfg.input)


def _detector(cfg: PipelineConfig):
    if cfg.detector.kind == "external":
        return ExternalDetector(cfg.detector.external_dir)
    return BaselineDetector(cfg.detector_params())


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    ground = GroundProfile(args.ground, args.grade, args.amplitude, args.wavelength)
    spec = OrchardSpec(
        rows=args.rows, trees_per_row=args.trees_per_row, row_spacing=args.row_spacing,
        tree_spacing=args.tree_spacing, ground=ground, point_density=args.density, seed=args.seed,
    )
    try:
        spec.validate()
    except SpecError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    cloud, truth = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud_name = f"cloud.{args.format}"
    save_pointcloud(out / cloud_name, cloud, args.format)
    truth.save(out / "truth.json")
    cfg = PipelineConfig.from_dict({
        "input": cloud_name, "output": "run", "truth": "truth.json", "seed": args.seed,
        "encoder": FIXTURE_ENCODER, "detector": FIXTURE_DETECTOR,
    })
    cfg.dump(out / "pipeline.yaml")
    print(f"wrote {len(cloud)} points, {len(truth.tree_boxes)} trees to {out}")
    return EXIT_OK


def _write_pipeline_outputs(out: Path, cloud, res: PipelineResult) -> list[str]:
    written = []
    if res.detection is not None:
        save_detections(out / "detections.json", res.detection.detections)
        written.append("detections.json")
    if res.ground is not None:
        save_segmentation(out / "segmentation.json", res.ground)
        written.append("segmentation.json")
    if res.semantic is not None:
        res.semantic.save(out / "semantic.json", cloud, out / "labels.xyz")
        written += ["semantic.json", "labels.xyz"]
    if res.graph is not None:
        res.graph.save(out / "graph.json")
        written.append("graph.json")
    return written


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    cloud = _read_cloud(cfg)
    out = _out_dir(cfg)
    cfg.dump(out / "config.resolved.yaml")
    res = PipelineResult()
    failed = None
    try:
        run_pipeline(
            cloud, cfg.window_spec(), cfg.encoder_params(), _detector(cfg), cfg.detector.nms_iou,
            cfg.csf_params(), cfg.rows.lateral_tolerance_m, cfg.rows.min_trees_per_row,
            cfg.graph_params(), cfg.threads, result=res,
        )
    except StageError as exc:
        failed = exc
    written = _write_pipeline_outputs(out, cloud, res)
    manifest = {
        "complete": failed is None,
        "failed_stage": failed.stage if failed else None,
        "error": str(failed.cause) if failed else None,
        "files": ["config.resolved.yaml", *written],
    }
    if res.graph is not None:
        manifest["strongly_connected"] = res.graph.strongly_connected()
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timings.json", res.timings)
    for name, secs in res.timings.items():
        print(f"{name:<8} {secs * 1e3:9.1f} ms")
    if failed:
        raise CliError(str(failed), EXIT_STAGE)
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    cloud = _read_cloud(cfg)
    out = _out_dir(cfg)
    cfg.dump(out / "config.resolved.yaml")
    try:
        run = detect_trees(
            cloud, cfg.window_spec(), cfg.encoder_params(), _detector(cfg), cfg.detector.nms_iou, cfg.threads
        )
    except Exception as exc:  # noqa: BLE001
        raise CliError(f"stage 'detect' failed: {exc}", EXIT_STAGE) from exc
    save_detections(out / "detections.json", run.detections)
    _write_json(out / "timings.json", run.timings)
    print(f"{len(run.detections)} trees from {len(run.windows)} windows")
    return EXIT_OK


def cmd_terrain(args) -> int:
    cfg = _load_config(args)
    cloud = _read_cloud(cfg)
    out = _out_dir(cfg)
    cfg.dump(out / "config.resolved.yaml")
    t0 = time.perf_counter()
    try:
        seg = csf_segment(cloud, cfg.csf_params())
    except Exception as exc:  # noqa: BLE001
        raise CliError(f"stage 'terrain' failed: {exc}", EXIT_STAGE) from exc
    elapsed = time.perf_counter() - t0
    save_segmentation(out / "segmentation.json", seg)
    _write_json(out / "timings.json", {"terrain": elapsed})
    print(f"{len(seg.ground_indices)} ground / {len(seg.nonground_indices)} non-ground, "
          f"{seg.iterations_run} iterations, {elapsed:.3f} s")
    return EXIT_OK


def cmd_rows(args) -> int:
    if args.manual:
        groups = json.loads(Path(args.manual).read_text())
        try:
            centers, rows = rows_from_center_lists(groups)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_STAGE) from exc
        _write_json(Path(args.out), {"centers": centers.tolist(), "rows": [r.to_dict() for r in rows]})
    else:
        trees = load_detections(args.detections)
        rows = detect_tree_rows(trees, args.tolerance, args.min_trees)
        SemanticMap(np.zeros(0, dtype=np.int8), trees, rows).save(args.out)
    print(f"{len(rows)} rows")
    return EXIT_OK


def cmd_graph(args) -> int:
    cfg = _load_config(args)
    data = json.loads(Path(args.semantic).read_text())
    if "centers" in data:
        trees = np.asarray(data["centers"], dtype=np.float64).reshape(-1, 2)
        rows = [TreeRow.from_dict(r) for r in data["rows"]]
    else:
        sm = SemanticMap.load(args.semantic)
        trees, rows = sm.trees, sm.rows
    try:
        graph = build_graph(rows, trees, cfg.graph_params())
    except ValueError as exc:
        raise CliError(f"stage 'graph' failed: {exc}", EXIT_STAGE) from exc
    graph.save(args.out)
    print(f"{len(graph.nodes)} nodes, {len(graph.edges)} edges, strongly connected: {graph.strongly_connected()}")
    return EXIT_OK


def cmd_plan(args) -> int:
    graph = VisibilityGraph.load(args.graph)
    if args.batch:
        rng = np.random.default_rng(args.seed)
        start = args.start or _node_pose(graph, int(rng.integers(len(graph.nodes))))
        results, latencies = [], []
        for goal_id in rng.integers(len(graph.nodes), size=args.batch):
            path = plan_path(graph, PlanRequest(start, _node_pose(graph, int(goal_id))))
            latencies.append(path.elapsed_s)
            results.append(path.to_dict(graph))
        report = {
            "start": [start.x, start.y, start.heading],
            "paths": results,
            "median_latency_ms": statistics.median(latencies) * 1e3,
            "max_latency_ms": max(latencies) * 1e3,
        }
        if args.out:
            _write_json(Path(args.out), report)
        print(f"{len(results)} / {args.batch} planned, median {report['median_latency_ms']:.3f} ms, "
              f"max {report['max_latency_ms']:.3f} ms")
        return EXIT_OK
    if args.start is None or args.goal is None:
        raise CliError("plan needs --start and --goal (or --batch)", EXIT_CONFIG)
    path = plan_path(graph, PlanRequest(args.start, args.goal))
    if args.out:
        _write_json(Path(args.out), {**path.to_dict(graph), "elapsed_ms": path.elapsed_s * 1e3})
    print(f"{len(path.nodes)} nodes, {path.length:.2f} m, {path.elapsed_s * 1e3:.3f} ms")
    return EXIT_OK


def _node_pose(graph: VisibilityGraph, k: int) -> Pose:
    n = graph.nodes[k]
    return Pose(n.x, n.y, n.heading)


def cmd_eval(args) -> int:
    truth = GroundTruth.load(args.truth)
    report = {}
    if args.study:
        cfg = _load_config(args)
        cloud = _read_cloud(cfg)
        rows = run_subdivision_study(
            cloud, truth.tree_boxes, repeats=args.repeats, encoder=cfg.encoder_params(),
            detector=cfg.detector_params(), iou_threshold=cfg.eval.iou_threshold,
        )
        print(format_study(rows))
        if args.out:
            write_study(rows, Path(args.out).with_suffix(".csv"), Path(args.out).with_suffix(".json"))
        return EXIT_OK
    if args.detections:
        res = eval_detections(load_detections(args.detections), truth.tree_boxes, args.iou, args.use_3d)
        report["detection"] = res.to_dict()
        print(f"mIoU {res.miou:.3f}  mAP50 {res.map50:.3f}  precision {res.precision:.3f}  recall {res.recall:.3f}")
    if args.segmentation:
        ser, sar = compute_ser_sar(load_segmentation(args.segmentation), truth.ground_indices)
        report["terrain"] = {"ser": ser, "sar": sar}
        print(f"SER {ser:.4f}  SAR {sar:.4f}")
    if not report:
        raise CliError("eval needs --detections, --segmentation or --study", EXIT_CONFIG)
    if args.out:
        _write_json(Path(args.out), report)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML pipeline config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--input", help="point cloud (.xyz, .ply, .pcd); overrides config")
    p.add_argument("--output", help="output directory; overrides config")
    p.add_argument("--threads", type=int, help="worker cap for per-window stages")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orchardmap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic orchard, its truth and a matching config")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--trees-per-row", type=int, default=10)
    p.add_argument("--row-spacing", type=float, default=5.0)
    p.add_argument("--tree-spacing", type=float, default=4.0)
    p.add_argument("--density", type=float, default=100.0, help="ground points per m^2")
    p.add_argument("--ground", choices=("flat", "slope", "rolling"), default="flat")
    p.add_argument("--grade", type=float, default=0.0)
    p.add_argument("--amplitude", type=float, default=0.0)
    p.add_argument("--wavelength", type=float, default=10.0)
    p.add_argument("--format", choices=("xyz", "ply", "pcd"), default="xyz")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    for name, fn, text in (
        ("pipeline", cmd_pipeline, "run every stage and write all artifacts"),
        ("detect", cmd_detect, "sliding-window tree detection only"),
        ("terrain", cmd_terrain, "cloth-simulation ground filter only"),
    ):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("rows", help="extract tree rows from detections or hand-placed trees")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--detections")
    src.add_argument("--manual", help="JSON list of rows, each a list of [x, y] tree positions")
    p.add_argument("--tolerance", type=float, default=0.5)
    p.add_argument("--min-trees", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rows)

    p = sub.add_parser("graph", help="build the lane graph from a semantic map or rows file")
    p.add_argument("--semantic", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("plan", help="plan between poses on a saved graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--start", type=_pose, help="x,y,heading_rad")
    p.add_argument("--goal", type=_pose, help="x,y,heading_rad")
    p.add_argument("--batch", type=int, default=0, help="plan to N random node goals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="score detections / ground segmentation, or run the window study")
    _add_config_args(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--detections")
    p.add_argument("--segmentation")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--use-3d", action="store_true")
    p.add_argument("--study", action="store_true", help="sweep window size x resolution")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UnreachableError, OffGraphError) as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
