"""Sectioned pipeline configuration (YAML on disk).

Precedence, lowest to highest: built-in defaults, the config file, then
``--set section.key=value`` overrides on the command line.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .detector import BaselineDetectorParams
from .encoder import EncoderParams
from .graph import GraphParams
from .subdivision import WindowSpec
from .terrain import CsfParams


class ConfigError(ValueError):
    pass


@dataclass
class WindowSection:
    window_size_m: float = 10.0
    stride_m: float = 8.0
    max_canopy_diameter_m: float = 2.0


@dataclass
class EncoderSection:
    resolution: int = 128
    min_points: int = 100
    density_cap: float = 500.0


@dataclass
class DetectorSection:
    kind: str = "baseline"
    density_floor: float = 0.05
    min_cells: int = 20
    box_padding_m: float = 0.0
    external_dir: str = ""
    nms_iou: float = 0.5


@dataclass
class CsfSection:
    resolution_m: float = 0.1
    class_threshold_m: float = 0.1
    iterations: int = 500
    rigidness: int = 3
    time_step_s: float = 0.65
    gravity: float = 0.2
    damping: float = 0.01


@dataclass
class RowsSection:
    lateral_tolerance_m: float = 0.5
    min_trees_per_row: int = 3


@dataclass
class GraphSection:
    lane_offset_m: float | None = None
    end_extension_m: float = 2.0
    heading_tolerance_deg: float = 15.0
    clearance_min_m: float = 0.5
    snap_radius_m: float = 2.0
    canopy_radius_m: float | None = None


@dataclass
class EvalSection:
    iou_threshold: float = 0.5
    use_3d: bool = False


@dataclass
class PipelineConfig:
    input: str = ""
    output: str = "out"
    truth: str = ""
    seed: int = 0
    threads: int = 1
    window: WindowSection = field(default_factory=WindowSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    csf: CsfSection = field(default_factory=CsfSection)
    rows: RowsSection = field(default_factory=RowsSection)
    graph: GraphSection = field(default_factory=GraphSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -------------------------------------------------------------- typed views

    def window_spec(self) -> WindowSpec:
        w = self.window
        return WindowSpec(w.window_size_m, w.stride_m, w.max_canopy_diameter_m)

    def encoder_params(self) -> EncoderParams:
        e = self.encoder
        return EncoderParams(e.resolution, e.min_points, e.density_cap)

    def detector_params(self) -> BaselineDetectorParams:
        d = self.detector
        return BaselineDetectorParams(d.density_floor, d.min_cells, d.box_padding_m)

    def csf_params(self) -> CsfParams:
        c = self.csf
        return CsfParams(
            c.resolution_m, c.class_threshold_m, c.iterations, c.rigidness, c.time_step_s, c.gravity, c.damping
        )

    def graph_params(self) -> GraphParams:
        g = self.graph
        return GraphParams(
            lane_offset=g.lane_offset_m,
            end_extension=g.end_extension_m,
            heading_tolerance=math.radians(g.heading_tolerance_deg),
            clearance_min=g.clearance_min_m,
            snap_radius=g.snap_radius_m,
            canopy_radius=g.canopy_radius_m,
        )

    def validate(self) -> None:
        if self.detector.kind not in ("baseline", "external"):
            raise ConfigError(f"detector.kind must be 'baseline' or 'external', not {self.detector.kind!r}")
        if self.detector.kind == "external" and not self.detector.external_dir:
            raise ConfigError("detector.external_dir is required for the external detector")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.window_spec()
            self.encoder_params()
            self.detector_params()
            self.csf_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -------------------------------------------------------------- io

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        cfg = cls()
        _merge(cfg, d or {}, "")
        return cfg

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def override(self, assignments: list[str]) -> "PipelineConfig":
        """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
        out = copy.deepcopy(self)
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            dotted, raw = item.split("=", 1)
            tree: dict[str, Any] = {}
            cur = tree
            parts = dotted.strip().split(".")
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = yaml.safe_load(raw) if raw.strip() else ""
            _merge(out, tree, "")
        return out


def _coerce(value: Any, current: Any, name: str) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects true/false")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{name} expects an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number")
        return float(value)
    if isinstance(current, str):
        return str(value)
    return value


def _merge(obj: Any, data: dict, prefix: str) -> None:
    names = {f.name for f in fields(obj)}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {full!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ConfigError(f"{full} must be a section")
            _merge(current, value, full + ".")
        else:
            setattr(obj, key, _coerce(value, current, full))
