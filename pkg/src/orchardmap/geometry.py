"""Point-cloud containers, box primitives, IoU and non-maximum suppression."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from numpy.typing import NDArray

FORMATS = ("xyz", "ply", "pcd")


class ParseError(ValueError):
    """Raised when a point-cloud file cannot be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class EmptyMapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloudMap:
    """Immutable N×3 point array with optional per-point intensity."""

    xyz: NDArray[np.float64]
    intensity: NDArray[np.float64] | None = None
    _bounds: tuple[NDArray[np.float64], NDArray[np.float64]] | None = field(
        default=None, init=False, repr=False
    )

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        xyz.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            inten = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != xyz.shape[0]:
                raise ValueError("intensity length does not match point count")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)
        if len(xyz):
            object.__setattr__(self, "_bounds", (xyz.min(axis=0), xyz.max(axis=0)))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def bounds(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        if self._bounds is None:
            raise EmptyMapError("empty map has no bounds")
        return self._bounds

    def subset(self, indices: NDArray[np.intp]) -> "PointCloudMap":
        inten = None if self.intensity is None else self.intensity[indices]
        return PointCloudMap(self.xyz[indices], inten)


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self!r}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def translated(self, dx: float, dy: float) -> "Box2D":
        return Box2D(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains_xy(self, xy: NDArray[np.float64]) -> NDArray[np.bool_]:
        """Closed-interval membership of an (N, 2+) array of points."""
        return (
            (xy[:, 0] >= self.x_min)
            & (xy[:, 0] <= self.x_max)
            & (xy[:, 1] >= self.y_min)
            & (xy[:, 1] <= self.y_max)
        )


@dataclass(frozen=True)
class Box3D:
    footprint: Box2D
    z_min: float
    z_max: float

    def __post_init__(self):
        if not self.z_min < self.z_max:
            raise ValueError(f"degenerate z extent [{self.z_min}, {self.z_max}]")

    @property
    def volume(self) -> float:
        return self.footprint.area * (self.z_max - self.z_min)

    def translated(self, dx: float, dy: float) -> "Box3D":
        return Box3D(self.footprint.translated(dx, dy), self.z_min, self.z_max)

    def contains(self, xyz: NDArray[np.float64]) -> NDArray[np.bool_]:
        return self.footprint.contains_xy(xyz) & (xyz[:, 2] >= self.z_min) & (xyz[:, 2] <= self.z_max)


Box = Union[Box2D, Box3D]


def footprint(box: Box) -> Box2D:
    return box.footprint if isinstance(box, Box3D) else box


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def translated(self, dx: float, dy: float) -> "Detection":
        return Detection(self.box.translated(dx, dy), self.confidence, self.class_id)


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_3d(a: Box3D, b: Box3D) -> float:
    fa, fb = a.footprint, b.footprint
    iw = min(fa.x_max, fb.x_max) - max(fa.x_min, fb.x_min)
    ih = min(fa.y_max, fb.y_max) - max(fa.y_min, fb.y_min)
    iz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if iw <= 0 or ih <= 0 or iz <= 0:
        return 0.0
    inter = iw * ih * iz
    return inter / (a.volume + b.volume - inter)


def box_iou(a: Box, b: Box, use_3d: bool = False) -> float:
    if use_3d:
        if not (isinstance(a, Box3D) and isinstance(b, Box3D)):
            raise TypeError("3D IoU needs Box3D on both sides")
        return iou_3d(a, b)
    return iou_2d(footprint(a), footprint(b))


def _nms_key(det: Detection):
    fp = footprint(det.box)
    # ties on confidence go to the lower (x_min, y_min)
    return (-det.confidence, fp.x_min, fp.y_min)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression on footprint IoU.

    Returns the kept detections sorted by descending confidence.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(dets, key=_nms_key)
    kept: list[Detection] = []
    for det in order:
        fp = footprint(det.box)
        if all(iou_2d(fp, footprint(k.box)) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


# --------------------------------------------------------------------------
# serialization


def box_to_dict(box: Box) -> dict:
    fp = footprint(box)
    out = {"x_min": fp.x_min, "y_min": fp.y_min, "x_max": fp.x_max, "y_max": fp.y_max}
    if isinstance(box, Box3D):
        out["z_min"] = box.z_min
        out["z_max"] = box.z_max
    return out


def box_from_dict(d: dict) -> Box:
    fp = Box2D(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))
    if "z_min" in d and "z_max" in d:
        return Box3D(fp, float(d["z_min"]), float(d["z_max"]))
    return fp


def detection_to_dict(det: Detection) -> dict:
    return {"box": box_to_dict(det.box), "confidence": det.confidence, "class_id": det.class_id}


def detection_from_dict(d: dict) -> Detection:
    return Detection(box_from_dict(d["box"]), float(d["confidence"]), int(d.get("class_id", 0)))


def save_detections(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as f:
        json.dump([detection_to_dict(d) for d in dets], f, indent=1)
        f.write("\n")


def load_detections(path: str | Path) -> list[Detection]:
    with open(path) as f:
        return [detection_from_dict(d) for d in json.load(f)]


# --------------------------------------------------------------------------
# point-cloud files


def _format_from_path(path: Path) -> str:
    ext = path.suffix.lower().lstrip(".")
    if ext in ("xyz", "txt", "xyzi", "asc"):
        return "xyz"
    if ext in FORMATS:
        return ext
    raise ValueError(f"cannot infer point-cloud format from {path.name!r}")


def _parse_floats(tokens: list[str], lineno: int, path: str) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", lineno, path) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite coordinate", lineno, path)
    return vals


def _read_xyz(lines: list[str], path: str):
    rows = []
    has_intensity = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise ParseError(f"expected 3 or 4 columns, got {len(tokens)}", lineno, path)
        if has_intensity is None:
            has_intensity = len(tokens) == 4
        elif has_intensity != (len(tokens) == 4):
            raise ParseError("inconsistent column count", lineno, path)
        rows.append(_parse_floats(tokens, lineno, path))
    return rows, bool(has_intensity)


def _read_ply(lines: list[str], path: str):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    elements: list[tuple[str, int, list[str]]] = []
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"unsupported PLY format {' '.join(tokens[1:])!r}", lineno, path)
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno, path)
            try:
                elements.append((tokens[1], int(tokens[2]), []))
            except ValueError:
                raise ParseError("element count is not an integer", lineno, path) from None
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", lineno, path)
            if tokens[1] == "list":
                elements[-1][2].append("<list>")
            else:
                elements[-1][2].append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unknown header keyword {key!r}", lineno, path)
    if header_end is None:
        raise ParseError("missing end_header", len(lines), path)

    cursor = header_end  # 0-based index of first body line
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        try:
            ix, iy, iz = (props.index(c) for c in ("x", "y", "z"))
        except ValueError:
            raise ParseError("vertex element lacks x/y/z", header_end, path) from None
        ii = props.index("intensity") if "intensity" in props else None
        rows = []
        for k in range(count):
            lineno = cursor + k + 1
            if cursor + k >= len(lines):
                raise ParseError("unexpected end of file", lineno, path)
            tokens = lines[cursor + k].split()
            if len(tokens) < len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno, path)
            pick = [tokens[ix], tokens[iy], tokens[iz]] + ([tokens[ii]] if ii is not None else [])
            rows.append(_parse_floats(pick, lineno, path))
        return rows, ii is not None
    raise ParseError("no vertex element", header_end, path)


_PCD_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")


def _read_pcd(lines: list[str], path: str):
    fields_: list[str] | None = None
    npoints = None
    body_start = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        key = tokens[0].upper()
        if key not in _PCD_KEYS:
            raise ParseError(f"unknown header keyword {tokens[0]!r}", lineno, path)
        if key == "FIELDS":
            fields_ = tokens[1:]
        elif key == "POINTS":
            try:
                npoints = int(tokens[1])
            except (IndexError, ValueError):
                raise ParseError("malformed POINTS line", lineno, path) from None
        elif key == "DATA":
            if len(tokens) < 2 or tokens[1].lower() != "ascii":
                raise ParseError("only DATA ascii is supported", lineno, path)
            body_start = lineno
            break
    if body_start is None:
        raise ParseError("missing DATA line", len(lines), path)
    if fields_ is None:
        raise ParseError("missing FIELDS line", body_start, path)
    try:
        ix, iy, iz = (fields_.index(c) for c in ("x", "y", "z"))
    except ValueError:
        raise ParseError("FIELDS lacks x/y/z", body_start, path) from None
    ii = fields_.index("intensity") if "intensity" in fields_ else None
    rows = []
    for lineno, raw in enumerate(lines[body_start:], start=body_start + 1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != len(fields_):
            raise ParseError(f"expected {len(fields_)} values, got {len(tokens)}", lineno, path)
        pick = [tokens[ix], tokens[iy], tokens[iz]] + ([tokens[ii]] if ii is not None else [])
        rows.append(_parse_floats(pick, lineno, path))
    if npoints is not None and npoints != len(rows):
        raise ParseError(f"POINTS says {npoints} but body has {len(rows)}", len(lines), path)
    return rows, ii is not None


_READERS = {"xyz": _read_xyz, "ply": _read_ply, "pcd": _read_pcd}


def load_pointcloud(path: str | Path, fmt: str | None = None) -> PointCloudMap:
    """Load an ascii xyz / PLY / PCD file, preserving point order."""
    path = Path(path)
    fmt = fmt or _format_from_path(path)
    if fmt not in _READERS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    lines = path.read_text().splitlines()
    rows, has_intensity = _READERS[fmt](lines, str(path))
    if not rows:
        raise EmptyMapError(f"{path}: no valid points")
    arr = np.asarray(rows, dtype=np.float64)
    return PointCloudMap(arr[:, :3], arr[:, 3] if has_intensity else None)


def _body(cloud: PointCloudMap, extra: NDArray | None = None) -> str:
    cols = [cloud.xyz]
    if cloud.intensity is not None:
        cols.append(cloud.intensity[:, None])
    if extra is not None:
        cols.append(np.asarray(extra, dtype=np.float64).reshape(len(cloud), -1))
    data = np.hstack(cols)
    fmt = " ".join(["%.9f"] * 3 + ["%.9g"] * (data.shape[1] - 3))
    return "".join(fmt % tuple(row) + "\n" for row in data)


def save_pointcloud(path: str | Path, cloud: PointCloudMap, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or _format_from_path(path)
    n = len(cloud)
    has_i = cloud.intensity is not None
    if fmt == "xyz":
        header = "# x y z intensity\n" if has_i else "# x y z\n"
    elif fmt == "ply":
        header = "ply\nformat ascii 1.0\nelement vertex %d\n" % n
        header += "property double x\nproperty double y\nproperty double z\n"
        header += "property double intensity\n" if has_i else ""
        header += "end_header\n"
    elif fmt == "pcd":
        names = "x y z intensity" if has_i else "x y z"
        k = 4 if has_i else 3
        header = (
            "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n"
            f"FIELDS {names}\nSIZE {' '.join(['8'] * k)}\nTYPE {' '.join(['F'] * k)}\n"
            f"COUNT {' '.join(['1'] * k)}\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n"
            f"POINTS {n}\nDATA ascii\n"
        )
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w") as f:
        f.write(header)
        f.write(_body(cloud))


def save_labeled_xyz(path: str | Path, cloud: PointCloudMap, labels: NDArray) -> None:
    """Write "x y z label" rows (intensity dropped)."""
    data = np.hstack([cloud.xyz, np.asarray(labels).reshape(-1, 1)])
    with open(path, "w") as f:
        f.write("# x y z label\n")
        f.writelines("%.9f %.9f %.9f %d\n" % tuple(row) for row in data)
