"""Bird's-eye-view pillar encoding of a local window into a 3-channel pseudo-image."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloudMap
from .subdivision import LocalWindow

DENSITY, HEIGHT, ANGLE = 0, 1, 2
CHANNEL_NAMES = ("density", "height", "angle")


@dataclass(frozen=True)
class EncoderParams:
    resolution: int = 128
    min_points: int = 100
    density_cap: float = 500.0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")
        if self.density_cap <= 0:
            raise ValueError("density_cap must be positive")


@dataclass(eq=False)
class FeatureImage:
    """Channels are indexed ``data[channel, row, col]`` with row = y cell, col = x cell."""

    data: NDArray[np.float64]
    window_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    z_range: tuple[float, float] = (0.0, 0.0)
    params: EncoderParams = field(default_factory=EncoderParams)

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]

    @property
    def pillar_side(self) -> float:
        return self.window_size / self.resolution

    @property
    def pillar_area(self) -> float:
        return self.pillar_side ** 2


def pillar_geometry(window_size: float, resolution: int) -> tuple[float, float]:
    side = window_size / resolution
    return side, side * side


def _degenerate_cov(cov: NDArray, lam_max: NDArray, mean: NDArray) -> NDArray[np.bool_]:
    scale = np.einsum("...i,...i->...", mean, mean) + 1.0
    return lam_max <= 1e-14 * scale


def principal_angle(points: NDArray[np.float64], return_flag: bool = False):
    """Angle in [0, pi/2] between the dominant covariance eigenvector and +z.

    Coincident input has no principal direction; pi/2 is returned and, with
    ``return_flag``, the second element of the result is True.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    mean = pts.mean(axis=0)
    d = pts - mean
    cov = d.T @ d / len(pts)
    w, v = np.linalg.eigh(cov)
    degenerate = bool(_degenerate_cov(cov, w[-1], mean))
    angle = math.pi / 2 if degenerate else float(np.arccos(min(1.0, abs(v[2, -1]))))
    return (angle, degenerate) if return_flag else angle


def pillar_stats(
    points: NDArray[np.float64],
    origin: tuple[float, float],
    window_size: float,
    resolution: int,
):
    """Per-cell point count, mean z and principal angle (flattened row-major, row = y).

    Points outside the window are ignored. Cells are half-open except the last
    row/column, which also takes points on the window's far edge.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    side = window_size / resolution
    ncell = resolution * resolution
    lx = pts[:, 0] - origin[0]
    ly = pts[:, 1] - origin[1]
    inside = (lx >= 0) & (lx <= window_size) & (ly >= 0) & (ly <= window_size)
    pts, lx, ly = pts[inside], lx[inside], ly[inside]
    ix = np.minimum((lx / side).astype(np.int64), resolution - 1)
    iy = np.minimum((ly / side).astype(np.int64), resolution - 1)
    cell = iy * resolution + ix

    count = np.bincount(cell, minlength=ncell)
    safe = np.maximum(count, 1)
    means = np.stack([np.bincount(cell, pts[:, k], ncell) / safe for k in range(3)], axis=1)
    d = pts - means[cell]
    cov = np.empty((ncell, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            c = np.bincount(cell, d[:, a] * d[:, b], ncell) / safe
            cov[:, a, b] = c
            cov[:, b, a] = c
    angle = np.full(ncell, math.pi / 2)
    occupied = np.flatnonzero(count >= 2)
    if len(occupied):
        w, v = np.linalg.eigh(cov[occupied])
        ok = ~_degenerate_cov(cov[occupied], w[:, -1], means[occupied])
        ang = np.arccos(np.minimum(1.0, np.abs(v[:, 2, -1])))
        angle[occupied[ok]] = ang[ok]
    return count, means[:, 2], angle, pts


def encode_pillars(
    points: NDArray[np.float64],
    origin: tuple[float, float] = (0.0, 0.0),
    window_size: float = 10.0,
    params: EncoderParams = EncoderParams(),
) -> FeatureImage:
    R = params.resolution
    count, mean_z, angle, inside = pillar_stats(points, origin, window_size, R)
    data = np.zeros((3, R * R))
    if len(inside):
        z_lo, z_hi = float(inside[:, 2].min()), float(inside[:, 2].max())
    else:
        z_lo = z_hi = 0.0
    keep = count > params.min_points
    if keep.any():
        data[DENSITY, keep] = np.minimum(count[keep] / params.density_cap, 1.0)
        if z_hi > z_lo:
            data[HEIGHT, keep] = np.clip((mean_z[keep] - z_lo) / (z_hi - z_lo), 0.0, 1.0)
        data[ANGLE, keep] = np.clip(angle[keep] / (math.pi / 2), 0.0, 1.0)
    return FeatureImage(data.reshape(3, R, R), window_size, tuple(origin), (z_lo, z_hi), params)


def encode_window(cloud: PointCloudMap, window: LocalWindow, params: EncoderParams = EncoderParams()) -> FeatureImage:
    return encode_pillars(cloud.xyz[window.point_indices], window.origin, window.size, params)


# --------------------------------------------------------------------------
# binary layout: <u32 R><u32 channels><f64 pillar_side> then float32 channel-major, row-major

_HEADER = struct.Struct("<IId")


def save_feature_image(path: str | Path, img: FeatureImage) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(img.resolution, 3, img.pillar_side))
        f.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
    sidecar = {
        "resolution": img.resolution,
        "window_size": img.window_size,
        "pillar_side": img.pillar_side,
        "origin": list(img.origin),
        "z_range": list(img.z_range),
        "min_points": img.params.min_points,
        "density_cap": img.params.density_cap,
        "channels": list(CHANNEL_NAMES),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_feature_image(path: str | Path) -> FeatureImage:
    path = Path(path)
    raw = path.read_bytes()
    R, nch, side = _HEADER.unpack_from(raw)
    if nch != 3:
        raise ValueError(f"expected 3 channels, got {nch}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=3 * R * R)
    meta_path = path.with_suffix(path.suffix + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    params = EncoderParams(R, int(meta.get("min_points", 100)), float(meta.get("density_cap", 500.0)))
    return FeatureImage(
        data.reshape(3, R, R).astype(np.float64),
        float(meta.get("window_size", side * R)),
        tuple(meta.get("origin", (0.0, 0.0))),
        tuple(meta.get("z_range", (0.0, 0.0))),
        params,
    )
