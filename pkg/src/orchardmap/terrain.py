"""Cloth-simulation ground filter and ground-segmentation metrics.

The cloth is a lattice of unit-mass particles that only move vertically. It is
dropped onto the z-inverted cloud and integrated with a position (Verlet) step
so that gravity, spring relaxation between neighbours and velocity damping all
act on particle heights; a particle that reaches the inverted surface is pinned.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .geometry import EmptyMapError, PointCloudMap

log = logging.getLogger(__name__)

SETTLE_TOL = 1e-4


@dataclass(frozen=True)
class CsfParams:
    cloth_resolution: float = 0.1
    class_threshold: float = 0.1
    iterations: int = 500
    rigidness: int = 3
    time_step: float = 0.65
    gravity: float = 0.2
    damping: float = 0.01
    mass: float = 1.0

    def __post_init__(self):
        problems = []
        if self.cloth_resolution <= 0:
            problems.append("cloth_resolution must be > 0")
        if self.class_threshold <= 0:
            problems.append("class_threshold must be > 0")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.rigidness not in (1, 2, 3):
            problems.append("rigidness must be 1, 2 or 3")
        if self.time_step <= 0:
            problems.append("time_step must be > 0")
        if not 0 <= self.damping < 1:
            problems.append("damping must lie in [0, 1)")
        if self.mass <= 0:
            problems.append("mass must be > 0")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(eq=False)
class ClothGrid:
    """Particle lattice in the inverted frame; arrays are indexed [row(y), col(x)]."""

    origin: tuple[float, float]
    resolution: float
    z: NDArray[np.float64]
    prev_z: NDArray[np.float64]
    movable: NDArray[np.bool_]
    surface: NDArray[np.float64]
    mass: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    def particle_xy(self) -> tuple[NDArray, NDArray]:
        ny, nx = self.shape
        xs = self.origin[0] + self.resolution * np.arange(nx)
        ys = self.origin[1] + self.resolution * np.arange(ny)
        return np.meshgrid(xs, ys)

    def height_at(self, xy: NDArray[np.float64]) -> NDArray[np.float64]:
        """Bilinear interpolation of the cloth surface (inverted frame)."""
        ny, nx = self.shape
        fx = (xy[:, 0] - self.origin[0]) / self.resolution
        fy = (xy[:, 1] - self.origin[1]) / self.resolution
        i0 = np.clip(np.floor(fx).astype(np.int64), 0, nx - 2)
        j0 = np.clip(np.floor(fy).astype(np.int64), 0, ny - 2)
        tx = np.clip(fx - i0, 0.0, 1.0)
        ty = np.clip(fy - j0, 0.0, 1.0)
        z = self.z
        return (
            z[j0, i0] * (1 - tx) * (1 - ty)
            + z[j0, i0 + 1] * tx * (1 - ty)
            + z[j0 + 1, i0] * (1 - tx) * ty
            + z[j0 + 1, i0 + 1] * tx * ty
        )


@dataclass(eq=False)
class GroundSegmentation:
    ground_indices: NDArray[np.intp]
    nonground_indices: NDArray[np.intp]
    cloth: ClothGrid | None = None
    iterations_run: int = 0
    residual: float = 0.0

    @property
    def settled(self) -> bool:
        return self.residual <= SETTLE_TOL

    def ground_mask(self, n: int | None = None) -> NDArray[np.bool_]:
        if n is None:
            n = len(self.ground_indices) + len(self.nonground_indices)
        mask = np.zeros(n, dtype=bool)
        mask[self.ground_indices] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "ground": self.ground_indices.tolist(),
            "nonground": self.nonground_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundSegmentation":
        return cls(np.asarray(d["ground"], dtype=np.intp), np.asarray(d["nonground"], dtype=np.intp))


def build_cloth(xyz: NDArray[np.float64], params: CsfParams) -> ClothGrid:
    """Lay a flat cloth over the inverted cloud with one spare cell on every side."""
    res = params.cloth_resolution
    inv_z = -xyz[:, 2]
    lo = xyz[:, :2].min(axis=0) - res
    hi = xyz[:, :2].max(axis=0) + res
    nx = int(math.ceil((hi[0] - lo[0]) / res)) + 1
    ny = int(math.ceil((hi[1] - lo[1]) / res)) + 1

    # each point collides with its nearest particle; keep the highest inverted point
    ci = np.clip(np.rint((xyz[:, 0] - lo[0]) / res).astype(np.int64), 0, nx - 1)
    cj = np.clip(np.rint((xyz[:, 1] - lo[1]) / res).astype(np.int64), 0, ny - 1)
    surface = np.full(ny * nx, -np.inf)
    np.maximum.at(surface, cj * nx + ci, inv_z)
    surface = surface.reshape(ny, nx)
    empty = ~np.isfinite(surface)
    if empty.any():
        _, (jj, ii) = ndimage.distance_transform_edt(empty, return_indices=True)
        surface = surface[jj, ii]

    start = float(inv_z.max()) + 0.05
    z = np.full((ny, nx), start)
    return ClothGrid(
        (float(lo[0]), float(lo[1])), res, z, z.copy(), np.ones((ny, nx), bool), surface, params.mass
    )


def _edge_sets(shape: tuple[int, int]):
    """Four families of pairwise-disjoint neighbour links, in sweep order."""
    ny, nx = shape
    for start in (0, 1):
        a = (slice(None), slice(start, nx - 1, 2))
        b = (slice(None), slice(start + 1, nx, 2))
        yield a, b
    for start in (0, 1):
        a = (slice(start, ny - 1, 2), slice(None))
        b = (slice(start + 1, ny, 2), slice(None))
        yield a, b


def _relax(cloth: ClothGrid, passes: int) -> None:
    z, mov = cloth.z, cloth.movable
    for _ in range(passes):
        for a, b in _edge_sets(z.shape):
            za, zb = z[a], z[b]
            ma, mb = mov[a], mov[b]
            diff = zb - za
            both = ma & mb
            only_a = ma & ~mb
            only_b = mb & ~ma
            # each link halves the height gap between its two particles
            za += np.where(both, 0.25 * diff, np.where(only_a, 0.5 * diff, 0.0))
            zb -= np.where(both, 0.25 * diff, np.where(only_b, 0.5 * diff, 0.0))


def simulate_cloth(cloth: ClothGrid, params: CsfParams) -> tuple[int, float]:
    """Run the cloth to rest; returns (iterations used, final max displacement)."""
    accel = params.gravity  # gravity force / mass
    drop = accel * params.time_step ** 2
    keep = 1.0 - params.damping
    residual = math.inf
    it = 0
    for it in range(1, params.iterations + 1):
        before = cloth.z.copy()
        mov = cloth.movable
        step = (cloth.z - cloth.prev_z) * keep - drop
        cloth.prev_z[mov] = cloth.z[mov]
        cloth.z[mov] += step[mov]

        hit = mov & (cloth.z <= cloth.surface)
        cloth.z[hit] = cloth.surface[hit]
        cloth.movable[hit] = False

        _relax(cloth, params.rigidness)

        if not cloth.movable.any():
            residual = 0.0
            break
        residual = float(np.abs(cloth.z - before).max())
        if residual < SETTLE_TOL:
            break
    np.maximum(cloth.z, cloth.surface, out=cloth.z)
    return it, residual


def csf_segment(cloud: PointCloudMap, params: CsfParams = CsfParams()) -> GroundSegmentation:
    if cloud.is_empty:
        raise EmptyMapError("cannot segment an empty map")
    xyz = cloud.xyz
    cloth = build_cloth(xyz, params)
    iterations, residual = simulate_cloth(cloth, params)
    if residual > SETTLE_TOL:
        log.warning(
            "cloth did not settle after %d iterations (max displacement %.3g m)", iterations, residual
        )
    dist = np.abs(-xyz[:, 2] - cloth.height_at(xyz))
    ground = dist <= params.class_threshold
    return GroundSegmentation(
        np.flatnonzero(ground), np.flatnonzero(~ground), cloth, iterations, residual
    )


def classify_with_cloth(xyz: NDArray[np.float64], cloth: ClothGrid, class_threshold: float) -> NDArray[np.bool_]:
    """Ground mask for points against an already settled cloth."""
    return np.abs(-xyz[:, 2] - cloth.height_at(xyz)) <= class_threshold


def compute_ser_sar(pred: GroundSegmentation | Iterable[int], truth: Iterable[int]) -> tuple[float, float]:
    """Segmentation error and accuracy ratios against a ground-truth ground set.

    ``sar = |pred ∩ truth| / |truth|`` and ``ser = |pred \\ truth| / |truth|``.
    """
    if isinstance(pred, GroundSegmentation):
        pred = pred.ground_indices
    pred_set = np.unique(np.asarray(list(pred) if not isinstance(pred, np.ndarray) else pred, dtype=np.int64))
    truth_set = np.unique(np.asarray(list(truth) if not isinstance(truth, np.ndarray) else truth, dtype=np.int64))
    if len(truth_set) == 0:
        raise ValueError("ground truth set is empty")
    hit = np.intersect1d(pred_set, truth_set, assume_unique=True).size
    extra = pred_set.size - hit
    return extra / truth_set.size, hit / truth_set.size


def save_segmentation(path: str | Path, seg: GroundSegmentation) -> None:
    Path(path).write_text(json.dumps(seg.to_dict()) + "\n")


def load_segmentation(path: str | Path) -> GroundSegmentation:
    return GroundSegmentation.from_dict(json.loads(Path(path).read_text()))
