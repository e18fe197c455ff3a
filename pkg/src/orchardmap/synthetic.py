"""Seeded orchard point clouds with per-point ground truth.

Randomness comes from numpy's PCG64 bit generator. Each tree draws from its
own stream, derived from ``SeedSequence(seed, spawn_key=(1, row, col))``, so
adding or removing a tree leaves every other tree's samples unchanged; the
ground uses ``spawn_key=(0,)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import Box2D, Box3D, PointCloudMap, box_from_dict, box_to_dict

GROUND, TRUNK, CANOPY = 0, 1, 2
NOISE_CLIP = 5.0


class SpecError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid orchard spec: " + "; ".join(problems))


@dataclass(frozen=True)
class GroundProfile:
    kind: str = "flat"
    grade: float = 0.0
    amplitude: float = 0.0
    wavelength: float = 10.0

    def height(self, x: NDArray, y: NDArray) -> NDArray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "flat":
            return np.zeros(np.broadcast(x, y).shape)
        if self.kind == "slope":
            return self.grade * x + 0.0 * y
        if self.kind == "rolling":
            k = 2 * math.pi / self.wavelength
            return self.amplitude * np.sin(k * x) * np.cos(k * y)
        raise ValueError(f"unknown ground kind {self.kind!r}")


@dataclass(frozen=True)
class OrchardSpec:
    rows: int = 3
    trees_per_row: int = 10
    row_spacing: float = 5.0
    tree_spacing: float = 4.0
    trunk_height: float = 1.0
    trunk_radius: float = 0.1
    canopy_radius: float = 0.9
    canopy_height: float = 1.6
    ground: GroundProfile = field(default_factory=GroundProfile)
    point_density: float = 100.0
    canopy_density_factor: float = 4.0
    noise_sigma: float = 0.01
    margin: float = 4.0
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.rows < 1:
            out.append("rows must be >= 1")
        if self.trees_per_row < 1:
            out.append("trees_per_row must be >= 1")
        for name in ("trunk_height", "trunk_radius", "canopy_radius", "canopy_height", "point_density"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be > 0")
        if self.rows > 1 and self.row_spacing <= 2 * self.canopy_radius:
            out.append("row_spacing must exceed the canopy diameter")
        if self.trees_per_row > 1 and self.tree_spacing <= 2 * self.canopy_radius:
            out.append("tree_spacing must exceed the canopy diameter")
        if self.noise_sigma < 0:
            out.append("noise_sigma must be >= 0")
        if self.margin < self.canopy_radius:
            out.append("margin must be at least the canopy radius")
        if self.canopy_density_factor <= 0:
            out.append("canopy_density_factor must be > 0")
        if self.ground.kind not in ("flat", "slope", "rolling"):
            out.append(f"unknown ground kind {self.ground.kind!r}")
        elif self.ground.kind == "rolling" and self.ground.wavelength <= 0:
            out.append("rolling wavelength must be > 0")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise SpecError(problems)

    @property
    def extent(self) -> tuple[float, float]:
        return (
            2 * self.margin + (self.trees_per_row - 1) * self.tree_spacing,
            2 * self.margin + (self.rows - 1) * self.row_spacing,
        )

    def tree_centers(self) -> NDArray[np.float64]:
        """(rows * trees_per_row, 2) trunk positions, row-major."""
        xs = self.margin + self.tree_spacing * np.arange(self.trees_per_row)
        ys = self.margin + self.row_spacing * np.arange(self.rows)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def ground_count(self) -> int:
        w, h = self.extent
        return int(round(self.point_density * w * h))

    def canopy_count(self) -> int:
        return int(round(self.canopy_density_factor * self.point_density * math.pi * self.canopy_radius ** 2))

    def trunk_count(self) -> int:
        area = 2 * math.pi * self.trunk_radius * self.trunk_height
        return max(2, int(round(self.canopy_density_factor * self.point_density * area)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OrchardSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError([f"unknown key {k!r}" for k in sorted(unknown)])
        if isinstance(d.get("ground"), dict):
            d["ground"] = GroundProfile(**d["ground"])
        elif isinstance(d.get("ground"), str):
            d["ground"] = GroundProfile(kind=d["ground"])
        return cls(**d)


@dataclass(eq=False)
class GroundTruth:
    tree_boxes: list[Box3D]
    labels: NDArray[np.int8]
    tree_ids: NDArray[np.int32]
    spec: OrchardSpec | None = None

    @property
    def ground_indices(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.labels == GROUND)

    @property
    def tree_centers(self) -> NDArray[np.float64]:
        return np.array([b.footprint.center for b in self.tree_boxes])

    def to_dict(self) -> dict:
        return {
            "tree_boxes": [box_to_dict(b) for b in self.tree_boxes],
            "ground_indices": self.ground_indices.tolist(),
            "labels": self.labels.tolist(),
            "tree_ids": self.tree_ids.tolist(),
            "spec": None if self.spec is None else self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        spec = OrchardSpec.from_dict(d["spec"]) if d.get("spec") else None
        return cls(
            [box_from_dict(b) for b in d["tree_boxes"]],
            np.asarray(d["labels"], dtype=np.int8),
            np.asarray(d["tree_ids"], dtype=np.int32),
            spec,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _noise(rng: np.random.Generator, n: int, sigma: float) -> NDArray:
    if sigma == 0:
        return np.zeros((n, 3))
    lim = NOISE_CLIP * sigma * (1 - 1e-9)
    return np.clip(rng.standard_normal((n, 3)) * sigma, -lim, lim)


def _tree_points(spec: OrchardSpec, center: NDArray, rng: np.random.Generator) -> tuple[NDArray, NDArray]:
    cx, cy = center
    base = float(spec.ground.height(cx, cy))

    nt = spec.trunk_count()
    phi = rng.uniform(0, 2 * math.pi, nt)
    h = rng.uniform(0, spec.trunk_height, nt)
    trunk = np.stack(
        [cx + spec.trunk_radius * np.cos(phi), cy + spec.trunk_radius * np.sin(phi), base + h], axis=1
    )

    nc = spec.canopy_count()
    # uniform in the unit ball, then stretched into the crown ellipsoid
    d = rng.standard_normal((nc, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(nc) ** (1 / 3)
    unit = d * r[:, None]
    half = spec.canopy_height / 2
    crown_z = base + spec.trunk_height + half
    canopy = np.stack(
        [cx + spec.canopy_radius * unit[:, 0], cy + spec.canopy_radius * unit[:, 1], crown_z + half * unit[:, 2]],
        axis=1,
    )
    pts = np.vstack([trunk, canopy])
    pts += _noise(rng, len(pts), spec.noise_sigma)
    labels = np.r_[np.full(nt, TRUNK, np.int8), np.full(nc, CANOPY, np.int8)]
    return pts, labels


def generate(spec: OrchardSpec) -> tuple[PointCloudMap, GroundTruth]:
    """Ground points first, then each tree (trunk, crown) in row-major order."""
    spec.validate()
    w, h = spec.extent
    rng = _rng(spec.seed, 0)
    n = spec.ground_count()
    xy = rng.random((n, 2)) * [w, h]
    ground = np.c_[xy, spec.ground.height(xy[:, 0], xy[:, 1])]
    ground += _noise(rng, n, spec.noise_sigma)

    chunks = [ground]
    labels = [np.full(n, GROUND, np.int8)]
    ids = [np.full(n, -1, np.int32)]
    boxes = []
    for k, c in enumerate(spec.tree_centers()):
        row, col = divmod(k, spec.trees_per_row)
        pts, lab = _tree_points(spec, c, _rng(spec.seed, 1, row, col))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        boxes.append(Box3D(Box2D(lo[0], lo[1], hi[0], hi[1]), lo[2], hi[2]))
        chunks.append(pts)
        labels.append(lab)
        ids.append(np.full(len(pts), k, np.int32))

    cloud = PointCloudMap(np.vstack(chunks))
    truth = GroundTruth(boxes, np.concatenate(labels), np.concatenate(ids), spec)
    return cloud, truth


def plane_with_box(
    size: float = 10.0,
    density: float = 200.0,
    box_side: float = 1.0,
    box_height: float = 2.0,
    seed: int = 0,
) -> tuple[PointCloudMap, NDArray[np.int8]]:
    """Flat plane at z=0 with a solid box standing on it (no plane points under the box).

    Labels: 0 plane, 1 box side, 2 box top.
    """
    rng = _rng(seed, 7)
    n = int(round(density * size * size))
    xy = rng.random((n, 2)) * size
    c = size / 2
    half = box_side / 2
    under = (np.abs(xy[:, 0] - c) <= half) & (np.abs(xy[:, 1] - c) <= half)
    plane = np.c_[xy[~under], np.zeros((~under).sum())]

    ntop = int(round(density * box_side * box_side))
    top = np.c_[c + rng.uniform(-half, half, (ntop, 2)), np.full(ntop, box_height)]
    nside = int(round(density * 4 * box_side * box_height))
    t = rng.uniform(-half, half, nside)
    face = rng.integers(0, 4, nside)
    sx = np.select([face == 0, face == 1, face == 2], [c + t, c + t, c - half], c + half)
    sy = np.select([face == 0, face == 1, face == 2], [c - half, c + half, c + t], c + t)
    # keep side points off the exact top rim so every label is unambiguous
    side = np.c_[sx, sy, rng.uniform(0, box_height * 0.95, nside)]
    pts = np.vstack([plane, side, top])
    labels = np.r_[np.zeros(len(plane), np.int8), np.ones(nside, np.int8), np.full(ntop, 2, np.int8)]
    return PointCloudMap(pts), labels
