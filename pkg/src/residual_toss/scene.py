"""Object models, workspace layout and the planar geometry shared by the simulator.

Objects are rigid unions of one or two analytic primitives. Every object has a
principal axis, a centre of mass computed from uniform density, and two hidden
coefficients (quadratic drag and grasp-lever gain) that only the simulator reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite Vec3 {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def of(cls, seq) -> "Vec3":
        x, y, z = (float(c) for c in seq)
        return cls(x, y, z)

    def planar_norm(self) -> float:
        return math.hypot(self.x, self.y)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)


@dataclass(frozen=True)
class Pose2D:
    """Resting pose in the bin frame; yaw is kept in [0, 2*pi)."""

    x: float
    y: float
    yaw: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (self.x, self.y, self.yaw)):
            raise ValueError(f"non-finite Pose2D {self}")
        object.__setattr__(self, "yaw", self.yaw % TWO_PI)

    def to_local(self, px, py):
        """Map bin-frame points into the object frame (planar part only)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(px) - self.x
        dy = np.asarray(py) - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def to_world(self, u, v):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.x + c * u - s * v, self.y + s * u + c * v


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    """One analytic solid in the object frame.

    ``shape`` is one of sphere, box, cylinder or capsule. Cylinders and capsules
    lie along the local x axis; ``half_length`` is the half length of the
    cylindrical part. Boxes use ``half`` extents.
    """

    shape: str
    center: tuple[float, float, float]
    radius: float = 0.0
    half_length: float = 0.0
    half: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "box", "cylinder", "capsule"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")

    def scaled(self, k: float) -> "Primitive":
        return Primitive(
            self.shape,
            tuple(k * c for c in self.center),
            self.radius * k,
            self.half_length * k,
            tuple(k * h for h in self.half),
        )

    @property
    def volume(self) -> float:
        r, L = self.radius, self.half_length
        if self.shape == "sphere":
            return 4.0 / 3.0 * math.pi * r**3
        if self.shape == "box":
            hx, hy, hz = self.half
            return 8.0 * hx * hy * hz
        if self.shape == "cylinder":
            return math.pi * r * r * 2.0 * L
        return math.pi * r * r * 2.0 * L + 4.0 / 3.0 * math.pi * r**3

    def extents(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        r, L = self.radius, self.half_length
        if self.shape == "sphere":
            h = np.array([r, r, r])
        elif self.shape == "box":
            h = np.asarray(self.half, dtype=float)
        elif self.shape == "cylinder":
            h = np.array([L, r, r])
        else:
            h = np.array([L + r, r, r])
        return c - h, c + h

    def _planar_offsets(self, u, v):
        return np.asarray(u) - self.center[0], np.asarray(v) - self.center[1]

    def top_height(self, u, v) -> np.ndarray:
        """Top surface z (object frame) over planar points; NaN outside the footprint."""
        du, dv = self._planar_offsets(u, v)
        cz = self.center[2]
        r = self.radius
        with np.errstate(invalid="ignore"):
            if self.shape == "sphere":
                d2 = du * du + dv * dv
                return np.where(d2 <= r * r, cz + np.sqrt(np.maximum(r * r - d2, 0.0)), np.nan)
            if self.shape == "box":
                hx, hy, hz = self.half
                inside = (np.abs(du) <= hx) & (np.abs(dv) <= hy)
                return np.where(inside, cz + hz, np.nan)
            if self.shape == "cylinder":
                inside = (np.abs(du) <= self.half_length) & (np.abs(dv) <= r)
                return np.where(inside, cz + np.sqrt(np.maximum(r * r - dv * dv, 0.0)), np.nan)
            ex = np.maximum(np.abs(du) - self.half_length, 0.0)
            d2 = ex * ex + dv * dv
            return np.where(d2 <= r * r, cz + np.sqrt(np.maximum(r * r - d2, 0.0)), np.nan)

    def planar_distance(self, u, v) -> np.ndarray:
        """Distance from planar points to the footprint (0 inside)."""
        du, dv = self._planar_offsets(u, v)
        r = self.radius
        if self.shape == "sphere":
            return np.maximum(np.hypot(du, dv) - r, 0.0)
        if self.shape in ("box", "cylinder"):
            hx, hy = (self.half[0], self.half[1]) if self.shape == "box" else (self.half_length, r)
            ex = np.maximum(np.abs(du) - hx, 0.0)
            ey = np.maximum(np.abs(dv) - hy, 0.0)
            return np.hypot(ex, ey)
        ex = np.maximum(np.abs(du) - self.half_length, 0.0)
        return np.maximum(np.hypot(ex, dv) - r, 0.0)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """3D containment for an (n, 3) array of object-frame points."""
        d = np.asarray(pts, dtype=float) - np.asarray(self.center)
        r = self.radius
        if self.shape == "sphere":
            return np.einsum("ij,ij->i", d, d) <= r * r
        if self.shape == "box":
            return np.all(np.abs(d) <= np.asarray(self.half), axis=1)
        if self.shape == "cylinder":
            return (np.abs(d[:, 0]) <= self.half_length) & (d[:, 1] ** 2 + d[:, 2] ** 2 <= r * r)
        ex = np.maximum(np.abs(d[:, 0]) - self.half_length, 0.0)
        return ex**2 + d[:, 1] ** 2 + d[:, 2] ** 2 <= r * r


# --------------------------------------------------------------------------
# objects


@dataclass(frozen=True)
class ObjectModel:
    kind: str
    primitives: tuple[Primitive, ...]
    axis: tuple[float, float, float]
    drag_coeff: float
    lever_coeff: float
    visual_intensity: float
    elongated: bool
    com: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self) -> None:
        if not self.primitives or len(self.primitives) > 2:
            raise ValueError("objects are unions of one or two primitives")
        if self.drag_coeff < 0 or self.lever_coeff < 0:
            raise ValueError("hidden coefficients must be non-negative")
        if not 0.0 <= self.visual_intensity <= 1.0:
            raise ValueError("visual_intensity must lie in [0, 1]")
        a = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", tuple(a / np.linalg.norm(a)))
        object.__setattr__(self, "com", tuple(centroid(self.primitives)))

    @property
    def volume(self) -> float:
        return sum(p.volume for p in self.primitives)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([p.extents()[0] for p in self.primitives], axis=0)
        hi = np.max([p.extents()[1] for p in self.primitives], axis=0)
        return lo, hi

    @property
    def base_z(self) -> float:
        """Object-frame z of the surface the object rests on."""
        return float(self.bounds()[0][2])

    @property
    def planar_radius(self) -> float:
        """Radius of a disc about the frame origin covering the footprint."""
        lo, hi = self.bounds()
        return float(math.hypot(max(-lo[0], hi[0]), max(-lo[1], hi[1])))

    def axis_span(self) -> tuple[float, float]:
        """Range of the signed axial coordinate, measured from the CoM."""
        a = np.asarray(self.axis[:2])
        lo, hi = self.bounds()
        corners = np.array([[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]])
        proj = corners @ a - np.dot(self.com[:2], a)
        return float(proj.min()), float(proj.max())

    def top_height(self, u, v) -> np.ndarray:
        """Highest surface (relative to the resting plane) over object-frame points."""
        h = None
        for p in self.primitives:
            t = p.top_height(u, v)
            h = t if h is None else np.fmax(h, t)
        return h - self.base_z

    def planar_distance(self, u, v) -> np.ndarray:
        return np.min([p.planar_distance(u, v) for p in self.primitives], axis=0)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        out = np.zeros(len(pts), dtype=bool)
        for p in self.primitives:
            out |= p.contains(pts)
        return out

    def with_hidden(self, drag: float | None = None, lever: float | None = None) -> "ObjectModel":
        return replace(
            self,
            drag_coeff=self.drag_coeff if drag is None else drag,
            lever_coeff=self.lever_coeff if lever is None else lever,
        )


def centroid(primitives) -> np.ndarray:
    """Uniform-density centroid; primitives are assumed not to intersect."""
    if len(primitives) == 1:
        return np.array(primitives[0].center, dtype=float)
    vols = np.array([p.volume for p in primitives])
    centers = np.array([p.center for p in primitives], dtype=float)
    return (vols[:, None] * centers).sum(axis=0) / vols.sum()


def _object_from_entry(kind: str, entry: dict[str, Any], scale: float = 1.0) -> ObjectModel:
    prims = []
    for spec in entry["primitives"]:
        prims.append(
            Primitive(
                shape=spec["shape"],
                center=tuple(float(c) for c in spec["center"]),
                radius=float(spec.get("radius", 0.0)),
                half_length=float(spec.get("half_length", 0.0)),
                half=tuple(float(c) for c in spec.get("half", (0.0, 0.0, 0.0))),
            ).scaled(scale)
        )
    return ObjectModel(
        kind=kind,
        primitives=tuple(prims),
        axis=tuple(float(c) for c in entry.get("axis", (1.0, 0.0, 0.0))),
        drag_coeff=float(entry["drag"]),
        lever_coeff=float(entry["lever"]),
        visual_intensity=float(entry["intensity"]),
        elongated=bool(entry.get("elongated", False)),
    )


def load_catalogue(path=None) -> dict[str, dict[str, Any]]:
    if path is None:
        text = resources.files("residual_toss").joinpath("data/objects.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return yaml.safe_load(text)


def make_standard_objects(scale: float = 1.0, catalogue=None) -> list[ObjectModel]:
    """Ball, cube, rod and hammer at catalogue dimensions times ``scale``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    cat = catalogue or load_catalogue()
    return [_object_from_entry(k, v, scale) for k, v in cat["standard"].items()]


def make_unseen_objects(catalogue=None) -> list[ObjectModel]:
    cat = catalogue or load_catalogue()
    return [_object_from_entry(k, v) for k, v in cat["unseen"].items()]


def select_objects(name: str, catalogue=None, drag_override: float | None = None) -> list[ObjectModel]:
    """Resolve an object-set name: ``seen``, ``unseen`` or a single kind."""
    cat = catalogue or load_catalogue()
    if name == "seen":
        objs = make_standard_objects(catalogue=cat)
    elif name == "unseen":
        objs = make_unseen_objects(catalogue=cat)
    else:
        pool = {o.kind: o for o in make_standard_objects(catalogue=cat) + make_unseen_objects(catalogue=cat)}
        if name not in pool:
            raise KeyError(f"unknown object set {name!r}")
        objs = [pool[name]]
    if drag_override is not None:
        objs = [o.with_hidden(drag=drag_override) for o in objs]
    return objs


# --------------------------------------------------------------------------
# workspace


@dataclass(frozen=True)
class Box:
    center: Vec3
    opening: tuple[float, float] = (0.25, 0.15)
    height: float = 0.20

    def contains(self, x: float, y: float) -> bool:
        hx, hy = self.opening[0] / 2.0, self.opening[1] / 2.0
        return abs(x - self.center.x) <= hx and abs(y - self.center.y) <= hy

    def rect(self) -> tuple[float, float, float, float]:
        hx, hy = self.opening[0] / 2.0, self.opening[1] / 2.0
        return (self.center.x - hx, self.center.y - hy, self.center.x + hx, self.center.y + hy)


def grid_layout(xs, ys, landing_z: float = 0.0, opening=(0.25, 0.15), height: float = 0.20) -> tuple[Box, ...]:
    return tuple(Box(Vec3(float(x), float(y), landing_z), tuple(opening), height) for x in xs for y in ys)


TRAIN_XS = (1.10, 1.40, 1.70)
TRAIN_YS = (-0.48, -0.16, 0.16, 0.48)


def train_layout(landing_z: float = 0.0) -> tuple[Box, ...]:
    """3 x 4 grid of boxes beyond the release circle."""
    return grid_layout(TRAIN_XS, TRAIN_YS, landing_z)


def displaced_layout(landing_z: float = 0.0) -> tuple[Box, ...]:
    """Training grid shifted by half a pitch in x and y; openings never overlap the training ones."""
    dx = (TRAIN_XS[1] - TRAIN_XS[0]) / 2.0
    dy = (TRAIN_YS[1] - TRAIN_YS[0]) / 2.0
    return grid_layout([x + dx for x in TRAIN_XS], [y + dy for y in TRAIN_YS], landing_z)


def layouts_overlap(a, b) -> bool:
    for p in a:
        ax0, ay0, ax1, ay1 = p.rect()
        for q in b:
            bx0, by0, bx1, by1 = q.rect()
            if min(ax1, bx1) - max(ax0, bx0) > 1e-12 and min(ay1, by1) - max(ay0, by0) > 1e-12:
                return True
    return False


@dataclass(frozen=True)
class WorkspaceConfig:
    bin_extents: tuple[float, float] = (0.45, 0.35)
    resolution: float = 0.005
    num_rotations: int = 16
    release_height: float = 0.04
    release_radius: float = 0.70
    landing_height: float = 0.0
    gravity: float = 9.8
    boxes: tuple[Box, ...] = field(default_factory=train_layout)

    def __post_init__(self) -> None:
        nx, ny = self.bin_extents[0] / self.resolution, self.bin_extents[1] / self.resolution
        if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
            raise ValueError("bin extents must be an integer number of pixels")
        if self.num_rotations < 1:
            raise ValueError("num_rotations must be >= 1")
        for b in self.boxes:
            if b.center.planar_norm() <= self.release_radius:
                raise ValueError(f"box at {b.center} lies inside the release circle")

    @property
    def shape(self) -> tuple[int, int]:
        """Heightmap shape (rows along bin x, columns along bin y)."""
        return (
            int(round(self.bin_extents[0] / self.resolution)),
            int(round(self.bin_extents[1] / self.resolution)),
        )

    def pixel_center(self, i, j):
        return (np.asarray(i) + 0.5) * self.resolution, (np.asarray(j) + 0.5) * self.resolution

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def with_boxes(self, boxes) -> "WorkspaceConfig":
        return replace(self, boxes=tuple(boxes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "bin_extents": list(self.bin_extents),
            "resolution": self.resolution,
            "num_rotations": self.num_rotations,
            "release_height": self.release_height,
            "release_radius": self.release_radius,
            "landing_height": self.landing_height,
            "gravity": self.gravity,
            "boxes": [[b.center.x, b.center.y, b.center.z] for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "WorkspaceConfig":
        d = dict(d)
        layout = d.pop("layout", None)
        boxes = d.pop("boxes", None)
        landing = float(d.get("landing_height", 0.0))
        if boxes is not None:
            boxes = tuple(Box(Vec3.of(b)) for b in boxes)
        elif layout == "displaced":
            boxes = displaced_layout(landing)
        else:
            boxes = train_layout(landing)
        if "bin_extents" in d:
            d["bin_extents"] = tuple(d["bin_extents"])
        return cls(boxes=boxes, **d)


# --------------------------------------------------------------------------
# primitive parameters


@dataclass(frozen=True)
class GraspAction:
    """Top-down grasp at heightmap pixel ``(i, j)`` with rotation index ``k``.

    The jaw closing axis points along world angle ``k * 2 pi / R``.
    """

    i: int
    j: int
    k: int
    num_rotations: int

    @property
    def angle(self) -> float:
        return TWO_PI * self.k / self.num_rotations

    def position(self, cfg: WorkspaceConfig, raw_height=None) -> Vec3:
        x, y = cfg.pixel_center(self.i, self.j)
        z = 0.0 if raw_height is None else float(raw_height[self.i, self.j])
        return Vec3(float(x), float(y), z)


@dataclass(frozen=True)
class ThrowParams:
    r: Vec3
    v: Vec3
    exploratory: bool = False

    @property
    def planar_speed(self) -> float:
        return self.v.planar_norm()
