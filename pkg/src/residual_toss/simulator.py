"""Deterministic bin world: object drops, heightmap rendering, and the grasp and
throw primitives executed under dynamics the learner does not observe.

Hidden dynamics of a throw: the object leaves the gripper with velocity
``v * (1 + kappa * |s|)`` where ``s`` is the grasp offset from the centre of mass
along the object axis, and then flies under gravity plus quadratic drag
``-beta |u| u``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ballistics import integrate_flight
from .scene import Box, GraspAction, ObjectModel, Pose2D, ThrowParams, Vec3, WorkspaceConfig

GRIPPER_HALF_WIDTH = 0.02
ANGLE_TOLERANCE = math.radians(30.0)
GRASP_RELIABILITY = 0.98
PLACEMENT_ATTEMPTS = 2000
PLACEMENT_RESTARTS = 20
OVERLAP_TOLERANCE_PX = 0
# dataset-level normalisation (mean, std) for the height and intensity channels
DEFAULT_STATS = ((0.006, 0.010), (0.15, 0.30))


class PlacementError(RuntimeError):
    """The bin is too small to hold the requested objects without overlap."""


@dataclass
class PlacedObject:
    uid: int
    model: ObjectModel
    pose: Pose2D
    z: float = 0.0  # elevation of the resting plane (for stacked scenes)


@dataclass
class BinState:
    workspace: WorkspaceConfig
    objects: list[PlacedObject]
    pool: list[ObjectModel]
    n: int
    seed: int
    episode: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.rng is None:
            self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.episode, 1]))

    def is_empty(self) -> bool:
        return not self.objects

    def find(self, uid: int) -> PlacedObject | None:
        for o in self.objects:
            if o.uid == uid:
                return o
        return None


@dataclass
class Heightmap:
    height: np.ndarray  # raw heights (m)
    intensity: np.ndarray  # raw intensity of the topmost object
    stats: tuple[tuple[float, float], tuple[float, float]] = DEFAULT_STATS

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape

    @property
    def normalized(self) -> np.ndarray:
        """``(H, W, 2)`` float32 image: normalised height and intensity."""
        (mh, sh), (mi, si) = self.stats
        img = np.stack([(self.height - mh) / sh, (self.intensity - mi) / si], axis=-1)
        return img.astype(np.float32)


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    object_uid: int | None = None
    model: ObjectModel | None = None
    offset: float = 0.0
    grasp_point: tuple[float, float] | None = None  # object frame (u, v)


@dataclass(frozen=True)
class ThrowOutcome:
    landing: Vec3
    in_target_box: bool
    flight_time: float
    trace: list | None = None


# --------------------------------------------------------------------------
# placement


def _pixel_grid(cfg: WorkspaceConfig):
    h, w = cfg.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return cfg.pixel_center(ii, jj)


def _footprint_window(cfg: WorkspaceConfig, model: ObjectModel, pose: Pose2D):
    """Pixel index window covering the object's rotated bounding box."""
    lo, hi = model.bounds()
    corners = np.array([[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]])
    wx, wy = pose.to_world(corners[:, 0], corners[:, 1])
    h, w = cfg.shape
    res = cfg.resolution
    i0 = max(int(math.floor(wx.min() / res)) - 1, 0)
    i1 = min(int(math.ceil(wx.max() / res)) + 1, h)
    j0 = max(int(math.floor(wy.min() / res)) - 1, 0)
    j1 = min(int(math.ceil(wy.max() / res)) + 1, w)
    return i0, i1, j0, j1, wx, wy


def footprint_heights(cfg: WorkspaceConfig, placed: PlacedObject):
    """Window bounds and per-pixel top heights (NaN off the footprint) of one object."""
    i0, i1, j0, j1, _, _ = _footprint_window(cfg, placed.model, placed.pose)
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    px, py = cfg.pixel_center(ii, jj)
    u, v = placed.pose.to_local(px, py)
    top = placed.model.top_height(u, v) + placed.z
    return (i0, i1, j0, j1), top


def _inside_bin(cfg: WorkspaceConfig, model: ObjectModel, pose: Pose2D) -> bool:
    *_, wx, wy = _footprint_window(cfg, model, pose)
    ex, ey = cfg.bin_extents
    return wx.min() >= 0 and wy.min() >= 0 and wx.max() <= ex and wy.max() <= ey


def spawn_bin(objects, n: int, seed: int, workspace: WorkspaceConfig | None = None, episode: int = 0) -> BinState:
    """Drop ``n`` objects (kinds drawn uniformly from ``objects``) at random non-overlapping poses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    objects = list(objects)
    if not objects:
        raise ValueError("object pool is empty")
    cfg = workspace or WorkspaceConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, episode, 0]))
    ex, ey = cfg.bin_extents
    for _ in range(PLACEMENT_RESTARTS):
        occupancy = np.zeros(cfg.shape, dtype=np.int32)
        placed: list[PlacedObject] = []
        for uid in range(n):
            model = objects[int(rng.integers(len(objects)))]
            for _ in range(PLACEMENT_ATTEMPTS):
                pose = Pose2D(float(rng.uniform(0, ex)), float(rng.uniform(0, ey)), float(rng.uniform(0, 2 * math.pi)))
                if not _inside_bin(cfg, model, pose):
                    continue
                cand = PlacedObject(uid, model, pose)
                (i0, i1, j0, j1), top = footprint_heights(cfg, cand)
                mask = ~np.isnan(top)
                if np.count_nonzero(occupancy[i0:i1, j0:j1][mask]) > OVERLAP_TOLERANCE_PX:
                    continue
                occupancy[i0:i1, j0:j1][mask] += 1
                placed.append(cand)
                break
            else:
                break
        if len(placed) == n:
            return BinState(cfg, placed, objects, n, seed, episode)
    raise PlacementError(f"could not place {n} objects without overlap in a {ex} x {ey} m bin")


def reset_if_empty(state: BinState) -> BinState:
    """Respawn the bin with the next seed of the episode stream when it is empty."""
    if not state.is_empty():
        return state
    return spawn_bin(state.pool, state.n, state.seed, state.workspace, state.episode + 1)


# --------------------------------------------------------------------------
# rendering


def render_heightmap(state: BinState, stats=DEFAULT_STATS) -> Heightmap:
    """Orthographic top-down heights (max over objects) and topmost-object intensity."""
    cfg = state.workspace
    height = np.zeros(cfg.shape)
    intensity = np.zeros(cfg.shape)
    for obj in state.objects:
        (i0, i1, j0, j1), top = footprint_heights(cfg, obj)
        sub_h = height[i0:i1, j0:j1]
        sub_i = intensity[i0:i1, j0:j1]
        above = ~np.isnan(top) & (top > sub_h)
        sub_h[above] = top[above]
        sub_i[above] = obj.model.visual_intensity
    return Heightmap(height, intensity, stats)


# --------------------------------------------------------------------------
# primitives


def _angle_ok(model: ObjectModel, pose: Pose2D, angle: float) -> bool:
    if not model.elongated:
        return True
    axis_angle = pose.yaw + math.atan2(model.axis[1], model.axis[0])
    rel = (angle - axis_angle) % math.pi
    return abs(rel - math.pi / 2.0) <= ANGLE_TOLERANCE + 1e-12


def grasp_target(state: BinState, x: float, y: float):
    """Object a grasp at ``(x, y)`` would close on, with its object-frame point and footprint distance."""
    best = None
    for obj in state.objects:
        u, v = obj.pose.to_local(x, y)
        d = float(obj.model.planar_distance(u, v))
        if d > GRIPPER_HALF_WIDTH:
            continue
        top = obj.model.top_height(u, v)
        top = -np.inf if np.isnan(top) else float(top) + obj.z
        key = (d, -top)
        if best is None or key < best[0]:
            best = (key, obj, (float(u), float(v)), d)
    if best is None:
        return None
    return best[1], best[2], best[3]


def grasp_offset(model: ObjectModel, u: float, v: float) -> float:
    """Signed distance from the CoM to ``(u, v)`` along the object axis, clipped to the object's extent."""
    a = model.axis
    s = (u - model.com[0]) * a[0] + (v - model.com[1]) * a[1]
    lo, hi = model.axis_span()
    return float(min(max(s, lo), hi))


def execute_grasp(state: BinState, action: GraspAction, noise: bool = True) -> GraspOutcome:
    """Attempt a top-down grasp; on success the object leaves the bin."""
    h, w = state.workspace.shape
    if not (0 <= action.i < h and 0 <= action.j < w):
        raise ValueError(f"grasp pixel {(action.i, action.j)} outside the heightmap")
    if not 0 <= action.k < action.num_rotations:
        raise ValueError("rotation index out of range")
    draw = state.rng.random()  # always consumed so the stream is branch independent
    x, y = state.workspace.pixel_center(action.i, action.j)
    hit = grasp_target(state, float(x), float(y))
    if hit is None:
        return GraspOutcome(False)
    obj, (u, v), _ = hit
    if not _angle_ok(obj.model, obj.pose, action.angle):
        return GraspOutcome(False)
    if noise and draw >= GRASP_RELIABILITY:
        return GraspOutcome(False)
    state.objects.remove(obj)
    return GraspOutcome(True, obj.uid, obj.model, grasp_offset(obj.model, u, v), (u, v))


def launch_velocity(outcome: GraspOutcome, params: ThrowParams) -> Vec3:
    gain = 1.0 + outcome.model.lever_coeff * abs(outcome.offset)
    return Vec3(params.v.x * gain, params.v.y * gain, params.v.z * gain)


def execute_throw(
    outcome: GraspOutcome,
    params: ThrowParams,
    workspace: WorkspaceConfig,
    target: Box | None = None,
    keep_trace: bool = False,
    dt: float = 1e-3,
) -> ThrowOutcome:
    """Release the held object at ``params`` and fly it to the landing plane."""
    if not outcome.success:
        raise ValueError("cannot throw after a failed grasp")
    speed = math.sqrt(params.v.x**2 + params.v.y**2 + params.v.z**2)
    if speed <= 0.0:
        raise ValueError("release velocity must be non-zero")
    u0 = launch_velocity(outcome, params)
    flight = integrate_flight(
        params.r, u0, outcome.model.drag_coeff, workspace.gravity, workspace.landing_height, dt, keep_trace
    )
    p = flight.landing
    in_box = bool(target is not None and target.contains(p.x, p.y))
    return ThrowOutcome(p, in_box, flight.time, flight.trace)


def dump_trace(path, outcome: ThrowOutcome) -> None:
    """Write a flight trace as CSV rows ``t, x, y, z``."""
    if outcome.trace is None:
        raise ValueError("throw was executed without keep_trace=True")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "z"])
        for row in outcome.trace:
            wr.writerow([f"{c:.6f}" for c in row])
