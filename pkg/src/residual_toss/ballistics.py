"""Closed-form ballistic release planning and an RK4 flight integrator.

Release geometry: the release point sits on a circle of radius ``c_d`` about the
robot base at height ``c_h``, on the ray towards the target, and the release
velocity is pitched 45 degrees up along that ray.

Derivation of the release speed. Let ``D`` be the horizontal distance from the
release point ``r`` to the target ``p`` and ``w`` the common horizontal and
vertical speed (45 degrees). Horizontally ``D = w t``; vertically
``p_z = r_z + w t - g t^2 / 2`` with ``g > 0``. Eliminating ``t``::

    p_z = r_z + D - g D^2 / (2 w^2)
    w^2 = g D^2 / (2 (D + r_z - p_z))
    |v| = sqrt(2) w = sqrt(g D^2 / (D + r_z - p_z))

The denominator is ``D + r_z - p_z``. The variant with ``r_z - p_z - D`` (and
a signed, negative gravity) flips the height term and only agrees when
``r_z == p_z``; the integrator test suite rejects it (see
``alternative_release_speed``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .scene import Vec3, WorkspaceConfig

SQRT2 = math.sqrt(2.0)
FLIGHT_CAP = 10.0  # seconds


class UnreachableTarget(ValueError):
    """The target cannot be hit with a 45-degree throw from the release circle."""


class FlightError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReleasePlan:
    r: Vec3
    v_hat: Vec3
    speed: float  # planar speed |v_xy|
    azimuth: float

    @property
    def total_speed(self) -> float:
        return SQRT2 * self.speed


def _release_speed(D: float, rz: float, pz: float, g: float) -> float:
    denom = D + rz - pz
    if denom <= 0.0:
        raise UnreachableTarget(
            f"target height {pz:.3f} m is above the 45-degree envelope (D + r_z - p_z = {denom:.4f} <= 0)"
        )
    return math.sqrt(g * D * D / denom)


def alternative_release_speed(p: Vec3, cfg: WorkspaceConfig) -> float:
    """Total speed with the sign of the height term flipped: ``sqrt(g D^2 / (D + p_z - r_z))``.

    Kept only so the tests can show the integrator rejects it when heights differ.
    """
    D = p.planar_norm() - cfg.release_radius
    denom = D + p.z - cfg.release_height
    if denom <= 0.0:
        raise UnreachableTarget("non-positive denominator")
    return math.sqrt(cfg.gravity * D * D / denom)


def plan_from_speed(p: Vec3, planar_speed: float, cfg: WorkspaceConfig) -> ReleasePlan:
    """Release plan aimed at ``p`` with an arbitrary planar speed (45 degrees, on the release circle)."""
    psi = math.atan2(p.y, p.x)
    c, s = math.cos(psi), math.sin(psi)
    r = Vec3(cfg.release_radius * c, cfg.release_radius * s, cfg.release_height)
    v = Vec3(planar_speed * c, planar_speed * s, planar_speed)
    return ReleasePlan(r=r, v_hat=v, speed=planar_speed, azimuth=psi % (2 * math.pi))


def solve_release(p: Vec3, cfg: WorkspaceConfig) -> ReleasePlan:
    """Release position and ballistic velocity that land a point mass on ``p``."""
    dist = p.planar_norm()
    if dist <= cfg.release_radius:
        raise UnreachableTarget(f"target at radius {dist:.3f} m lies inside the release circle {cfg.release_radius} m")
    D = dist - cfg.release_radius
    total = _release_speed(D, cfg.release_height, p.z, cfg.gravity)
    return plan_from_speed(p, total / SQRT2, cfg)


def speed_for_landing(p_bar: Vec3, cfg: WorkspaceConfig) -> float:
    """Planar ballistic speed that would have landed exactly on ``p_bar``."""
    return solve_release(p_bar, cfg).speed


def release_distance(p: Vec3, cfg: WorkspaceConfig) -> float:
    """Planar distance from the release point to ``p``."""
    return p.planar_norm() - cfg.release_radius


@dataclass(frozen=True)
class Flight:
    landing: Vec3
    time: float
    landing_velocity: tuple[float, float, float]
    trace: list | None = None


def integrate_flight(
    r: Vec3,
    u0: Vec3,
    drag: float,
    gravity: float,
    landing_z: float,
    dt: float = 1e-3,
    keep_trace: bool = False,
) -> Flight:
    """RK4 integration of ``du/dt = (0, 0, -g) - drag |u| u`` until the descending crossing of ``landing_z``.

    The crossing point is linearly interpolated between the bracketing steps.
    """
    x, y, z = r.x, r.y, r.z
    vx, vy, vz = u0.x, u0.y, u0.z
    t = 0.0
    trace = [(0.0, x, y, z)] if keep_trace else None

    def acc(ux, uy, uz):
        k = drag * math.sqrt(ux * ux + uy * uy + uz * uz)
        return -k * ux, -k * uy, -gravity - k * uz

    nmax = int(math.ceil(FLIGHT_CAP / dt))
    for _ in range(nmax):
        a1 = acc(vx, vy, vz)
        h = 0.5 * dt
        b = (vx + h * a1[0], vy + h * a1[1], vz + h * a1[2])
        a2 = acc(*b)
        c = (vx + h * a2[0], vy + h * a2[1], vz + h * a2[2])
        a3 = acc(*c)
        d = (vx + dt * a3[0], vy + dt * a3[1], vz + dt * a3[2])
        a4 = acc(*d)
        nx = x + dt / 6.0 * (vx + 2 * b[0] + 2 * c[0] + d[0])
        ny = y + dt / 6.0 * (vy + 2 * b[1] + 2 * c[1] + d[1])
        nz = z + dt / 6.0 * (vz + 2 * b[2] + 2 * c[2] + d[2])
        nvx = vx + dt / 6.0 * (a1[0] + 2 * a2[0] + 2 * a3[0] + a4[0])
        nvy = vy + dt / 6.0 * (a1[1] + 2 * a2[1] + 2 * a3[1] + a4[1])
        nvz = vz + dt / 6.0 * (a1[2] + 2 * a2[2] + 2 * a3[2] + a4[2])
        if nz <= landing_z < z:
            frac = (z - landing_z) / (z - nz)
            lx = x + frac * (nx - x)
            ly = y + frac * (ny - y)
            tl = t + frac * dt
            lv = (vx + frac * (nvx - vx), vy + frac * (nvy - vy), vz + frac * (nvz - vz))
            if keep_trace:
                trace.append((tl, lx, ly, landing_z))
            return Flight(Vec3(lx, ly, landing_z), tl, lv, trace)
        x, y, z, vx, vy, vz = nx, ny, nz, nvx, nvy, nvz
        t += dt
        if keep_trace:
            trace.append((t, x, y, z))
    raise FlightError(f"flight exceeded {FLIGHT_CAP} s without crossing z = {landing_z}")


def simulate_ideal_flight(plan: ReleasePlan, cfg: WorkspaceConfig, dt: float = 1e-3) -> Vec3:
    """Drag-free landing point of ``plan`` on the landing plane."""
    return integrate_flight(plan.r, plan.v_hat, 0.0, cfg.gravity, cfg.landing_height, dt).landing


def ideal_flight_time(plan: ReleasePlan, cfg: WorkspaceConfig) -> float:
    """Positive root of ``g t^2 / 2 - v_z t + (p_z - r_z) = 0`` for the landing plane."""
    g = cfg.gravity
    vz = plan.v_hat.z
    c = cfg.landing_height - plan.r.z
    disc = vz * vz - 2.0 * g * c
    if disc < 0:
        raise UnreachableTarget("landing plane never reached")
    return (vz + math.sqrt(disc)) / g
