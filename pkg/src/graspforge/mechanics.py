"""Parallel-jaw contacts, the antipodal grasp predicate, and quasi-static settling.

Contact normals are always the polygon's OUTWARD edge normals. With outward
normals the antipodal conditions read: both contact normals align with the
jaw closing axis (n1 with +g, n2 with -g, each within theta1) and the normals
are nearly anti-parallel (angle between them beyond theta2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    GeometryError,
    Polygon,
    Pose2,
    canonical_angle,
    cross2,
    edge_outward_normals,
    points_in_polygon,
    ray_polygon_hits,
    unit_from_angle,
)


class DegenerateContactError(GeometryError):
    """Contact points coincide; no grasp direction exists."""


@dataclass(frozen=True)
class GripperSpec:
    """Parametric parallel-jaw model."""

    max_opening: float = 0.085  # meters
    friction_angle: float = math.radians(45.0)  # Coulomb cone, mu ~ 1 (rubber pads)
    min_thickness: float = 0.01  # smallest jaw separation that counts as held

    def __post_init__(self):
        if self.max_opening <= 0:
            raise ValueError("max_opening must be positive")
        if not 0 < self.friction_angle < math.pi / 2:
            raise ValueError("friction_angle must lie in (0, pi/2)")

    @property
    def jaw_half_span(self) -> float:
        return self.max_opening / 2.0


@dataclass(frozen=True)
class GraspLine:
    """A planar grasp: center point and closing-axis angle, frame-tagged."""

    center: np.ndarray
    angle: float
    frame: str = "world"  # "world" or "image"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "angle", canonical_angle(self.angle))


@dataclass(frozen=True)
class ContactPair:
    """Two jaw contacts with outward surface normals."""

    c1: np.ndarray
    n1: np.ndarray
    c2: np.ndarray
    n2: np.ndarray

    @property
    def separation(self) -> float:
        return float(np.hypot(*(self.c1 - self.c2)))


@dataclass(frozen=True)
class AntipodalThresholds:
    # theta1 default exceeds half the 16-bin spacing (11.25 deg) so that any
    # parallel-face pair is reachable from SOME bin at every orientation
    theta1: float = math.radians(12.0)  # alignment tolerance, prone to 0
    theta2: float = math.radians(170.0)  # anti-parallel requirement, prone to pi

    def __post_init__(self):
        if not (0 <= self.theta1 < math.pi / 2 < self.theta2 <= math.pi):
            raise ValueError("need 0 <= theta1 < pi/2 < theta2 <= pi")


@dataclass(frozen=True)
class SettleResult:
    success: bool
    final_pose: Pose2
    contacts: ContactPair | None
    iterations: int
    failure_reason: str | None = None


def grasp_direction(c1, c2) -> np.ndarray:
    """Unit vector from the second contact toward the first (Fig. 2's g)."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    d = c1 - c2
    n = math.hypot(d[0], d[1])
    if n <= 1e-9:
        raise DegenerateContactError("contact points coincide")
    return d / n


def contact_batch(world_verts: np.ndarray, centers, angle: float, gripper: GripperSpec):
    """Vectorized jaw-contact query for many grasp centers at one angle.

    Casts the two opposed jaw rays from ``p +- jaw_half_span * u_hat`` toward
    each center p. Returns (valid, c1, n1, c2, n2) arrays; invalid entries are
    centers where a jaw origin starts inside the object, a ray misses, or the
    contact span exceeds the opening.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    u_hat = unit_from_angle(angle)
    h = gripper.jaw_half_span
    o1 = centers + h * u_hat
    o2 = centers - h * u_hat
    normals = edge_outward_normals(world_verts)

    hit1, t1, e1 = ray_polygon_hits(o1, -u_hat, world_verts)
    hit2, t2, e2 = ray_polygon_hits(o2, u_hat, world_verts)
    inside1 = points_in_polygon(o1, world_verts)
    inside2 = points_in_polygon(o2, world_verts)
    valid = hit1 & hit2 & ~inside1 & ~inside2

    t1 = np.where(hit1, t1, 0.0)
    t2 = np.where(hit2, t2, 0.0)
    c1 = o1 - t1[:, None] * u_hat
    c2 = o2 + t2[:, None] * u_hat
    sep = np.hypot(*(c1 - c2).T)
    valid &= sep <= gripper.max_opening + 1e-12
    return valid, c1, normals[e1], c2, normals[e2]


def compute_contacts(
    poly: Polygon, pose: Pose2, grasp: GraspLine, gripper: GripperSpec
) -> ContactPair | None:
    """Contacts of a parallel-jaw closing along the grasp line, or None."""
    wv = poly.world_vertices(pose)
    valid, c1, n1, c2, n2 = contact_batch(wv, grasp.center[None, :], grasp.angle, gripper)
    if not valid[0]:
        return None
    return ContactPair(c1=c1[0], n1=n1[0], c2=c2[0], n2=n2[0])


def alignment_angles(pair: ContactPair):
    """(a1, a2, opposition): normal/closing-axis misalignments and the
    angle between the two normals."""
    g = grasp_direction(pair.c1, pair.c2)
    a1 = math.acos(np.clip(float(pair.n1 @ g), -1.0, 1.0))
    a2 = math.acos(np.clip(float(-pair.n2 @ g), -1.0, 1.0))
    opp = math.acos(np.clip(float(pair.n1 @ pair.n2), -1.0, 1.0))
    return a1, a2, opp


def is_antipodal(pair: ContactPair, thresholds: AntipodalThresholds) -> bool:
    """True when the closing axis is parallel to both contact normals and the
    normals are nearly anti-parallel."""
    if pair.separation <= 1e-9:
        return False
    a1, a2, opp = alignment_angles(pair)
    return a1 < thresholds.theta1 and a2 < thresholds.theta1 and opp > thresholds.theta2


def _antipodal_batch(c1, n1, c2, n2, thresholds: AntipodalThresholds):
    """Vectorized predicate; also returns the per-contact misalignments."""
    d = c1 - c2
    sep = np.hypot(d[:, 0], d[:, 1])
    ok_sep = sep > 1e-9
    g = np.zeros_like(d)
    g[ok_sep] = d[ok_sep] / sep[ok_sep, None]
    a1 = np.arccos(np.clip(np.sum(n1 * g, axis=1), -1.0, 1.0))
    a2 = np.arccos(np.clip(-np.sum(n2 * g, axis=1), -1.0, 1.0))
    opp = np.arccos(np.clip(np.sum(n1 * n2, axis=1), -1.0, 1.0))
    anti = ok_sep & (a1 < thresholds.theta1) & (a2 < thresholds.theta1) & (opp > thresholds.theta2)
    return anti, a1, a2, sep


MAX_STEP_RAD = 0.1


def closure_settle(
    poly: Polygon,
    pose: Pose2,
    grasp: GraspLine,
    gripper: GripperSpec,
    thresholds: AntipodalThresholds,
    max_iters: int = 40,
) -> SettleResult:
    """Quasi-static jaw closure: reorient the object about the grasp center
    until the contacts become antipodal, or fail.

    Failure modes: jaws miss or the object is too wide ("missed_contact"),
    initial misalignment beyond the friction cone ("slip"), final separation
    below min_thickness ("too_thin"), no convergence ("not_antipodal").
    A candidate rotation step starts at min(e/2, 0.1 rad) toward the torque
    of the pressing contact normals; steps that lose contact or increase the
    alignment error are halved.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    p = grasp.center
    cur = pose

    def error_of(pair):
        a1, a2, _ = alignment_angles(pair)
        return a1 + a2

    for it in range(1, max_iters + 1):
        pair = compute_contacts(poly, cur, grasp, gripper)
        if pair is None:
            return SettleResult(False, cur, None, it, "missed_contact")
        if pair.separation <= 1e-9:
            return SettleResult(False, cur, pair, it, "too_thin")
        a1, a2, opp = alignment_angles(pair)
        e = a1 + a2
        if is_antipodal(pair, thresholds):
            if pair.separation >= gripper.min_thickness:
                return SettleResult(True, cur, pair, it)
            return SettleResult(False, cur, pair, it, "too_thin")
        if it == 1 and max(a1, a2) > gripper.friction_angle:
            return SettleResult(False, cur, pair, it, "slip")
        torque = cross2(pair.c1 - p, -pair.n1) + cross2(pair.c2 - p, -pair.n2)
        sign = 1.0 if torque >= 0 else -1.0
        accepted = False
        # torque gives the preferred sense; a step must reduce e to be
        # accepted, halving on rejection, else the opposite sense is tried
        for direction in (sign, -sign):
            step = direction * min(e / 2.0, MAX_STEP_RAD)
            for _ in range(8):
                cand = cur.rotated_about(step, p)
                cand_pair = compute_contacts(poly, cand, grasp, gripper)
                if cand_pair is not None and cand_pair.separation > 1e-9:
                    if error_of(cand_pair) <= e - 1e-12:
                        cur = cand
                        accepted = True
                        break
                step /= 2.0
            if accepted:
                break
        if not accepted:
            return SettleResult(False, cur, pair, it, "not_antipodal")
    return SettleResult(False, cur, pair, max_iters, "not_antipodal")
