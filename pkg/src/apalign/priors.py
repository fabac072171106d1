"""Candidate actions: grasp/place synthesis, encoding, and region geometry.

Actions are exchanged as fixed 10-float rows:

    [x, y, z, r1x, r1y, r1z, r2x, r2y, r2z, width]

where r1/r2 are the first two columns of the gripper rotation and decoding
re-orthonormalizes them by Gram-Schmidt.  Place rows reuse the layout with
an identity rotation block and the width slot repurposed as a relation
flag: +0.5 for "on", -0.5 for "around".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .common import ValidationError
from .interchange import ACTION_DIM

ON_FLAG = 0.5
AROUND_FLAG = -0.5


@dataclass(frozen=True)
class Footprint:
    """Planar support shape of an object: a disc or a yaw-rotated box."""

    kind: str                       # "disc" | "box"
    center: tuple[float, float]
    radius: float = 0.0
    half_extents: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("disc", "box"):
            raise ValidationError("footprint", f"unknown kind {self.kind!r}")

    def signed_distance(self, xy: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside, zero on the boundary."""
        pts = np.atleast_2d(np.asarray(xy, dtype=np.float64)) - np.asarray(self.center)
        if self.kind == "disc":
            return np.linalg.norm(pts, axis=1) - self.radius
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = pts @ np.array([[c, -s], [s, c]])  # world->box frame
        q = np.abs(local) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside

    def contains(self, xy: np.ndarray, margin: float = 0.0) -> np.ndarray:
        return self.signed_distance(xy) <= margin

    def bounding_radius(self) -> float:
        if self.kind == "disc":
            return self.radius
        return math.hypot(*self.half_extents)

    def corners(self) -> np.ndarray:
        """Box corners in world xy (boxes only)."""
        if self.kind != "box":
            raise ValidationError("footprint", "corners defined for boxes only")
        hx, hy = self.half_extents
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        return local @ rot.T + np.asarray(self.center)


def rect_corners(center: np.ndarray, axis_u: np.ndarray, half_u: float,
                 half_v: float) -> np.ndarray:
    """Corners of a rectangle spanned by unit axis_u and its perpendicular."""
    u = np.asarray(axis_u, dtype=np.float64)
    v = np.array([-u[1], u[0]])
    c = np.asarray(center, dtype=np.float64)
    return np.array([c + half_u * u + half_v * v, c - half_u * u + half_v * v,
                     c - half_u * u - half_v * v, c + half_u * u - half_v * v])


def _rects_intersect(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads."""
    for quad in (corners_a, corners_b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = corners_a @ axis
            pb = corners_b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def footprint_intersects_rect(fp: Footprint, center: np.ndarray, axis_u: np.ndarray,
                              half_u: float, half_v: float) -> bool:
    """Does a footprint overlap the given oriented rectangle?"""
    if fp.kind == "disc":
        u = np.asarray(axis_u, dtype=np.float64)
        v = np.array([-u[1], u[0]])
        rel = np.asarray(fp.center) - np.asarray(center)
        local = np.array([rel @ u, rel @ v])
        q = np.clip(local, [-half_u, -half_v], [half_u, half_v])
        return float(np.linalg.norm(local - q)) <= fp.radius
    return _rects_intersect(fp.corners(), rect_corners(center, axis_u, half_u, half_v))


@dataclass
class ObjectRegion:
    """A detected object: world footprint, top height, image bbox."""

    object_id: int
    footprint: Footprint
    top_z: float
    bbox_px: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1 inclusive


@dataclass
class GraspAction:
    position: np.ndarray        # [3]
    rotation: np.ndarray        # [3, 3], column 2 is the approach axis
    width: float
    source_id: int | None = None
    score: float = 1.0


@dataclass
class PlaceAction:
    position: np.ndarray        # [3]
    relation: str               # "on" | "around"
    ref_id: int | None = None


def encode_action(action: GraspAction | PlaceAction) -> np.ndarray:
    row = np.zeros(ACTION_DIM)
    row[:3] = np.asarray(action.position, dtype=np.float64)
    if isinstance(action, GraspAction):
        rot = np.asarray(action.rotation, dtype=np.float64)
        row[3:6] = rot[:, 0]
        row[6:9] = rot[:, 1]
        row[9] = action.width
    else:
        row[3:6] = (1.0, 0.0, 0.0)
        row[6:9] = (0.0, 1.0, 0.0)
        row[9] = ON_FLAG if action.relation == "on" else AROUND_FLAG
    return row


def rotation_from_columns(c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two columns into a proper rotation matrix."""
    n1 = np.linalg.norm(c1)
    if n1 < 1e-9:
        raise ValidationError("rotation", "zero first rotation column")
    b1 = c1 / n1
    c2p = c2 - (b1 @ c2) * b1
    n2 = np.linalg.norm(c2p)
    if n2 < 1e-9:
        raise ValidationError("rotation", "rotation columns are collinear")
    b2 = c2p / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def decode_action(row: np.ndarray, kind: str) -> GraspAction | PlaceAction:
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (ACTION_DIM,):
        raise ValidationError("candidates", f"expected [{ACTION_DIM}] row, got {row.shape}")
    if kind == "pick":
        rot = rotation_from_columns(row[3:6], row[6:9])
        return GraspAction(position=row[:3].copy(), rotation=rot, width=float(row[9]))
    if kind == "place":
        return PlaceAction(position=row[:3].copy(),
                           relation="on" if row[9] >= 0 else "around")
    raise ValidationError("candidate_kind", f"unknown kind {kind!r}")


@dataclass
class CandidateSet:
    """Candidate actions of one kind plus their encoded rows."""

    kind: str
    actions: list
    encoded: np.ndarray           # [L, ACTION_DIM] f64
    flags: list[str] = field(default_factory=list)

    @classmethod
    def from_actions(cls, kind: str, actions: Sequence, l_max: int | None = None,
                     flags: Sequence[str] = ()) -> "CandidateSet":
        actions = list(actions)
        flags = list(flags)
        if l_max is not None and len(actions) > l_max:
            # keep the best-scored candidates; places carry no score and
            # are bounded by construction, so index order is fine for them
            scores = np.array([getattr(a, "score", 1.0) for a in actions])
            order = np.argsort(-scores, kind="stable")[:l_max]
            order.sort()
            actions = [actions[i] for i in order]
            flags.append("truncated")
        if actions:
            encoded = np.stack([encode_action(a) for a in actions])
        else:
            encoded = np.zeros((0, ACTION_DIM))
            flags.append("empty")
        return cls(kind=kind, actions=actions, encoded=encoded, flags=flags)

    @property
    def empty(self) -> bool:
        return len(self.actions) == 0

    def __len__(self) -> int:
        return len(self.actions)


def load_candidates(rows: np.ndarray, kind: str) -> CandidateSet:
    """Decode stored rows, validating rotation blocks for grasps.

    Grasp rotation columns must be orthonormal within 1e-3 in the max norm
    of R^T R - I before re-orthonormalization.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != ACTION_DIM:
        raise ValidationError("candidates", f"expected [L, {ACTION_DIM}], got {rows.shape}")
    actions = []
    for i, row in enumerate(rows):
        if kind == "pick":
            raw = np.stack([row[3:6], row[6:9], np.cross(row[3:6], row[6:9])], axis=1)
            err = np.abs(raw.T @ raw - np.eye(3)).max()
            if err > 1e-3:
                raise ValidationError("rotation",
                                      f"candidate {i}: columns not orthonormal (err {err:.2e})")
        actions.append(decode_action(row, kind))
    return CandidateSet(kind=kind, actions=actions, encoded=rows.copy())


def region_proposals(id_mask: np.ndarray, min_size: int = 5) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Bounding boxes of same-id pixels; boxes smaller than min_size px a side drop.

    ``id_mask`` holds -1 for background.  Returns (id, (x0, y0, x1, y1))
    sorted by id, bounds inclusive.
    """
    mask = np.asarray(id_mask)
    out = []
    for obj_id in np.unique(mask):
        if obj_id < 0:
            continue
        ys, xs = np.nonzero(mask == obj_id)
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        if (x1 - x0 + 1) < min_size or (y1 - y0 + 1) < min_size:
            continue
        out.append((int(obj_id), (x0, y0, x1, y1)))
    return out


@dataclass(frozen=True)
class GraspConfig:
    per_object: int = 4          # antipodal samples per object
    hover_per_object: int = 1    # phantom detections floating above each shape
    position_noise: float = 0.004
    spur_fraction: float = 0.2   # free-space spurs, vs attached count
    width_margin: float = 0.008
    max_width: float = 0.10
    depth_range: tuple[float, float] = (0.35, 0.8)  # grasp height, fraction of body
    hover_range: tuple[float, float] = (0.01, 0.03)
    l_max: int = 256


def _top_down_rotation(closing_dir: np.ndarray) -> np.ndarray:
    """Gripper frame: x = closing axis (in-plane), z = straight down."""
    x = np.array([closing_dir[0], closing_dir[1], 0.0])
    x /= np.linalg.norm(x)
    z = np.array([0.0, 0.0, -1.0])
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def synth_grasps(regions: Sequence[ObjectRegion], table_height: float,
                 workspace_xy: tuple[tuple[float, float], tuple[float, float]],
                 rng: np.random.Generator,
                 config: GraspConfig | None = None) -> CandidateSet:
    """Antipodal top-down grasps per object plus spurious detections.

    Attached grasps sit inside their source footprint (position noise is
    clipped back inside) and close around the body at a sampled fraction
    of its height, the way a parallel-jaw gripper actually holds things.
    Spurious grasps have no source: each object also gets a phantom
    hovering right above its top face, mimicking the false positives a
    real grasp network emits around salient shapes, plus a small number
    of uniform free-space proposals.
    """
    config = config or GraspConfig()
    (x_lo, x_hi), (y_lo, y_hi) = workspace_xy
    d_lo, d_hi = config.depth_range
    actions: list[GraspAction] = []
    for region in regions:
        fp = region.footprint
        body = region.top_z - table_height
        for _ in range(config.per_object):
            z = max(table_height + body * rng.uniform(d_lo, d_hi),
                    table_height + 0.005)
            if fp.kind == "disc":
                phi = rng.uniform(0.0, 2 * math.pi)
                closing = np.array([math.cos(phi), math.sin(phi)])
                width = 2 * fp.radius + config.width_margin
                pos_xy = np.asarray(fp.center)
            else:
                hx, hy = fp.half_extents
                axis = int(rng.integers(2))  # close across x or y extent
                half_span = (hx, hy)[axis]
                other = (hy, hx)[axis]
                c, s = math.cos(fp.yaw), math.sin(fp.yaw)
                frame = np.array([[c, -s], [s, c]])
                closing = frame[:, axis]
                slide = frame[:, 1 - axis] * rng.uniform(-0.7, 0.7) * other
                width = 2 * half_span + config.width_margin
                pos_xy = np.asarray(fp.center) + slide
            noise = rng.normal(scale=config.position_noise, size=2)
            pos_xy = pos_xy + noise
            if not fp.contains(pos_xy[None, :])[0]:
                pos_xy = pos_xy - noise  # keep the grasp on its source object
            actions.append(GraspAction(
                position=np.array([pos_xy[0], pos_xy[1], z]),
                rotation=_top_down_rotation(closing),
                width=min(width, config.max_width),
                source_id=region.object_id,
                score=float(rng.uniform(0.6, 1.0)),
            ))

    def spur(pos: np.ndarray) -> GraspAction:
        phi = rng.uniform(0.0, 2 * math.pi)
        return GraspAction(
            position=pos,
            rotation=_top_down_rotation(np.array([math.cos(phi), math.sin(phi)])),
            width=float(rng.uniform(0.03, config.max_width)),
            source_id=None,
            score=float(rng.uniform(0.3, 0.9)),
        )

    h_lo, h_hi = config.hover_range
    for region in regions:
        fp = region.footprint
        for _ in range(config.hover_per_object):
            if fp.kind == "disc":
                r = fp.radius * math.sqrt(rng.uniform())
                phi = rng.uniform(0.0, 2 * math.pi)
                xy = np.asarray(fp.center) + r * np.array(
                    [math.cos(phi), math.sin(phi)])
            else:
                hx, hy = fp.half_extents
                c, s = math.cos(fp.yaw), math.sin(fp.yaw)
                local = np.array([rng.uniform(-hx, hx), rng.uniform(-hy, hy)])
                xy = np.asarray(fp.center) + np.array(
                    [[c, -s], [s, c]]) @ local
            actions.append(spur(np.array([xy[0], xy[1],
                                          region.top_z + rng.uniform(h_lo, h_hi)])))

    n_free = int(round(config.spur_fraction * config.per_object * len(regions)))
    for _ in range(n_free):
        actions.append(spur(np.array([rng.uniform(x_lo, x_hi),
                                      rng.uniform(y_lo, y_hi),
                                      table_height + rng.uniform(0.005, 0.09)])))
    flags = [] if actions else ["no_objects"]
    return CandidateSet.from_actions("pick", actions, l_max=config.l_max, flags=flags)


@dataclass(frozen=True)
class PlaceConfig:
    per_relation: int = 3
    annulus_width: float = 0.06
    max_tries: int = 100


def sample_places(regions: Sequence[ObjectRegion], table_height: float,
                  workspace_xy: tuple[tuple[float, float], tuple[float, float]],
                  rng: np.random.Generator,
                  config: PlaceConfig | None = None) -> CandidateSet:
    """Per region: uniform points on the top face and in the free annulus.

    Annulus samples must avoid every footprint and stay in the workspace;
    after ``max_tries`` rejections a region is undersampled and flagged.
    """
    config = config or PlaceConfig()
    (x_lo, x_hi), (y_lo, y_hi) = workspace_xy
    actions: list[PlaceAction] = []
    flags: list[str] = []
    for region in regions:
        fp = region.footprint
        for _ in range(config.per_relation):
            if fp.kind == "disc":
                r = fp.radius * math.sqrt(rng.uniform())
                phi = rng.uniform(0.0, 2 * math.pi)
                xy = np.asarray(fp.center) + r * np.array([math.cos(phi), math.sin(phi)])
            else:
                hx, hy = fp.half_extents
                local = rng.uniform([-hx, -hy], [hx, hy])
                c, s = math.cos(fp.yaw), math.sin(fp.yaw)
                xy = np.asarray(fp.center) + np.array([[c, -s], [s, c]]) @ local
            actions.append(PlaceAction(position=np.array([xy[0], xy[1], region.top_z]),
                                       relation="on", ref_id=region.object_id))
        placed = 0
        for _ in range(config.max_tries):
            if placed == config.per_relation:
                break
            phi = rng.uniform(0.0, 2 * math.pi)
            direction = np.array([math.cos(phi), math.sin(phi)])
            # walk outward from the boundary along a ray; small inset keeps
            # the sample strictly outside its own footprint
            ring = rng.uniform(0.002, config.annulus_width)
            start = np.asarray(fp.center)
            radial = fp.bounding_radius() if fp.kind == "disc" else None
            if fp.kind == "disc":
                xy = start + (radial + ring) * direction
            else:
                # find the boundary along this ray by bisection on the SDF
                lo_t, hi_t = 0.0, fp.bounding_radius() + 0.01
                for _ in range(30):
                    mid = 0.5 * (lo_t + hi_t)
                    if fp.signed_distance((start + mid * direction)[None, :])[0] < 0:
                        lo_t = mid
                    else:
                        hi_t = mid
                xy = start + (hi_t + ring) * direction
            if not (x_lo <= xy[0] <= x_hi and y_lo <= xy[1] <= y_hi):
                continue
            if any(other.footprint.contains(xy[None, :])[0] for other in regions):
                continue
            actions.append(PlaceAction(position=np.array([xy[0], xy[1], table_height]),
                                       relation="around", ref_id=region.object_id))
            placed += 1
        if placed < config.per_relation:
            flags.append(f"around_undersampled:{region.object_id}")
    return CandidateSet.from_actions("place", actions, flags=flags)
