"""Multi-view depth/feature fusion into point, feature, and similarity clouds.

Views are calibrated pinhole cameras (OpenCV axes: +z forward, +y down in the
image).  Depth images store z-depth; 0 marks invalid pixels.  Fusion follows
the truncated depth-difference rule: a point is visible in a view when its
expected depth is less than the observed depth plus the truncation margin,
and per-view weights decay exponentially once the difference leaves the
truncation band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .common import ValidationError


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a 4x4 camera-from-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def __post_init__(self) -> None:
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValidationError("pose", f"expected [4, 4], got {pose.shape}")
        object.__setattr__(self, "pose", pose)


@dataclass(frozen=True)
class WorkspaceBounds:
    """Axis-aligned crop box; ``table_height`` is the support-plane z."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    table_height: float = 0.0


@dataclass
class ViewInputs:
    """One calibrated view: depth, optional per-pixel features/similarity."""

    camera: CameraModel
    depth: np.ndarray                      # [H, W], 0 = invalid
    features: np.ndarray | None = None     # [H, W, D]
    similarity: np.ndarray | None = None   # [H, W]


@dataclass(frozen=True)
class FusionConfig:
    mu: float = 0.02            # truncation margin [m]
    eps: float = 1e-6           # fusion denominator stabilizer
    voxel: float = 0.004        # dedup voxel edge [m]
    table_tol: float = 0.005    # pick-mode table filter margin [m]
    depth_metric: str = "z"     # "z" | "euclidean"

    def __post_init__(self) -> None:
        if self.depth_metric not in ("z", "euclidean"):
            raise ValidationError("depth_metric", f"unknown metric {self.depth_metric!r}")
        if self.mu <= 0:
            raise ValidationError("mu", "truncation margin must be positive")


@dataclass
class FusedClouds:
    points: np.ndarray          # [n, 3]
    features: np.ndarray        # [n, D]
    similarities: np.ndarray    # [n]
    degenerate: np.ndarray      # [n] bool, zero-norm fused feature (or no view)
    visible_count: np.ndarray   # [n] int


@dataclass
class SampledClouds:
    points: np.ndarray
    features: np.ndarray
    similarities: np.ndarray
    indices: np.ndarray         # positions in the source cloud


def look_at(eye: Sequence[float], target: Sequence[float],
            up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-from-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("target", "eye and target coincide")
    z = forward / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-12:
        raise ValidationError("up", "up vector parallel to view direction")
    x /= xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ eye
    return pose


def project_points(points: np.ndarray, camera: CameraModel,
                   depth_metric: str = "z") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points -> pixel coordinates, expected depth, in-front mask."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.pose[:3, :3].T + camera.pose[:3, 3]
    z = cam[:, 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    uv = np.stack([camera.fx * cam[:, 0] / safe_z + camera.cx,
                   camera.fy * cam[:, 1] / safe_z + camera.cy], axis=1)
    ell = np.linalg.norm(cam, axis=1) if depth_metric == "euclidean" else z
    return uv, ell, in_front


def ray_norms(camera: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Per-pixel |K^-1 (u, v, 1)|: converts z-depth to Euclidean range."""
    x = (uv[:, 0] - camera.cx) / camera.fx
    y = (uv[:, 1] - camera.cy) / camera.fy
    return np.sqrt(x * x + y * y + 1.0)


def _corner_indices(img_shape, uv):
    h, w = img_shape[0], img_shape[1]
    u = np.where(np.isfinite(uv[:, 0]), uv[:, 0], -1.0)
    v = np.where(np.isfinite(uv[:, 1]), uv[:, 1], -1.0)
    inside = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = np.clip(u - x0, 0.0, 1.0)
    wy = np.clip(v - y0, 0.0, 1.0)
    return inside, x0, y0, x1, y1, wx, wy


def bilinear(img: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup.  Returns (values, inside); outside values are zero.

    A query is inside only when all four interpolation corners exist, so
    points projecting within half a pixel of the border are rejected.
    """
    img = np.asarray(img)
    inside, x0, y0, x1, y1, wx, wy = _corner_indices(img.shape, uv)
    if img.ndim == 3:
        wx = wx[:, None]
        wy = wy[:, None]
        inside_w = inside[:, None]
    else:
        inside_w = inside
    val = (img[y0, x0] * (1 - wx) * (1 - wy)
           + img[y0, x1] * wx * (1 - wy)
           + img[y1, x0] * (1 - wx) * wy
           + img[y1, x1] * wx * wy)
    return np.where(inside_w, val, 0.0), inside


def corners_valid(mask: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """True where all four interpolation corners of a boolean mask are set."""
    inside, x0, y0, x1, y1, _, _ = _corner_indices(mask.shape, uv)
    return inside & mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]


def truncated_depth_diff(ell: np.ndarray, ell_obs: np.ndarray,
                         mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw and truncated depth difference d = ell - ell_obs, d' = clamp."""
    d = np.asarray(ell, dtype=np.float64) - np.asarray(ell_obs, dtype=np.float64)
    return d, np.clip(d, -mu, mu)


def visibility(d: np.ndarray, mu: float) -> np.ndarray:
    """1.0 where the point lies at or in front of the observed surface."""
    return (np.asarray(d) < mu).astype(np.float64)


def view_weight(d: np.ndarray, mu: float) -> np.ndarray:
    """exp(min(mu - |d|, 0) / mu): 1 inside the band, decaying outside."""
    return np.exp(np.minimum(mu - np.abs(d), 0.0) / mu)


def fuse_values(stack: np.ndarray, vis: np.ndarray, beta: np.ndarray,
                eps: float) -> np.ndarray:
    """Weighted view average: sum_i beta_i v_i x_i / (eps + sum_i v_i)."""
    w = beta * vis
    if stack.ndim == 3:
        num = (w[:, :, None] * stack).sum(axis=0)
        return num / (eps + vis.sum(axis=0))[:, None]
    return (w * stack).sum(axis=0) / (eps + vis.sum(axis=0))


def cosine_similarity(features: np.ndarray, lang: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine against a language embedding; zero-norm rows flag as degenerate."""
    feats = np.asarray(features, dtype=np.float64)
    lang = np.asarray(lang, dtype=np.float64)
    fn = np.linalg.norm(feats, axis=1)
    ln = np.linalg.norm(lang)
    degenerate = (fn == 0.0) | (ln == 0.0)
    sims = feats @ lang / np.where(degenerate, 1.0, fn * ln)
    return np.where(degenerate, 0.0, np.clip(sims, -1.0, 1.0)), degenerate


def backproject(views: Sequence[ViewInputs], bounds: WorkspaceBounds,
                voxel: float = 0.004) -> np.ndarray:
    """Unproject valid depth pixels, crop to bounds, dedup on a voxel grid.

    Dedup keeps the first point scanned into each voxel (views in order,
    pixels row-major), so the result is deterministic.
    """
    if not views:
        raise ValidationError("views", "at least one view required")
    lo = np.asarray(bounds.lo, dtype=np.float64)
    hi = np.asarray(bounds.hi, dtype=np.float64)
    chunks = []
    for view in views:
        cam = view.camera
        depth = np.asarray(view.depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise ValidationError("depth", f"shape {depth.shape} does not match camera")
        ys, xs = np.nonzero(depth > 0)
        z = depth[ys, xs]
        local = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z], axis=1)
        cam_from_world = cam.pose
        world_from_cam = np.linalg.inv(cam_from_world)
        world = local @ world_from_cam[:3, :3].T + world_from_cam[:3, 3]
        keep = np.all((world >= lo) & (world <= hi), axis=1)
        chunks.append(world[keep])
    pts = np.concatenate(chunks, axis=0)
    if pts.shape[0] == 0:
        return pts
    keys = np.floor((pts - lo) / voxel).astype(np.int64)
    scalar = (keys[:, 0] << 42) + (keys[:, 1] << 21) + keys[:, 2]
    _, first = np.unique(scalar, return_index=True)
    first.sort()
    return pts[first]


def fuse_at_points(points: np.ndarray, views: Sequence[ViewInputs],
                   lang: np.ndarray | None = None,
                   config: FusionConfig | None = None) -> FusedClouds:
    """Evaluate the fusion rule at given world points across all views."""
    config = config or FusionConfig()
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    feat_dim = None
    use_sim_maps = lang is None
    for view in views:
        if view.features is None:
            raise ValidationError("features", "every view needs a feature map")
        if feat_dim is None:
            feat_dim = view.features.shape[2]
        elif view.features.shape[2] != feat_dim:
            raise ValidationError("features", "feature dims differ across views")
        if use_sim_maps and view.similarity is None:
            raise ValidationError(
                "language",
                "need a language embedding or per-view similarity maps")

    m = len(views)
    vis = np.zeros((m, n))
    beta = np.zeros((m, n))
    feats = np.zeros((m, n, feat_dim))
    sims = np.zeros((m, n)) if use_sim_maps else None
    for i, view in enumerate(views):
        cam = view.camera
        depth = np.asarray(view.depth, dtype=np.float64)
        uv, ell, in_front = project_points(pts, cam, config.depth_metric)
        obs, _ = bilinear(depth, uv)
        valid = in_front & corners_valid(depth > 0, uv)
        if config.depth_metric == "euclidean":
            obs = obs * ray_norms(cam, uv)
        d = np.where(valid, ell - obs, 1e6)
        vis[i] = visibility(d, config.mu)
        beta[i] = view_weight(d, config.mu)
        feats[i], _ = bilinear(np.asarray(view.features, dtype=np.float64), uv)
        if use_sim_maps:
            sims[i], _ = bilinear(np.asarray(view.similarity, dtype=np.float64), uv)

    fused_feats = fuse_values(feats, vis, beta, config.eps)
    visible_count = vis.sum(axis=0).astype(np.int64)
    if use_sim_maps:
        fused_sims = np.clip(fuse_values(sims, vis, beta, config.eps), -1.0, 1.0)
        degenerate = visible_count == 0
        fused_sims = np.where(degenerate, 0.0, fused_sims)
    else:
        fused_sims, degenerate = cosine_similarity(fused_feats, lang)
    return FusedClouds(points=pts, features=fused_feats, similarities=fused_sims,
                       degenerate=degenerate, visible_count=visible_count)


def build_clouds(views: Sequence[ViewInputs], bounds: WorkspaceBounds,
                 lang: np.ndarray | None = None, mode: str = "place",
                 config: FusionConfig | None = None) -> FusedClouds:
    """Backproject, crop, optionally drop table points, then fuse.

    ``mode="pick"`` removes points at or below table height plus the
    configured tolerance; ``mode="place"`` keeps the support surface.
    """
    config = config or FusionConfig()
    if mode not in ("pick", "place"):
        raise ValidationError("mode", f"unknown mode {mode!r}")
    pts = backproject(views, bounds, config.voxel)
    if mode == "pick" and pts.shape[0]:
        pts = pts[pts[:, 2] > bounds.table_height + config.table_tol]
    if pts.shape[0] == 0:
        raise ValidationError("points", "empty cloud after filtering")
    return fuse_at_points(pts, views, lang, config)


def prioritized_sample(clouds: FusedClouds, n_sample: int = 500) -> SampledClouds:
    """Keep the min(n_sample, ceil(n/2)) highest-similarity points.

    Ties break toward ascending point index; the output is ordered by
    descending similarity.
    """
    if n_sample < 1:
        raise ValidationError("n_sample", "must be at least 1")
    n = clouds.points.shape[0]
    if n < 1:
        raise ValidationError("points", "cannot sample an empty cloud")
    m = min(n_sample, math.ceil(n / 2))
    order = np.argsort(-clouds.similarities, kind="stable")
    idx = order[:m]
    return SampledClouds(points=clouds.points[idx], features=clouds.features[idx],
                         similarities=clouds.similarities[idx], indices=idx)
