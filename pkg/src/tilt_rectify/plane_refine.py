"""Plane-annotation refinement: strict RANSAC on depth, then normal-guided growth.

For each annotated mask a plane is fitted to its back-projected depth with a
tight inlier threshold.  The inliers seed a 4-connected region that grows
through pixels close to the plane whose normals agree with it.  A refined
mask survives only if it keeps enough of the original annotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, EmptyMask, EmptySeed
from .geometry import CameraIntrinsics
from .warping import NormalMap


@dataclass
class DepthMap:
    """Per-pixel z-depth in metres; ``valid`` defaults to ``depth > 0``."""

    depth: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.valid is None:
            self.valid = self.depth > 0
        self.valid = np.asarray(self.valid, dtype=bool) & (self.depth > 0)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class Plane:
    """``{p : normal . p = offset}`` with ``normal`` facing the camera (offset <= 0)."""

    normal: np.ndarray
    offset: float

    def distance(self, points) -> np.ndarray:
        return np.abs(np.asarray(points, dtype=float) @ self.normal - self.offset)


@dataclass
class PlaneMask:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def pixels(self) -> np.ndarray:
        """``(N, 2)`` array of ``(u, v)`` coordinates."""
        v, u = np.nonzero(self.mask)
        return np.stack([u, v], axis=-1)

    @classmethod
    def from_pixels(cls, pixels, shape) -> "PlaneMask":
        m = np.zeros(shape, dtype=bool)
        pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
        m[pixels[:, 1], pixels[:, 0]] = True
        return cls(m)


def unproject(K: CameraIntrinsics, u, v, depth) -> np.ndarray:
    """Camera-frame point ``depth * K^-1 (u, v, 1)``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(depth, dtype=float)
    return np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)


def unproject_map(K: CameraIntrinsics, depth: DepthMap) -> np.ndarray:
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    return unproject(K, u, v, depth.depth)


def _oriented(normal, offset):
    if offset > 0:
        return -normal, -offset
    return normal, offset


def fit_plane_lsq(points) -> Plane:
    """Least-squares plane through the centroid, normal = weakest scatter direction."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    n, d = _oriented(normal, float(normal @ centroid))
    return Plane(n, d)


def sample_hypotheses(points, iters: int, rng):
    """Planes through ``iters`` random point triples.

    Returns ``(normals, offsets)``; collinear triples get a zero normal and
    never collect inliers.
    """
    n = len(points)
    idx = np.empty((iters, 3), dtype=int)
    for i in range(iters):
        idx[i] = rng.choice(n, 3, replace=False)
    a, b, c = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norm = np.linalg.norm(normals, axis=1)
    good = norm > 1e-12
    normals[good] /= norm[good, None]
    normals[~good] = 0.0
    offsets = np.sum(normals * a, axis=1)
    return normals, offsets, good


def _count_inliers(points, normals, offsets, good, thresh, chunk=64):
    counts = np.full(len(normals), -1, dtype=int)
    for s in range(0, len(normals), chunk):
        d = np.abs(points @ normals[s : s + chunk].T - offsets[s : s + chunk])
        counts[s : s + chunk] = np.count_nonzero(d <= thresh, axis=0)
    counts[~good] = -1
    return counts


def ransac_plane(points, inlier_thresh: float = 0.02, iters: int = 500, seed: int = 0):
    """Best plane by inlier count over ``iters`` 3-point hypotheses.

    The winner is refitted by least squares on its inliers; the refit is kept
    only when it does not lose inliers.  Returns ``(Plane, inlier_indices)``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(points)}")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateInput("points are collinear")

    rng = np.random.default_rng(seed)
    normals, offsets, good = sample_hypotheses(points, iters, rng)
    counts = _count_inliers(points, normals, offsets, good, inlier_thresh)
    best = int(np.argmax(counts))
    n, d = _oriented(normals[best], float(offsets[best]))
    plane = Plane(n, d)
    inliers = np.flatnonzero(plane.distance(points) <= inlier_thresh)
    if len(inliers) >= 3:
        refit = fit_plane_lsq(points[inliers])
        refit_inliers = np.flatnonzero(refit.distance(points) <= inlier_thresh)
        if len(refit_inliers) >= len(inliers):
            plane, inliers = refit, refit_inliers
    return plane, inliers


def region_grow(
    seed_mask: PlaneMask,
    plane: Plane,
    depth: DepthMap,
    normals: NormalMap,
    K: CameraIntrinsics,
    dist_thresh: float = 0.20,
    angle_thresh: float = np.radians(30.0),
) -> PlaneMask:
    """4-connected growth from the seed pixels.

    Seeds are admitted on the distance test alone; a grown pixel must be
    closer than ``dist_thresh`` to the plane and have a normal within
    ``angle_thresh`` of the plane normal.  Invalid depth blocks growth.
    """
    seed = np.asarray(getattr(seed_mask, "mask", seed_mask), dtype=bool)
    if not seed.any():
        raise EmptySeed("region growing needs at least one seed pixel")
    if seed.shape != depth.shape or normals.shape != depth.shape:
        raise ValueError("seed, depth and normal maps must share dimensions")
    pts = unproject_map(K, depth)
    near = depth.valid & (plane.distance(pts) < dist_thresh)
    cosang = np.clip(normals.normals @ plane.normal, -1.0, 1.0)
    agree = normals.valid & (np.arccos(cosang) < angle_thresh)
    admitted = seed & near
    labels, _ = ndimage.label(admitted | (near & agree))
    keep = np.unique(labels[admitted])
    return PlaneMask(np.isin(labels, keep[keep > 0]))


@dataclass(frozen=True)
class RefineConfig:
    inlier_thresh: float = 0.02
    dist_thresh: float = 0.20
    angle_thresh: float = float(np.radians(30.0))
    keep_ratio: float = 0.5
    ransac_iters: int = 500
    seed: int = 0


@dataclass
class MaskRecord:
    index: int
    kept: bool
    original_size: int
    refined_size: int = 0
    inliers: int = 0
    plane: Plane = None
    error: str = None
    mask: PlaneMask = field(default=None, repr=False)

    @property
    def ratio(self) -> float:
        return self.refined_size / self.original_size if self.original_size else 0.0

    def to_dict(self) -> dict:
        out = {
            "index": self.index,
            "kept": self.kept,
            "original_size": self.original_size,
            "refined_size": self.refined_size,
            "ratio": self.ratio,
            "inliers": self.inliers,
            "error": self.error,
        }
        if self.plane is not None:
            out["plane"] = {"normal": [float(x) for x in self.plane.normal], "offset": float(self.plane.offset)}
        return out


def refine_one(index, mask, depth, normals, K, cfg: RefineConfig) -> MaskRecord:
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    record = MaskRecord(index, False, int(np.count_nonzero(m)))
    try:
        if not m.any():
            raise EmptyMask(f"mask {index} is empty")
        usable = m & depth.valid
        v, u = np.nonzero(usable)
        pts = unproject(K, u, v, depth.depth[v, u])
        plane, inliers = ransac_plane(pts, cfg.inlier_thresh, cfg.ransac_iters, cfg.seed + index)
        seed = PlaneMask.from_pixels(np.stack([u[inliers], v[inliers]], axis=-1), m.shape)
        grown = region_grow(seed, plane, depth, normals, K, cfg.dist_thresh, cfg.angle_thresh)
    except (DegenerateInput, EmptyMask, EmptySeed) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        return record
    record.plane = plane
    record.inliers = len(inliers)
    record.refined_size = grown.size
    record.mask = grown
    record.kept = record.ratio > cfg.keep_ratio
    return record


def refine_report(masks, depth: DepthMap, normals: NormalMap, K, cfg: RefineConfig = RefineConfig()):
    """Refine every mask; failures are recorded per mask and do not stop the batch."""
    return [refine_one(i, m, depth, normals, K, cfg) for i, m in enumerate(masks)]


def refine_masks(masks, depth: DepthMap, normals: NormalMap, K, cfg: RefineConfig = RefineConfig()):
    """Refined masks that pass the keep-ratio test, in input order."""
    return [r.mask for r in refine_report(masks, depth, normals, K, cfg) if r.kept]
