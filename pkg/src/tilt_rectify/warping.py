"""Homography warps of images and normal maps with explicit visibility.

A homography ``h`` maps source pixels to output pixels.  Output pixel ``x``
is filled by sampling the source at ``h^-1 x``; for the rectifier
``h = K R K^-1`` with ``R`` taking tilted directions to rectified ones, so
warped normals are rotated by the same ``R``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import EstimatorShapeMismatch
from .geometry import (
    BEHIND_CAMERA_TOL,
    CameraIntrinsics,
    apply_homography,
    homography_from_rotation,
    rotation_between,
)

_EDGE_TOL = 1e-9


@dataclass
class NormalMap:
    """Per-pixel unit normals ``(H, W, 3)`` with a validity mask ``(H, W)``.

    Invalid pixels hold the zero vector.
    """

    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals.shape[:2] != self.valid.shape or self.normals.shape[-1] != 3:
            raise ValueError(
                f"normals {self.normals.shape} and mask {self.valid.shape} disagree"
            )

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def valid_normals(self) -> np.ndarray:
        return self.normals[self.valid]

    @classmethod
    def constant(cls, n, shape) -> "NormalMap":
        normals = np.broadcast_to(np.asarray(n, dtype=float), tuple(shape) + (3,)).copy()
        return cls(normals, np.ones(shape, dtype=bool))


@dataclass
class WarpResult:
    image: Union[np.ndarray, NormalMap]
    visible: np.ndarray


def _output_lookup(h, shape):
    """Source coordinates and homogeneous depth for every output pixel."""
    height, width = shape
    v, u = np.mgrid[0:height, 0:width]
    pts = np.stack([u, v], axis=-1).astype(float)
    return apply_homography(np.linalg.inv(np.asarray(h, dtype=float)), pts)


def _neighbours(src, c, src_shape, interp):
    """Integer taps, weights and a visibility mask for each lookup.

    Returns ``(rows, cols, weights, visible)`` with tap arrays of shape
    ``(H, W, T)`` where ``T`` is 1 (nearest) or 4 (bilinear).
    """
    height, width = src_shape
    su, sv = src[..., 0], src[..., 1]
    in_front = c > BEHIND_CAMERA_TOL
    if interp == "nearest":
        cu = np.floor(su + 0.5)
        cv = np.floor(sv + 0.5)
        visible = in_front & (cu >= 0) & (cu <= width - 1) & (cv >= 0) & (cv <= height - 1)
        cols = np.clip(cu, 0, width - 1).astype(int)[..., None]
        rows = np.clip(cv, 0, height - 1).astype(int)[..., None]
        return rows, cols, np.ones(cols.shape), visible
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    visible = (
        in_front
        & (su >= -_EDGE_TOL)
        & (su <= width - 1 + _EDGE_TOL)
        & (sv >= -_EDGE_TOL)
        & (sv <= height - 1 + _EDGE_TOL)
    )
    su = np.clip(np.where(visible, su, 0.0), 0, width - 1)
    sv = np.clip(np.where(visible, sv, 0.0), 0, height - 1)
    u0 = np.clip(np.floor(su), 0, max(width - 2, 0)).astype(int)
    v0 = np.clip(np.floor(sv), 0, max(height - 2, 0)).astype(int)
    fu = su - u0
    fv = sv - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    rows = np.stack([v0, v0, v1, v1], axis=-1)
    cols = np.stack([u0, u1, u0, u1], axis=-1)
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1
    )
    return rows, cols, weights, visible


def warp_image(src, h, interp: str = "bilinear", out_shape=None) -> WarpResult:
    """Resample image ``src`` (``(H, W)`` or ``(H, W, C)``) through homography ``h``.

    Pixels whose lookup lands outside the source or behind the camera are 0
    and marked invisible.
    """
    src = np.asarray(src)
    shape = tuple(out_shape) if out_shape is not None else src.shape[:2]
    lookup, c = _output_lookup(h, shape)
    rows, cols, weights, visible = _neighbours(lookup, c, src.shape[:2], interp)
    taps = src[rows, cols].astype(float)
    if src.ndim == 3:
        out = np.sum(taps * weights[..., None], axis=-2)
        out[~visible] = 0.0
    else:
        out = np.sum(taps * weights, axis=-1)
        out[~visible] = 0.0
    if interp == "nearest":
        out = out.astype(src.dtype)
    return WarpResult(out, visible)


def warp_normal_map(
    src: NormalMap,
    R,
    K: CameraIntrinsics,
    interp: str = "bilinear",
    max_blend_deg: float = 10.0,
) -> WarpResult:
    """Warp a normal map by the rotation homography ``K R K^-1`` and rotate its vectors by ``R``.

    Bilinear taps that disagree by more than ``max_blend_deg`` with the
    dominant tap (creases, occlusion boundaries) fall back to that tap instead
    of producing a blend belonging to neither surface.
    """
    R = np.asarray(R, dtype=float)
    h = homography_from_rotation(K, R)
    lookup, c = _output_lookup(h, src.shape)
    rows, cols, weights, visible = _neighbours(lookup, c, src.shape, interp)
    taps = src.normals[rows, cols]
    used = weights > 1e-12
    tap_valid = src.valid[rows, cols] | ~used
    valid = visible & np.all(tap_valid, axis=-1)

    dominant = np.argmax(weights, axis=-1)
    nearest = np.take_along_axis(taps, dominant[..., None, None], axis=-2)[..., 0, :]
    if interp == "bilinear":
        blended = np.sum(taps * weights[..., None], axis=-2)
        agree = np.einsum("...tk,...k->...t", taps, nearest)
        crease = np.any(used & (agree < np.cos(np.radians(max_blend_deg))), axis=-1)
        sampled = np.where(crease[..., None], nearest, blended)
    else:
        sampled = nearest

    rotated = sampled @ R.T
    norm = np.linalg.norm(rotated, axis=-1)
    valid &= norm > 1e-12
    out = np.zeros_like(rotated)
    out[valid] = rotated[valid] / norm[valid][:, None]
    return WarpResult(NormalMap(out, valid), visible)


def invisible_count(w: WarpResult) -> int:
    """Number of output pixels with no source sample."""
    return int(np.count_nonzero(~np.asarray(w.visible)))


def rectify_estimate_unrectify(
    img,
    g,
    e,
    K: CameraIntrinsics,
    estimator: Callable[[np.ndarray], NormalMap],
    interp: str = "bilinear",
) -> NormalMap:
    """Rectify ``img`` from gravity ``g`` to principle direction ``e``, run
    ``estimator`` on the rectified view and bring its normals back to the
    tilted frame.  Pixels unseen in the rectified view come back invalid."""
    R = rotation_between(g, e)
    rect = warp_image(img, homography_from_rotation(K, R), interp=interp)
    pred = estimator(rect.image)
    if pred.shape != rect.image.shape[:2]:
        raise EstimatorShapeMismatch(
            f"estimator returned {pred.shape}, expected {rect.image.shape[:2]}"
        )
    pred = NormalMap(pred.normals, pred.valid & rect.visible)
    return warp_normal_map(pred, R.T, K, interp=interp).image
