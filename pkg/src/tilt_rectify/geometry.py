"""Unit vectors, slant/tilt angles, shortest-arc rotations and homographies.

Camera frame: x right, y down, z forward.  Gravity of an upright camera is
``+y``; rotating gravity onto ``e = (0, 1, 0)`` gives a gravity-aligned view.
All functions broadcast over leading axes where that is cheap to support.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import AntipodalInput, BehindCamera, ValidationError

ANTIPODAL_TOL = 1e-9
BEHIND_CAMERA_TOL = 1e-9
UP = np.array([0.0, 1.0, 0.0])


def unit(v) -> np.ndarray:
    """Normalize along the last axis; zero vectors are rejected."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / norm


def normal_from_slant_tilt(theta, phi) -> np.ndarray:
    """Unit normal ``(cos t cos p, cos t sin p, sin t)`` for slant t, tilt p."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    c = np.cos(theta)
    return np.stack([c * np.cos(phi), c * np.sin(phi), np.sin(theta)], axis=-1)


def slant_tilt_from_normal(n, eps: float = 1e-12):
    """Slant angle and tilt direction of unit normal(s).

    Returns ``(theta, z)`` where ``z`` is the unit in-plane direction of the
    normal, or exactly ``(0, 0)`` when ``n_x**2 + n_y**2 < eps``.  At the pole
    ``theta = pi/2`` for ``n_z >= 0`` and ``-pi/2`` for the opposite pole.
    """
    n = np.asarray(n, dtype=float)
    xi = n[..., 0] ** 2 + n[..., 1] ** 2
    pole = xi < eps
    root = np.sqrt(np.where(pole, 1.0, xi))
    z = np.where(pole[..., None], 0.0, n[..., :2] / root[..., None])
    pole_theta = np.where(n[..., 2] < 0, -np.pi / 2, np.pi / 2)
    theta = np.where(pole, pole_theta, np.arctan2(n[..., 2], np.sqrt(xi)))
    return theta, z


def tilt_from_direction(z) -> np.ndarray:
    """Tilt angle in (-pi, pi] of a tilt direction; the zero direction maps to 0."""
    z = np.asarray(z, dtype=float)
    phi = np.arctan2(z[..., 1], z[..., 0])
    return np.where(phi == -np.pi, np.pi, phi)


def rotation_between(g, e) -> np.ndarray:
    """Shortest-arc rotation taking unit ``g`` onto unit ``e``.

    ``R = I + 2 e g^T - (e + g)(e + g)^T / (1 + e^T g)``.  Broadcasts over
    leading axes and raises :class:`AntipodalInput` when ``e^T g <= -1 + 1e-9``.
    """
    g = np.asarray(g, dtype=float)
    e = np.asarray(e, dtype=float)
    a = 1.0 + np.sum(e * g, axis=-1)
    if np.any(a <= ANTIPODAL_TOL):
        raise AntipodalInput("g and e are antipodal; the shortest arc is undefined")
    s = e + g
    eye = np.broadcast_to(np.eye(3), s.shape[:-1] + (3, 3))
    return (
        eye
        + 2.0 * e[..., :, None] * g[..., None, :]
        - s[..., :, None] * s[..., None, :] / a[..., None, None]
    )


def rotate_normal(R, n) -> np.ndarray:
    """``R @ n`` re-normalized to absorb rounding."""
    return unit(np.einsum("...ij,...j->...i", np.asarray(R, dtype=float), n))


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def corners(self) -> np.ndarray:
        """Image outline corners A, B, C, D (top-left, top-right, bottom-right,
        bottom-left) in pixel coordinates; pixel centres sit on integers."""
        w, h = self.width - 0.5, self.height - 0.5
        return np.array([[-0.5, -0.5], [w, -0.5], [w, h], [-0.5, h]])

    def to_dict(self) -> dict:
        return asdict(self)


def homography_from_rotation(K: CameraIntrinsics, R) -> np.ndarray:
    """Pixel map ``K R K^-1`` induced by a pure camera rotation."""
    return K.matrix @ np.asarray(R, dtype=float) @ K.inverse


def apply_homography(h, pts):
    """Map pixel points ``(..., 2)`` through ``h``.

    Returns ``(mapped, depth)`` where ``depth`` is the third homogeneous
    coordinate before division; callers decide how to treat ``depth <= 0``.
    """
    pts = np.asarray(pts, dtype=float)
    h = np.asarray(h, dtype=float)
    q = pts @ h[:, :2].T + h[:, 2]
    c = q[..., 2]
    safe = np.where(np.abs(c) > 0, c, 1.0)
    return q[..., :2] / safe[..., None], c


def project_pixel(K: CameraIntrinsics, R, p) -> np.ndarray:
    """Pinhole projection of homogeneous pixel ``p`` under the rotation warp.

    Evaluates ``Pi(K R K^-1 p)``, so the identity rotation fixes every pixel.
    """
    q = homography_from_rotation(K, R) @ np.asarray(p, dtype=float)
    if q[2] <= BEHIND_CAMERA_TOL:
        raise BehindCamera(f"pixel {tuple(p)} rotates behind the image plane (depth {q[2]:.3g})")
    return q[:2] / q[2]


def quad_area(corners) -> np.ndarray:
    """Signed shoelace area of quadrilateral(s) ``(..., 4, 2)`` in A, B, C, D order."""
    c = np.asarray(corners, dtype=float)
    x, y = c[..., 0], c[..., 1]
    xn, yn = np.roll(x, -1, axis=-1), np.roll(y, -1, axis=-1)
    return 0.5 * np.sum(x * yn - xn * y, axis=-1)


def quad_area_grad(corners) -> np.ndarray:
    """Partial derivatives of :func:`quad_area` w.r.t. each corner's (x, y)."""
    c = np.asarray(corners, dtype=float)
    x, y = c[..., 0], c[..., 1]
    dx = 0.5 * (np.roll(y, -1, axis=-1) - np.roll(y, 1, axis=-1))
    dy = 0.5 * (np.roll(x, 1, axis=-1) - np.roll(x, -1, axis=-1))
    return np.stack([dx, dy], axis=-1)
