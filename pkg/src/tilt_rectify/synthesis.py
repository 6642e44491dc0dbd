"""Synthetic box-room scenes with exact normals and depth, and tilted samples.

Room frame: x right, y down, z forward (the upright camera frame at zero
yaw); the floor is the ``y = height`` face.  Normals point into the room,
i.e. toward the camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .direction_stats import fit_gmm, histogram_from_normals, Binning
from .geometry import UP, CameraIntrinsics, homography_from_rotation, rot_x, rot_y, rot_z
from .plane_refine import DepthMap
from .rectifier import RectifierConfig, optimize_e
from .warping import NormalMap, warp_image, warp_normal_map

DEFAULT_K = CameraIntrinsics(fx=160.0, fy=160.0, cx=160.0, cy=120.0, width=320, height=240)

# Face ids: 2 * axis + (1 if the far face along that axis else 0).
FACE_NAMES = ("left", "right", "ceiling", "floor", "front", "back")
_FACE_COLOURS = np.array(
    [
        [0.80, 0.35, 0.30],
        [0.30, 0.70, 0.35],
        [0.90, 0.90, 0.85],
        [0.45, 0.35, 0.25],
        [0.40, 0.40, 0.75],
        [0.70, 0.65, 0.40],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    """Box room and upright camera.

    ``camera_position`` is ``(x from the left wall, height above the floor,
    z from the front wall)`` in metres; ``yaw`` turns the camera about the
    vertical axis.  ``texture`` selects the checker size
    (``0.25 * (texture + 1)`` m).
    """

    room_size: tuple = (4.0, 3.0, 8.0)
    camera_position: tuple = (2.0, 1.5, 1.0)
    yaw: float = 0.0
    texture: int = 1
    K: CameraIntrinsics = field(default=DEFAULT_K)

    def __post_init__(self):
        lo = np.zeros(3)
        hi = np.asarray(self.room_size, dtype=float)
        p = np.asarray(self.camera_position, dtype=float)
        if np.any(hi <= 0) or np.any(p <= lo) or np.any(p >= hi):
            raise ValueError(f"camera {self.camera_position} is not inside room {self.room_size}")

    @property
    def origin(self) -> np.ndarray:
        x, height, z = self.camera_position
        return np.array([x, self.room_size[1] - height, z], dtype=float)

    def to_dict(self) -> dict:
        return {
            "room_size": [float(v) for v in self.room_size],
            "camera_position": [float(v) for v in self.camera_position],
            "yaw": float(self.yaw),
            "texture": int(self.texture),
            "K": self.K.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "K" in d:
            d["K"] = CameraIntrinsics(**d["K"])
        for key in ("room_size", "camera_position"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class SceneRender:
    image: np.ndarray
    normals: NormalMap
    depth: DepthMap
    face: np.ndarray


def render_view(spec: SceneSpec, rotation=None) -> SceneRender:
    """Raycast the room from a camera rotated by ``rotation``.

    ``rotation`` maps upright-camera directions to the rendered camera's frame
    (``d_cam = R d_up``); ``None`` renders the upright view.
    """
    K = spec.K
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    to_world = rot_y(spec.yaw) @ R.T
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(u.shape)], axis=-1)
    d = rays @ to_world.T
    o = spec.origin
    hi = np.asarray(spec.room_size, dtype=float)

    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, hi, 0.0)
        t_axes = np.where(d != 0, (bound - o) / d, np.inf)
    axis = np.argmin(t_axes, axis=-1)
    t = np.take_along_axis(t_axes, axis[..., None], axis=-1)[..., 0]
    far = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] > 0
    face = 2 * axis + far.astype(int)

    n_world = np.zeros(d.shape)
    np.put_along_axis(n_world, axis[..., None], np.where(far, -1.0, 1.0)[..., None], axis=-1)
    n_cam = n_world @ to_world  # to_world is orthonormal: world -> camera is its transpose

    hit = o + t[..., None] * d
    cell = 0.25 * (spec.texture + 1)
    coords = np.floor(hit / cell).astype(int)
    keep = np.ones(coords.shape, dtype=bool)
    np.put_along_axis(keep, axis[..., None], False, axis=-1)
    parity = np.sum(np.where(keep, coords, 0), axis=-1) % 2
    shade = 0.75 + 0.25 * parity
    image = _FACE_COLOURS[face] * shade[..., None]

    valid = np.ones(t.shape, dtype=bool)
    return SceneRender(image, NormalMap(n_cam, valid), DepthMap(t), face)


def render_upright(spec: SceneSpec):
    """``(image, normals, depth)`` of the upright view."""
    r = render_view(spec)
    return r.image, r.normals, r.depth


def tilt_rotation(roll: float, pitch: float) -> np.ndarray:
    """``R_roll(about z) @ R_pitch(about x)``."""
    return rot_z(roll) @ rot_x(pitch)


def sample_tilt(roll_range: float = np.pi / 4, pitch_range: float = np.pi / 4, seed: int = 0):
    """Uniform roll and pitch in ``[-range, range]``, radians."""
    for r in (roll_range, pitch_range):
        if not 0 <= r < np.pi / 2:
            raise ValueError("tilt ranges must lie in [0, pi/2)")
    rng = np.random.default_rng(seed)
    roll = float(rng.uniform(-roll_range, roll_range)) if roll_range else 0.0
    pitch = float(rng.uniform(-pitch_range, pitch_range)) if pitch_range else 0.0
    return roll, pitch


def random_rotation(roll_range: float = np.pi / 4, pitch_range: float = np.pi / 4, seed: int = 0) -> np.ndarray:
    return tilt_rotation(*sample_tilt(roll_range, pitch_range, seed))


@dataclass
class TiltedSample:
    image: np.ndarray
    normals: NormalMap
    g: np.ndarray
    e_gt: np.ndarray
    R_rand: np.ndarray
    visible: np.ndarray
    e_source: str = "analytic"


def sample_normals(normals: NormalMap, count: int, seed: int = 0) -> np.ndarray:
    """Up to ``count`` valid normals drawn without replacement (seeded)."""
    pool = normals.valid_normals()
    if len(pool) <= count:
        return pool.copy()
    rng = np.random.default_rng(seed)
    return pool[np.sort(rng.choice(len(pool), count, replace=False))]


def upright_histogram(spec: SceneSpec, binning: Binning = Binning(), floor: float = 1e-8):
    return histogram_from_normals(render_view(spec).normals.valid_normals(), binning, floor)


def synthesize_tilted(
    spec: SceneSpec,
    R_rand,
    e_mode: str = "analytic",
    Q=None,
    cfg: RectifierConfig = RectifierConfig(),
    k: int = 4,
    sample_count: int = 3000,
    interp: str = "bilinear",
) -> TiltedSample:
    """Warp the upright render into a view tilted by ``R_rand``.

    Ground-truth normals are the upright ones rotated by ``R_rand``; gravity
    is ``R_rand @ (0, 1, 0)``.  With ``e_mode="analytic"`` the principle
    direction is the gravity-aligned ``(0, 1, 0)``; ``"optimize"`` solves for
    it against ``Q`` (default: the upright scene's histogram).
    """
    R_rand = np.asarray(R_rand, dtype=float)
    upright = render_view(spec)
    K = spec.K
    warped = warp_image(upright.image, homography_from_rotation(K, R_rand), interp=interp)
    normals = warp_normal_map(upright.normals, R_rand, K, interp=interp)
    g = R_rand @ UP
    if e_mode == "analytic":
        e_gt, source = UP.copy(), "analytic"
    elif e_mode == "optimize":
        Q = Q if Q is not None else histogram_from_normals(upright.normals.valid_normals())
        sample = sample_normals(normals.image, sample_count, cfg.seed)
        P = fit_gmm(sample, k=k, seed=cfg.seed)
        e_gt, source = optimize_e(g, g, P, sample, Q, K, cfg).e_star, "optimized"
    else:
        raise ValueError(f"unknown e_mode {e_mode!r}")
    return TiltedSample(warped.image, normals.image, g, e_gt, R_rand, warped.visible, source)
