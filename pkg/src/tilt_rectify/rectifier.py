"""Optimal principle direction: distribution matching plus visibility.

The objective for a candidate principle direction ``e`` is

    KL(e) + lambda_e * V(e)

``KL(e)`` is a Monte-Carlo estimate of the divergence between the rectified
normal distribution and the training distribution ``Q``.  The image normals
``n_i`` are the integration samples; rotating them by ``R(g, e)`` leaves the
image density term ``log P(n_i)`` unchanged, so every bit of ``e``-dependence
sits in ``log Q~(R n_i)`` where ``Q~`` is ``Q`` smoothed by an isotropic
kernel (a piecewise-constant histogram has no usable gradient).

``V(e)`` is the area surrogate ``max(0, |A(e)| - W H) / (W H)`` with ``A`` the
signed shoelace area of the warped image outline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .direction_stats import (
    GaussianMixture,
    SphericalHistogram,
    histogram_from_normals,
    kl_divergence,
    smooth_histogram,
)
from .errors import AntipodalDrift, AntipodalInput, BehindCamera
from .geometry import (
    ANTIPODAL_TOL,
    BEHIND_CAMERA_TOL,
    CameraIntrinsics,
    quad_area,
    quad_area_grad,
    rotation_between,
    unit,
)

DEFAULT_BANDWIDTH = float(np.radians(15.0))


@dataclass(frozen=True)
class RectifierConfig:
    lambda_e: float = 0.1
    step: float = 0.02
    iters: int = 500
    tol: float = 1e-4
    seed: int = 0
    batch_size: int | None = None
    decay_every: int | None = 100
    bandwidth: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be >= 0")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


@dataclass
class RectifierResult:
    e_star: np.ndarray
    objective_trace: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "e_star": [float(v) for v in self.e_star],
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
        }


def _check_pair(e, g):
    if 1.0 + float(np.dot(e, g)) <= ANTIPODAL_TOL:
        raise AntipodalInput("e is antipodal to g")


def grad_rotated_normal(e, g, n) -> np.ndarray:
    """Gradient of ``R(g, e) n`` with respect to ``e``.

    Row ``j`` holds ``d(R n)/d e_j``, i.e. ``G[..., j, i] = d(R n)_i / d e_j``,
    so ``G @ w`` is the gradient of ``w . (R n)``.  ``n`` may be ``(N, 3)``.
    """
    e = np.asarray(e, dtype=float)
    g = np.asarray(g, dtype=float)
    n = np.asarray(n, dtype=float)
    _check_pair(e, g)
    a = 1.0 + e @ g
    s = e + g
    gn = n @ g
    b = n @ s
    diag = (2.0 * gn - b / a)[..., None, None] * np.eye(3)
    return diag - n[..., :, None] * s / a + (b / a**2)[..., None, None] * np.outer(g, s)


@dataclass
class RectifierProblem:
    """Fixed data of one principle-direction problem."""

    g: np.ndarray
    P: GaussianMixture
    normals: np.ndarray
    Q: SphericalHistogram
    K: CameraIntrinsics
    lambda_e: float = 0.1
    bandwidth: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        self.g = unit(self.g)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.q_smooth = smooth_histogram(self.Q, self.bandwidth)
        self.log_p = float(np.mean(self.P.log_density(self.normals)))
        self._rays = np.c_[self.K.corners(), np.ones(4)] @ self.K.inverse.T

    def kl_term(self, e, normals=None) -> float:
        normals = self.normals if normals is None else normals
        R = rotation_between(self.g, e)
        log_p = self.log_p if normals is self.normals else float(np.mean(self.P.log_density(normals)))
        return log_p - float(np.mean(self.q_smooth.log_density(normals @ R.T)))

    def kl_grad(self, e, normals=None) -> np.ndarray:
        normals = self.normals if normals is None else normals
        R = rotation_between(self.g, e)
        score = self.q_smooth.log_density_grad(normals @ R.T)
        G = grad_rotated_normal(e, self.g, normals)
        return -np.mean(np.einsum("nji,ni->nj", G, score), axis=0)

    def _warped_corners(self, e):
        R = rotation_between(self.g, e)
        q = self._rays @ (self.K.matrix @ R).T
        if np.any(q[:, 2] <= BEHIND_CAMERA_TOL):
            raise BehindCamera("an image corner rotates behind the camera")
        return q, q[:, :2] / q[:, 2:]

    def visibility_term(self, e) -> float:
        _, xy = self._warped_corners(e)
        wh = self.K.width * self.K.height
        return max(0.0, abs(float(quad_area(xy))) - wh) / wh

    def visibility_grad(self, e) -> np.ndarray:
        q, xy = self._warped_corners(e)
        wh = self.K.width * self.K.height
        area = float(quad_area(xy))
        if abs(area) <= wh:
            return np.zeros(3)
        dA = quad_area_grad(xy)
        # d(x, y)/dq for x = q0/q2, y = q1/q2
        inv = 1.0 / q[:, 2]
        dq = np.stack(
            [dA[:, 0] * inv, dA[:, 1] * inv, -(dA[:, 0] * xy[:, 0] + dA[:, 1] * xy[:, 1]) * inv],
            axis=-1,
        )
        G = grad_rotated_normal(e, self.g, self._rays)
        total = np.einsum("nji,ni->j", G, dq @ self.K.matrix)
        return np.sign(area) * total / wh

    def value(self, e, normals=None) -> float:
        e = np.asarray(e, dtype=float)
        out = self.kl_term(e, normals)
        if self.lambda_e:
            out += self.lambda_e * self.visibility_term(e)
        return out

    def grad(self, e, normals=None) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        out = self.kl_grad(e, normals)
        if self.lambda_e:
            out = out + self.lambda_e * self.visibility_grad(e)
        return out


def objective(e, g, P, normals_sample, Q, K, lambda_e=0.1, bandwidth=DEFAULT_BANDWIDTH) -> float:
    """Distribution-matching plus visibility objective at ``e``."""
    _check_pair(unit(e), unit(g))
    return RectifierProblem(g, P, normals_sample, Q, K, lambda_e, bandwidth).value(unit(e))


def objective_grad(e, g, P, normals_sample, Q, K, lambda_e=0.1, bandwidth=DEFAULT_BANDWIDTH) -> np.ndarray:
    """Ambient gradient of :func:`objective` with respect to ``e`` (not projected)."""
    _check_pair(unit(e), unit(g))
    return RectifierProblem(g, P, normals_sample, Q, K, lambda_e, bandwidth).grad(np.asarray(e, dtype=float))


def tangent(e, v) -> np.ndarray:
    """Component of ``v`` orthogonal to unit ``e``."""
    return v - np.dot(e, v) * e


def optimize_e(init, g, P, normals_sample, Q, K, cfg: RectifierConfig = RectifierConfig()) -> RectifierResult:
    """Projected (stochastic) gradient descent for the principle direction.

    Each step is ``e <- normalize(e - step * (I - e e^T) grad)``.  With
    ``cfg.batch_size`` set, gradients use seeded mini-batches; the trace always
    records the full-sample objective of every iterate.
    """
    problem = RectifierProblem(g, P, normals_sample, Q, K, cfg.lambda_e, cfg.bandwidth)
    e = unit(init)
    _check_pair(e, problem.g)
    rng = np.random.default_rng(cfg.seed)
    n = len(problem.normals)
    step = cfg.step
    trace = [problem.value(e)]
    converged = False
    for it in range(cfg.iters):
        if cfg.batch_size is None or cfg.batch_size >= n:
            batch = None
        else:
            batch = problem.normals[rng.choice(n, cfg.batch_size, replace=False)]
        tg = tangent(e, problem.grad(e, batch))
        if np.linalg.norm(tg) < cfg.tol:
            converged = True
            break
        e = unit(e - step * tg)
        if 1.0 + float(np.dot(e, problem.g)) < 1e-6:
            raise AntipodalDrift("iterate drifted to -g", trace)
        trace.append(problem.value(e))
        if cfg.decay_every and (it + 1) % cfg.decay_every == 0:
            step *= 0.5
    return RectifierResult(e, trace, converged)


def rectified_histogram(e, g, normals, binning, floor=1e-8) -> SphericalHistogram:
    """Histogram of the normals after rotating ``g`` onto ``e``."""
    R = rotation_between(unit(g), unit(e))
    return histogram_from_normals(np.asarray(normals).reshape(-1, 3) @ R.T, binning, floor)


def rectified_kl(e, g, normals, Q: SphericalHistogram) -> float:
    """Histogram-vs-histogram divergence of the rectified normals from ``Q``."""
    return kl_divergence(rectified_histogram(e, g, normals, Q.binning, Q.floor), Q)
