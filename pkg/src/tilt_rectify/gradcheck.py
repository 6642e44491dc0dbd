"""Finite-difference audits of every closed-form gradient in the package.

Each suite draws random instances, compares the analytic gradient with
central differences and reports the worst relative error.  Functions under
test are looked up through their modules at call time so a patched build is
audited as-is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import direction_stats, losses, rectifier
from .direction_stats import Binning, GaussianMixture, histogram_from_normals
from .errors import BehindCamera
from .geometry import CameraIntrinsics, rotation_between, unit

TOLERANCES = {
    "l2": 1e-5,
    "al": 1e-5,
    "tal": 1e-5,
    "rotated_normal": 1e-5,
    "gmm_density": 1e-6,
    "objective": 1e-4,
}
SINGULAR_MARGIN = 1e-4


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_rel_err: float
    tol: float
    count: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.count > 0 and self.max_rel_err < self.tol

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_err": self.max_rel_err,
            "tol": self.tol,
            "count": self.count,
            "skipped": self.skipped,
            "passed": self.passed,
        }


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def tangent_basis(p):
    """Two orthonormal vectors spanning the tangent plane at unit ``p``."""
    helper = np.eye(3)[np.argmin(np.abs(p))]
    t1 = unit(np.cross(p, helper))
    return t1, np.cross(p, t1)


def tangent_fd(f, p, h: float = 1e-6):
    """Central differences of ``f`` along great circles through ``p``.

    Returns the components along ``tangent_basis(p)``.
    """
    out = []
    for t in tangent_basis(p):
        out.append((f(unit(p + h * t)) - f(unit(p - h * t))) / (2 * h))
    return np.array(out)


def _random_unit(rng, n=None):
    return unit(rng.normal(size=(3,) if n is None else (n, 3)))


def _loss_pair(rng):
    """Random pair, half of them drawn close together to cover small angles."""
    gt = _random_unit(rng)
    if rng.random() < 0.5:
        return _random_unit(rng), gt
    return unit(gt + rng.uniform(0.01, 0.5) * _random_unit(rng)), gt


def check_loss(name: str, trials: int = 1000, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    value = {"l2": lambda p, g: losses.l2_loss(p, g), "al": lambda p, g: losses.angular_loss(p, g),
             "tal": lambda p, g: losses.truncated_angular_loss(p, g)}[name]
    grad = {"l2": lambda p, g: losses.l2_grad(p, g), "al": lambda p, g: losses.al_grad(p, g),
            "tal": lambda p, g: losses.tal_grad(p, g)}[name]
    eps = losses.TalConfig().eps
    rng = np.random.default_rng(seed)
    worst, done, skipped = 0.0, 0, 0
    while done < trials:
        p, g = _loss_pair(rng)
        c = float(p @ g)
        near_kink = {
            "l2": False,
            "al": abs(c) > 1 - SINGULAR_MARGIN,
            "tal": abs(c) < SINGULAR_MARGIN or abs(c - (1 - eps)) < SINGULAR_MARGIN,
        }[name]
        if near_kink:
            skipped += 1
            continue
        analytic = np.array([grad(p, g) @ t for t in tangent_basis(p)])
        fd = tangent_fd(lambda q: float(value(q, g)), p, h)
        worst = max(worst, rel_err(analytic, fd))
        done += 1
    return SuiteResult(name, worst, TOLERANCES[name], done, skipped)


def check_rotated_normal(trials: int = 1000, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    """Full ambient Jacobian of ``R(g, e) n`` in ``e``."""
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < trials:
        g, e, n = _random_unit(rng), _random_unit(rng), _random_unit(rng)
        if 1 + e @ g < 0.05:
            continue
        G = rectifier.grad_rotated_normal(e, g, n)
        fd = np.empty((3, 3))
        for j in range(3):
            d = h * np.eye(3)[j]
            fd[j] = (rotation_between(g, e + d) @ n - rotation_between(g, e - d) @ n) / (2 * h)
        worst = max(worst, rel_err(G, fd))
        done += 1
    return SuiteResult("rotated_normal", worst, TOLERANCES["rotated_normal"], done)


def _random_mixture(rng, k=None):
    k = int(rng.integers(1, 6)) if k is None else k
    return GaussianMixture(rng.uniform(0.1, 1.0, k), _random_unit(rng, k), rng.uniform(0.02, 0.5, k))


def check_gmm_density(trials: int = 1000, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        P = _random_mixture(rng)
        x = _random_unit(rng) * rng.uniform(0.8, 1.2)
        analytic = direction_stats.gmm_density_grad(P, x)
        fd = np.array(
            [
                (direction_stats.gmm_density(P, x + h * t) - direction_stats.gmm_density(P, x - h * t)) / (2 * h)
                for t in np.eye(3)
            ]
        )
        worst = max(worst, rel_err(analytic, fd, floor=1e-300))
    return SuiteResult("gmm_density", worst, TOLERANCES["gmm_density"], trials)


AUDIT_K = CameraIntrinsics(fx=240.0, fy=240.0, cx=160.0, cy=120.0, width=320, height=240)


def check_objective(
    trials: int = 1000, seed: int = 0, h: float = 1e-6, problems: int = 10, sample_size: int = 200
) -> SuiteResult:
    """Tangent-space check of the full objective (divergence plus visibility).

    ``trials`` directions are spread over ``problems`` random problem instances.
    """
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    per = -(-trials // problems) if trials else 0
    binning = Binning(13, 24)
    while done < trials:
        g = _random_unit(rng)
        normals = _random_unit(rng, sample_size)
        Q = histogram_from_normals(_random_unit(rng, 500), binning, floor=1e-3)
        P = _random_mixture(rng, k=3)
        prob = rectifier.RectifierProblem(g, P, normals, Q, AUDIT_K, lambda_e=float(rng.uniform(0.05, 1.0)))
        for _ in range(min(per, trials - done)):
            # stay well inside the range where every image corner is in front of the camera
            e = unit(g + rng.uniform(0.0, 0.4) * _random_unit(rng))
            try:
                grad = prob.grad(e)
                fd = tangent_fd(prob.value, e, h)
            except BehindCamera:
                continue
            analytic = np.array([grad @ t for t in tangent_basis(e)])
            worst = max(worst, rel_err(analytic, fd))
            done += 1
    return SuiteResult("objective", worst, TOLERANCES["objective"], done)


def run_all(trials: int = 1000, seed: int = 0) -> list[SuiteResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return [
        check_loss("l2", trials, seed),
        check_loss("al", trials, seed + 1),
        check_loss("tal", trials, seed + 2),
        check_rotated_normal(trials, seed + 3),
        check_gmm_density(trials, seed + 4),
        check_objective(trials, seed + 5),
    ]
