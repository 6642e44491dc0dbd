"""Angular-error statistics and the slant/tilt error decomposition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput

THRESHOLDS_DEG = (5.0, 7.5, 11.25, 22.5, 30.0)
TRIANGLE_SLACK = 1e-9


def angular_error(pred, gt):
    """Angle between unit vectors, radians in [0, pi]."""
    c = np.sum(np.asarray(pred, dtype=float) * np.asarray(gt, dtype=float), axis=-1)
    return np.arccos(np.clip(c, -1.0, 1.0))


@dataclass(frozen=True)
class EvalSummary:
    """Error statistics in degrees; ``below[i]`` pairs with ``THRESHOLDS_DEG[i]``."""

    mean: float
    median: float
    rmse: float
    below: tuple
    count: int

    def fraction_below(self, threshold_deg: float) -> float:
        return self.below[THRESHOLDS_DEG.index(threshold_deg)]

    def to_dict(self) -> dict:
        out = {"mean": self.mean, "median": self.median, "rmse": self.rmse, "count": self.count}
        for t, f in zip(THRESHOLDS_DEG, self.below):
            out["p" + f"{t:g}".replace(".", "_")] = f
        return out


def summarize(errors) -> EvalSummary:
    """Summary of angular errors given in radians.

    The median of an even-length batch is the lower central order statistic.
    """
    rad = np.asarray(errors, dtype=float).reshape(-1)
    if rad.size == 0:
        raise EmptyInput("no errors to summarize")
    deg = np.degrees(rad)
    ordered = np.sort(deg)
    median = ordered[(deg.size - 1) // 2]
    # compare in radians so integer-degree inputs do not straddle a threshold after conversion
    below = tuple(float(np.count_nonzero(rad < np.radians(t))) / rad.size for t in THRESHOLDS_DEG)
    return EvalSummary(
        mean=float(np.mean(deg)),
        median=float(median),
        rmse=float(np.sqrt(np.mean(deg**2))),
        below=below,
        count=int(deg.size),
    )


@dataclass(frozen=True)
class ErrorDecomposition:
    delta: float
    d_theta: float
    d_phi: float
    degenerate: bool


def slant_tilt_decompose_arrays(pred, gt, eps: float = 1e-9):
    """Vectorized decomposition; returns ``(delta, d_theta, d_phi, degenerate)`` arrays."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    delta = angular_error(pred, gt)
    rp = np.linalg.norm(pred[..., :2], axis=-1)
    rg = np.linalg.norm(gt[..., :2], axis=-1)
    degenerate = (rp < eps) | (rg < eps)
    denom = np.where(degenerate, 1.0, rp * rg)
    cos_phi = np.sum(pred[..., :2] * gt[..., :2], axis=-1) / denom
    d_phi = np.where(degenerate, 0.0, np.arccos(np.clip(cos_phi, -1.0, 1.0)))
    d_theta = np.abs(np.arccos(np.clip(rp, 0.0, 1.0)) - np.arccos(np.clip(rg, 0.0, 1.0)))
    d_theta = np.where(degenerate, delta, d_theta)
    return delta, d_theta, d_phi, degenerate


def slant_tilt_decompose(pred, gt, eps: float = 1e-9) -> ErrorDecomposition:
    """Split the angular error between two normals into slant and tilt parts.

    Pole case (either normal along the z axis): tilt error 0, slant error
    equals the full angle.
    """
    delta, d_theta, d_phi, degenerate = slant_tilt_decompose_arrays(pred, gt, eps)
    return ErrorDecomposition(float(delta), float(d_theta), float(d_phi), bool(degenerate))


def triangle_check(pred, gt, eps: float = 1e-9) -> bool:
    """``d_theta + d_phi >= delta`` up to a 1e-9 slack."""
    d = slant_tilt_decompose(pred, gt, eps)
    return d.d_theta + d.d_phi >= d.delta - TRIANGLE_SLACK
