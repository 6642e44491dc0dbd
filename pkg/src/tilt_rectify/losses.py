"""Pointwise training losses on unit normals and slant/tilt angles.

Gradient convention: every ``*_grad`` returns d(loss)/d(pred) projected onto
the tangent plane of ``pred``.  Descend by subtracting it.
All functions broadcast over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, GradientUndefined, NoValidSamples

SINGULAR_TOL = 1e-9


@dataclass(frozen=True)
class TalConfig:
    eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")


def _cos(pred, gt):
    return np.sum(np.asarray(pred, dtype=float) * np.asarray(gt, dtype=float), axis=-1)


def _tangent_of(pred, gt):
    """``(I - p p^T) gt``."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    return gt - _cos(pred, gt)[..., None] * pred


def l2_loss(pred, gt):
    return 1.0 - _cos(pred, gt)


def l2_grad(pred, gt):
    return -_tangent_of(pred, gt)


def angular_loss(pred, gt):
    return np.arccos(np.clip(_cos(pred, gt), -1.0, 1.0))


def al_grad(pred, gt):
    """Raises :class:`GradientUndefined` where ``|pred . gt| >= 1 - 1e-9``."""
    c = _cos(pred, gt)
    if np.any(np.abs(c) >= 1.0 - SINGULAR_TOL):
        raise GradientUndefined("angular-loss gradient is unbounded at |cos| -> 1")
    return -_tangent_of(pred, gt) / np.sqrt(1.0 - c * c)[..., None]


def truncated_angular_loss(pred, gt, cfg: TalConfig = TalConfig()):
    """Zero when ``c >= 1 - eps``, ``acos(c)`` for ``0 <= c < 1 - eps`` and
    ``pi/2 - c`` below zero, with ``c = pred . gt``."""
    return tal_from_cos(_cos(pred, gt), cfg)


def tal_from_cos(c, cfg: TalConfig = TalConfig()):
    c = np.asarray(c, dtype=float)
    mid = np.arccos(np.clip(c, 0.0, 1.0))
    return np.where(c >= 1.0 - cfg.eps, 0.0, np.where(c >= 0.0, mid, np.pi / 2 - c))


def tal_grad(pred, gt, cfg: TalConfig = TalConfig()):
    c = _cos(pred, gt)
    t = _tangent_of(pred, gt)
    safe = np.sqrt(np.maximum(1.0 - c * c, cfg.eps))
    weight = np.where(c >= 1.0 - cfg.eps, 0.0, np.where(c >= 0.0, 1.0 / safe, 1.0))
    return -weight[..., None] * t


def wrapped_tilt_difference(phi, phi_hat):
    """``min(|phi - phi_hat|, 2 pi - |phi - phi_hat|)`` in [0, pi]."""
    d = np.abs(np.asarray(phi, dtype=float) - np.asarray(phi_hat, dtype=float)) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def slant_tilt_loss(pred_angles, gt_angles):
    """``|theta - theta_hat| + wrapped |phi - phi_hat|`` for ``(theta, phi)`` pairs."""
    pt, pp = pred_angles
    gt_t, gt_p = gt_angles
    return np.abs(np.asarray(pt) - np.asarray(gt_t)) + wrapped_tilt_difference(pp, gt_p)


def satd_loss(pred_theta, pred_z, gt_theta, gt_z, lam: float = 1.0):
    """Slant error plus ``lam`` times the L1 distance of tilt directions."""
    dz = np.sum(np.abs(np.asarray(pred_z, dtype=float) - np.asarray(gt_z, dtype=float)), axis=-1)
    return np.abs(np.asarray(pred_theta) - np.asarray(gt_theta)) + lam * dz


def circular_mean(phi):
    phi = np.asarray(phi, dtype=float)
    return float(np.arctan2(np.mean(np.sin(phi)), np.mean(np.cos(phi))))


def plane_consistency_loss(theta, phi, plane_masks) -> float:
    """Sum over planes of the mean absolute slant/tilt deviation from the plane mean.

    ``theta`` and ``phi`` are per-pixel maps; each mask is a boolean map (or
    anything with a boolean ``mask`` attribute).  Tilt means are circular.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    total = 0.0
    for k, m in enumerate(plane_masks):
        m = np.asarray(getattr(m, "mask", m), dtype=bool)
        if not m.any():
            raise EmptyMask(f"plane mask {k} is empty")
        t, p = theta[m], phi[m]
        dev = np.abs(t - t.mean()) + wrapped_tilt_difference(p, circular_mean(p))
        total += float(dev.mean())
    return total


LOSSES = {
    "l2": l2_loss,
    "al": angular_loss,
    "tal": truncated_angular_loss,
}


def batch_reduce(loss_fn, pred, gt, valid=None) -> float:
    """Mean of ``loss_fn(pred, gt)`` over valid samples, in index order."""
    values = np.asarray(loss_fn(pred, gt), dtype=float).reshape(-1)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if valid.shape != values.shape:
        raise ValueError(f"mask of {valid.size} entries for {values.size} samples")
    if not valid.any():
        raise NoValidSamples("no valid samples to reduce")
    return float(np.sum(values[valid]) / np.count_nonzero(valid))
