"""Distributions of surface-normal directions.

Two representations are used: a (slant, tilt) histogram for the training
distribution and an isotropic Gaussian mixture in R^3 for smooth densities
whose gradients drive the rectifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import BinningMismatch, EmptyInput, TooFewSamples
from .geometry import normal_from_slant_tilt, slant_tilt_from_normal, tilt_from_direction

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class Binning:
    """Equal-angle (slant, tilt) grid with bins centred on the grid angles.

    Slant rows are centred on ``-pi/2 + k * pi / (n_theta - 1)``; the first and
    last rows are polar caps whose whole mass sits in tilt column 0.  Tilt
    columns are centred on ``-pi + j * 2 pi / n_phi``.  Centring keeps the
    axis directions of man-made scenes away from bin edges.
    """

    n_theta: int = 19
    n_phi: int = 36

    def __post_init__(self):
        if self.n_theta < 3 or self.n_phi < 1:
            raise ValueError(f"need n_theta >= 3 and n_phi >= 1, got {self.n_theta}x{self.n_phi}")

    @property
    def d_theta(self) -> float:
        return np.pi / (self.n_theta - 1)

    @property
    def d_phi(self) -> float:
        return 2 * np.pi / self.n_phi

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    def index(self, n) -> tuple[np.ndarray, np.ndarray]:
        """Row and column of the bin holding each unit vector."""
        theta, z = slant_tilt_from_normal(n)
        phi = tilt_from_direction(z)
        row = np.rint((theta + np.pi / 2) / self.d_theta).astype(int)
        row = np.clip(row, 0, self.n_theta - 1)
        col = np.rint((phi + np.pi) / self.d_phi).astype(int) % self.n_phi
        cap = (row == 0) | (row == self.n_theta - 1)
        return row, np.where(cap, 0, col)

    def centers(self) -> np.ndarray:
        """Unit direction at the centre of every bin, shape ``(n_theta, n_phi, 3)``."""
        theta = -np.pi / 2 + np.arange(self.n_theta) * self.d_theta
        phi = -np.pi + np.arange(self.n_phi) * self.d_phi
        return normal_from_slant_tilt(theta[:, None], phi[None, :])

    def solid_angles(self) -> np.ndarray:
        """Solid angle of every bin divided by 4 pi (sums to 1)."""
        lo = np.clip(-np.pi / 2 + (np.arange(self.n_theta) - 0.5) * self.d_theta, -np.pi / 2, np.pi / 2)
        hi = np.clip(-np.pi / 2 + (np.arange(self.n_theta) + 0.5) * self.d_theta, -np.pi / 2, np.pi / 2)
        rows = (np.sin(hi) - np.sin(lo)) / 2
        out = np.repeat(rows[:, None] / self.n_phi, self.n_phi, axis=1)
        for r in (0, self.n_theta - 1):
            out[r] = 0.0
            out[r, 0] = rows[r]
        return out


@dataclass
class SphericalHistogram:
    binning: Binning
    mass: np.ndarray
    floor: float = 1e-8

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float).reshape(self.binning.n_theta, self.binning.n_phi)
        if np.any(self.mass <= 0):
            raise ValueError("histogram masses must be positive")
        if abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError(f"histogram masses sum to {self.mass.sum()}, expected 1")

    def lookup(self, n) -> np.ndarray:
        row, col = self.binning.index(n)
        return self.mass[row, col]

    def top_bins(self, count: int) -> list[tuple[int, int]]:
        order = np.argsort(-self.mass, axis=None, kind="stable")[:count]
        return [tuple(int(i) for i in np.unravel_index(j, self.mass.shape)) for j in order]


def histogram_from_normals(normals, binning: Binning = Binning(), floor: float = 1e-8) -> SphericalHistogram:
    """Bin unit normals ``(N, 3)``; every bin gets ``floor`` extra mass before normalizing."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(normals) == 0:
        raise EmptyInput("cannot build a histogram from zero normals")
    if floor <= 0:
        raise ValueError("floor must be positive")
    row, col = binning.index(normals)
    counts = np.zeros((binning.n_theta, binning.n_phi))
    np.add.at(counts, (row, col), 1.0)
    mass = counts / len(normals) + floor
    return SphericalHistogram(binning, mass / mass.sum(), floor)


def kl_divergence(P: SphericalHistogram, Q: SphericalHistogram) -> float:
    """``sum_b P_b log(P_b / Q_b)`` over a shared binning."""
    if P.binning != Q.binning:
        raise BinningMismatch(f"{P.binning} vs {Q.binning}")
    return float(np.sum(P.mass * (np.log(P.mass) - np.log(Q.mass))))


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture in R^3.

    ``log_likelihood`` holds the mean per-sample log-likelihood at each EM
    iteration when the mixture came from :func:`fit_gmm`.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1)
        k = len(self.weights)
        if self.means.shape[0] != k or self.variances.shape[0] != k or k == 0:
            raise ValueError("weights, means and variances disagree on the mode count")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ValueError(f"variances must be >= {VARIANCE_FLOOR}")
        self.weights = self.weights / self.weights.sum()

    @property
    def k(self) -> int:
        return len(self.weights)

    def _log_terms(self, x):
        x = np.asarray(x, dtype=float)
        d2 = (
            np.sum(x * x, axis=-1)[..., None]
            + np.sum(self.means**2, axis=-1)
            - 2.0 * x @ self.means.T
        )
        d2 = np.maximum(d2, 0.0)
        return (
            np.log(self.weights)
            - 1.5 * np.log(2 * np.pi * self.variances)
            - d2 / (2 * self.variances)
        )

    def log_density(self, x) -> np.ndarray:
        return logsumexp(self._log_terms(x), axis=-1)

    def log_density_grad(self, x) -> np.ndarray:
        """Gradient of ``log p`` at ``x``; stable far from every mode."""
        x = np.asarray(x, dtype=float)
        terms = self._log_terms(x)
        resp = np.exp(terms - logsumexp(terms, axis=-1, keepdims=True))
        pull = (self.means - x[..., None, :]) / self.variances[:, None]
        return np.einsum("...j,...jk->...k", resp, pull)


def gmm_density(P: GaussianMixture, x) -> np.ndarray:
    """``sum_j w_j (2 pi s_j^2)^(-3/2) exp(-|x - mu_j|^2 / (2 s_j^2))``."""
    return np.exp(P.log_density(x))


def gmm_density_grad(P: GaussianMixture, x) -> np.ndarray:
    """Gradient of :func:`gmm_density` with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    terms = np.exp(P._log_terms(x))
    pull = (P.means - x[..., None, :]) / P.variances[:, None]
    return np.einsum("...j,...jk->...k", terms, pull)


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break  # every remaining point coincides with a chosen centre
        nxt = x[rng.choice(len(x), p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - nxt) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp):
    nk = resp.sum(axis=0)
    keep = nk > 1e-10 * len(x)
    resp, nk = resp[:, keep], nk[keep]
    means = resp.T @ x / nk[:, None]
    d2 = np.sum((x[:, None, :] - means[None]) ** 2, axis=-1)
    variances = np.maximum(np.sum(resp * d2, axis=0) / (3 * nk), VARIANCE_FLOOR)
    return nk / len(x), means, variances


def fit_gmm(normals, k: int = 4, seed: int = 0, max_iter: int = 50, tol: float = 1e-8) -> GaussianMixture:
    """Fit an isotropic mixture by EM from a k-means++ start.

    Coincident data collapse to fewer than ``k`` modes.  Deterministic for a
    given ``seed``.
    """
    x = np.asarray(normals, dtype=float).reshape(-1, 3)
    if k < 1 or len(x) < k:
        raise TooFewSamples(f"need at least k={k} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=-1)
    resp = np.zeros_like(d2)
    resp[np.arange(len(x)), np.argmin(d2, axis=1)] = 1.0
    weights, means, variances = _m_step(x, resp)

    trace = []
    for _ in range(max_iter):
        mix = GaussianMixture(weights, means, variances)
        terms = mix._log_terms(x)
        norm = logsumexp(terms, axis=1, keepdims=True)
        ll = float(norm.mean())
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
        weights, means, variances = _m_step(x, np.exp(terms - norm))
    return GaussianMixture(weights, means, variances, log_likelihood=tuple(trace))


def smooth_histogram(Q: SphericalHistogram, bandwidth: float) -> GaussianMixture:
    """Kernel-smoothed copy of ``Q``: one isotropic mode per bin centre.

    ``bandwidth`` is the kernel standard deviation (radians, chord units).
    """
    centers = Q.binning.centers().reshape(-1, 3)
    var = max(bandwidth**2, VARIANCE_FLOOR)
    return GaussianMixture(Q.mass.reshape(-1), centers, np.full(len(centers), var))
