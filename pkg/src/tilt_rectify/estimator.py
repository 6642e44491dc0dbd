"""scikit-learn style front end for the principle-direction solver.

``fit`` learns the training normal distribution from upright normals;
``predict`` returns the principle direction for one tilted image given its
normals and gravity.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .direction_stats import Binning, fit_gmm, histogram_from_normals
from .geometry import CameraIntrinsics, unit
from .rectifier import DEFAULT_BANDWIDTH, RectifierConfig, optimize_e, rectified_kl


class PrincipleDirectionEstimator(BaseEstimator):
    def __init__(
        self,
        intrinsics: CameraIntrinsics | None = None,
        n_theta: int = 19,
        n_phi: int = 36,
        floor: float = 1e-8,
        k: int = 4,
        lambda_e: float = 0.1,
        step: float = 0.02,
        iters: int = 500,
        tol: float = 1e-4,
        bandwidth: float = DEFAULT_BANDWIDTH,
        sample_size: int = 3000,
        seed: int = 0,
    ):
        self.intrinsics = intrinsics
        self.n_theta = n_theta
        self.n_phi = n_phi
        self.floor = floor
        self.k = k
        self.lambda_e = lambda_e
        self.step = step
        self.iters = iters
        self.tol = tol
        self.bandwidth = bandwidth
        self.sample_size = sample_size
        self.seed = seed

    def _config(self) -> RectifierConfig:
        return RectifierConfig(
            lambda_e=self.lambda_e,
            step=self.step,
            iters=self.iters,
            tol=self.tol,
            seed=self.seed,
            bandwidth=self.bandwidth,
        )

    def _normals(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != 3:
            raise ValueError(f"expected (n_samples, 3) normals, got {X.shape}")
        return unit(X)

    def fit(self, X, y=None):
        """Build the training histogram ``Q`` from upright normals ``(N, 3)``."""
        self.histogram_ = histogram_from_normals(self._normals(X), Binning(self.n_theta, self.n_phi), self.floor)
        return self

    def predict(self, X, gravity, intrinsics: CameraIntrinsics | None = None) -> np.ndarray:
        """Principle direction for an image with normals ``X`` and gravity ``gravity``."""
        check_is_fitted(self, "histogram_")
        K = intrinsics or self.intrinsics
        if K is None:
            raise ValueError("camera intrinsics are required")
        normals = self._normals(X)
        if len(normals) > self.sample_size:
            rng = np.random.default_rng(self.seed)
            normals = normals[np.sort(rng.choice(len(normals), self.sample_size, replace=False))]
        g = unit(gravity)
        P = fit_gmm(normals, k=self.k, seed=self.seed)
        self.result_ = optimize_e(g, g, P, normals, self.histogram_, K, self._config())
        return self.result_.e_star

    def score(self, X, gravity, intrinsics: CameraIntrinsics | None = None) -> float:
        """Negative histogram divergence of the rectified normals (higher is better)."""
        e = self.predict(X, gravity, intrinsics)
        return -rectified_kl(e, unit(gravity), self._normals(X), self.histogram_)
