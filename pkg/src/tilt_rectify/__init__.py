"""Gravity-aware spatial rectification for surface-normal estimation on tilted images."""
from .errors import *  # noqa: F401,F403
from .geometry import CameraIntrinsics, rotation_between, slant_tilt_from_normal, normal_from_slant_tilt
from .warping import NormalMap, warp_image, warp_normal_map, rectify_estimate_unrectify
from .direction_stats import Binning, SphericalHistogram, histogram_from_normals, kl_divergence, fit_gmm
from .rectifier import RectifierConfig, RectifierResult, objective, objective_grad, optimize_e
from .metrics import EvalSummary, angular_error, summarize, slant_tilt_decompose
from .plane_refine import DepthMap, PlaneMask, RefineConfig, ransac_plane, region_grow, refine_masks
from .synthesis import SceneSpec, TiltedSample, render_upright, random_rotation, synthesize_tilted

__version__ = "0.1.0"
