import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tilt_rectify.estimator import PrincipleDirectionEstimator
from tilt_rectify.geometry import UP
from tilt_rectify.synthesis import SceneSpec, render_view, sample_normals, synthesize_tilted, tilt_rotation


@pytest.fixture(scope="module")
def data():
    spec = SceneSpec()
    upright = sample_normals(render_view(spec).normals, 20_000, 0)
    s = synthesize_tilted(spec, tilt_rotation(math.radians(30), 0.0))
    return spec, upright, s


def test_params_and_clone():
    est = PrincipleDirectionEstimator(k=3, lambda_e=0.2)
    params = est.get_params()
    assert params["k"] == 3 and params["lambda_e"] == 0.2
    assert clone(est).get_params() == params


def test_unfitted_and_bad_input(data):
    spec, upright, s = data
    est = PrincipleDirectionEstimator(intrinsics=spec.K)
    with pytest.raises(NotFittedError):
        est.predict(upright, UP)
    with pytest.raises(ValueError):
        est.fit(np.ones((5, 2)))
    est.fit(upright)
    with pytest.raises(ValueError):
        PrincipleDirectionEstimator().fit(upright).predict(upright, UP)


def test_fit_predict_recovers_upright(data):
    spec, upright, s = data
    est = PrincipleDirectionEstimator(intrinsics=spec.K, sample_size=1500).fit(upright)
    assert est.histogram_.top_bins(5)
    e = est.predict(s.normals.valid_normals(), s.g)
    assert math.degrees(math.acos(min(1.0, e @ UP))) < 1.0
    assert est.result_.converged
    assert est.score(s.normals.valid_normals(), s.g) > -0.5
