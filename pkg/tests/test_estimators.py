import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hybridreg.estimators import DeformableRegistration, GlobalRegistration, HybridRegistration
from hybridreg.field import warp_field
from hybridreg.homography import Homography, warp_homography
from hybridreg.matching import MatchSet
from hybridreg.synth import SynthConfig, make_pair

from .oracles import project, random_homography

FAST = dict(iters_per_level=(30, 20, 10))


@pytest.mark.parametrize("cls", [GlobalRegistration, DeformableRegistration, HybridRegistration])
def test_params_and_clone(cls):
    est = cls(random_state=7)
    params = est.get_params()
    assert params["random_state"] == 7
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(random_state=3)
    assert est.random_state == 3


@pytest.mark.parametrize("cls", [GlobalRegistration, DeformableRegistration, HybridRegistration])
def test_not_fitted(cls):
    with pytest.raises(NotFittedError):
        cls().transform(np.zeros((32, 32)))
    with pytest.raises(NotFittedError):
        cls().transform_points(np.zeros((1, 2)))


def test_global_from_explicit_matches():
    rng = np.random.default_rng(3)
    m = random_homography(rng, size=128)
    fixed_pts = rng.uniform(10, 118, (40, 2))
    moving_pts = project(np.linalg.inv(m), fixed_pts)
    img = np.zeros((128, 128))
    est = GlobalRegistration().fit(img, img, matches=(moving_pts, fixed_pts))
    assert est.n_inliers_ == 40
    np.testing.assert_allclose(est.transform_points(fixed_pts), moving_pts, atol=1e-6)
    assert est.transform(img).shape == (128, 128)


def test_global_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        GlobalRegistration().fit(np.zeros((32, 32)), np.zeros((32, 40)))


def test_deformable_recovers_shift(phantom128):
    h = Homography(np.array([[1.0, 0, 2.0], [0, 1, 0], [0, 0, 1]]))
    moving = warp_homography(phantom128, h, phantom128.shape)
    with pytest.warns(RuntimeWarning, match="without matches"):
        est = DeformableRegistration(**FAST).fit(moving, phantom128)
    out = est.transform(moving)
    assert np.abs(out - phantom128)[16:-16, 16:-16].mean() < np.abs(moving - phantom128)[16:-16, 16:-16].mean()
    np.testing.assert_array_equal(out, warp_field(moving, est.field_))


def test_hybrid_on_synthetic_pair(phantom128):
    pair = make_pair(phantom128, 5, SynthConfig(elastic_intensity=20))
    est = HybridRegistration(**FAST).fit(pair.moving, pair.fixed)
    assert est.stage_ == "ok"
    pred = est.transform_points(pair.control_fixed)
    err = np.sqrt(np.mean(np.sum((pred - pair.control_moving) ** 2, axis=1)))
    glob = est.homography_.inverse().apply(pair.control_fixed)
    err_g = np.sqrt(np.mean(np.sum((glob - pair.control_moving) ** 2, axis=1)))
    assert err < err_g
    assert est.fit_transform(pair.moving, pair.fixed).shape == pair.fixed.shape


def test_hybrid_accepts_matchset(phantom128):
    pair = make_pair(phantom128, 6)
    ms = MatchSet(pair.control_moving, pair.control_fixed, source="file")
    est = HybridRegistration(**FAST).fit(pair.moving, pair.fixed, matches=ms)
    assert est.matches_ is ms and est.inlier_mask_.sum() >= 4
