"""Scikit-learn style estimators wrapping the registration stages.

``fit(moving, fixed)`` estimates the transform; ``transform(moving)`` warps an
image from the moving frame into the fixed frame; ``transform_points`` maps
fixed-frame points into the moving frame.
"""

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_points, check_same_shape
from .exceptions import RansacFailure
from .field import DisplacementField, warp_field, warp_points
from .homography import ransac_homography, warp_homography
from .matching import MatchSet, builtin_matches
from .objective import LossWeights
from .optim import OptimConfig, register_deformable
from .pipeline import RunConfig, compose_warp, register_arrays


class _RegistrationBase(TransformerMixin, BaseEstimator):
    def _matches(self, moving, fixed, matches):
        if matches is None:
            return builtin_matches(moving, fixed, self.max_points, self.nms_radius, self.ratio)
        if isinstance(matches, MatchSet):
            return matches
        moving_pts, fixed_pts = matches
        return MatchSet(check_points(moving_pts, "moving"), check_points(fixed_pts, "fixed"), source="file")

    def _validate_pair(self, moving, fixed):
        moving = check_image(moving, "moving")
        fixed = check_image(fixed, "fixed")
        check_same_shape(moving, fixed)
        return moving, fixed

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)


class GlobalRegistration(_RegistrationBase):
    """Homography alignment from matches with RANSAC.

    Parameters
    ----------
    ransac_thresh : float
        Inlier threshold on the symmetric transfer error, pixels.
    ransac_max_iters : int
    max_points, nms_radius, ratio
        Built-in Harris detector and matcher settings.
    random_state : int

    Attributes
    ----------
    homography_ : Homography
        Moving-to-fixed transform.
    inlier_mask_ : ndarray of bool
    matches_ : MatchSet
    """

    def __init__(self, ransac_thresh=3.0, ransac_max_iters=2000, max_points=500, nms_radius=4, ratio=0.9,
                 random_state=0):
        self.ransac_thresh = ransac_thresh
        self.ransac_max_iters = ransac_max_iters
        self.max_points = max_points
        self.nms_radius = nms_radius
        self.ratio = ratio
        self.random_state = random_state

    def fit(self, X, y, matches=None):
        moving, fixed = self._validate_pair(X, y)
        ms = self._matches(moving, fixed, matches)
        rr = ransac_homography(ms, self.ransac_thresh, self.ransac_max_iters, seed=self.random_state)
        self.matches_ = ms
        self.homography_ = rr.h
        self.inlier_mask_ = rr.inlier_mask
        self.n_inliers_ = rr.inlier_count
        self.shape_ = fixed.shape
        return self

    def transform(self, X):
        check_is_fitted(self, "homography_")
        return warp_homography(check_image(X, "X"), self.homography_, self.shape_)

    def transform_points(self, points):
        check_is_fitted(self, "homography_")
        return self.homography_.inverse().apply(check_points(points))


class DeformableRegistration(_RegistrationBase):
    """Dense field refinement for a pair that is already coarsely aligned.

    ``fit(moving, fixed, matches)`` expects matches in the shared frame; with
    no matches only the edge-weighted NCC and smoothness terms are active.

    Attributes
    ----------
    field_ : DisplacementField
    trace_ : OptimTrace
    """

    def __init__(self, levels=3, iters_per_level=(200, 150, 100), step_size=0.5, step_decay=0.5,
                 lambda_position=5.0, lambda_encc=2.0, lambda_smooth=1.0, window=15, stride=8, top_k=120,
                 row_sample=1024, random_state=0):
        self.levels = levels
        self.iters_per_level = iters_per_level
        self.step_size = step_size
        self.step_decay = step_decay
        self.lambda_position = lambda_position
        self.lambda_encc = lambda_encc
        self.lambda_smooth = lambda_smooth
        self.window = window
        self.stride = stride
        self.top_k = top_k
        self.row_sample = row_sample
        self.random_state = random_state

    def optim_config(self):
        return OptimConfig(
            levels=self.levels, iters_per_level=tuple(self.iters_per_level), step_size=self.step_size,
            step_decay=self.step_decay,
            weights=LossWeights(self.lambda_position, self.lambda_encc, self.lambda_smooth),
            seed=self.random_state, row_sample=self.row_sample, stride=self.stride, window=self.window,
            top_k=self.top_k,
        )

    def fit(self, X, y, matches=None):
        moving, fixed = self._validate_pair(X, y)
        if matches is not None and not isinstance(matches, MatchSet):
            matches = MatchSet(check_points(matches[0]), check_points(matches[1]), source="file")
        self.field_, self.trace_ = register_deformable(fixed, moving, matches, self.optim_config())
        return self

    def transform(self, X):
        check_is_fitted(self, "field_")
        return warp_field(check_image(X, "X"), self.field_)

    def transform_points(self, points):
        check_is_fitted(self, "field_")
        return warp_points(check_points(points), self.field_)


class HybridRegistration(DeformableRegistration):
    """Homography stage followed by deformable refinement.

    Parameters mirror :class:`GlobalRegistration` and
    :class:`DeformableRegistration`; ``guidance_max_residual`` drops matches
    whose post-homography residual exceeds it before they guide the field.

    Attributes
    ----------
    homography_ : Homography
    field_ : DisplacementField
    trace_ : OptimTrace
    stage_ : str
        ``"ok"``, or ``"deform_failed"`` when the field diverged (the
        homography alone is then used).

    Examples
    --------
    >>> from hybridreg.synth import fundus_phantom
    >>> img = fundus_phantom(128, seed=1)
    >>> reg = HybridRegistration(iters_per_level=(20, 10, 5)).fit(img, img)
    >>> bool(abs(reg.field_.u).mean() < 0.05)
    True
    """

    def __init__(self, ransac_thresh=3.0, ransac_max_iters=2000, max_points=500, nms_radius=4, ratio=0.9,
                 guidance_max_residual=10.0, levels=3, iters_per_level=(200, 150, 100), step_size=0.5,
                 step_decay=0.5, lambda_position=5.0, lambda_encc=2.0, lambda_smooth=1.0, window=15, stride=8,
                 top_k=120, row_sample=1024, random_state=0):
        super().__init__(levels, iters_per_level, step_size, step_decay, lambda_position, lambda_encc,
                         lambda_smooth, window, stride, top_k, row_sample, random_state)
        self.ransac_thresh = ransac_thresh
        self.ransac_max_iters = ransac_max_iters
        self.max_points = max_points
        self.nms_radius = nms_radius
        self.ratio = ratio
        self.guidance_max_residual = guidance_max_residual

    def run_config(self):
        return RunConfig(resolution=0, seed=self.random_state, max_points=self.max_points,
                         nms_radius=self.nms_radius, ratio=self.ratio, ransac_thresh=self.ransac_thresh,
                         ransac_iters=self.ransac_max_iters, guidance_max_residual=self.guidance_max_residual,
                         optim=self.optim_config())

    def fit(self, X, y, matches=None):
        moving, fixed = self._validate_pair(X, y)
        ms = self._matches(moving, fixed, matches)
        result = register_arrays(fixed, moving, self.run_config(), ms)
        if result.homography is None:
            raise RansacFailure(result.error)
        self.matches_ = ms
        self.homography_ = result.homography
        self.inlier_mask_ = result.ransac.inlier_mask
        self.stage_ = result.stage
        self.field_ = result.phi if result.phi is not None else DisplacementField.zeros(*fixed.shape[::-1])
        self.trace_ = result.trace
        return self

    def transform(self, X):
        check_is_fitted(self, ["homography_", "field_"])
        return compose_warp(check_image(X, "X"), self.homography_, self.field_)

    def transform_points(self, points):
        check_is_fitted(self, ["homography_", "field_"])
        return self.homography_.inverse().apply(warp_points(check_points(points), self.field_))


__all__ = ["GlobalRegistration", "DeformableRegistration", "HybridRegistration"]
