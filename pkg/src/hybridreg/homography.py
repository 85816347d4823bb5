"""Global registration: projective transform from matches via RANSAC."""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_points
from .exceptions import DegenerateConfigurationError, InsufficientDataError, RansacFailure
from .raster import bilinear


@dataclass(frozen=True)
class Homography:
    """3x3 projective matrix mapping moving-frame points to fixed-frame points.

    Stored normalized so that ``m[2, 2] == 1``.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise DegenerateConfigurationError("homography has non-finite entries")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateConfigurationError("homography has m[2][2] == 0 and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m[:2, :2])) < 1e-12:
            raise DegenerateConfigurationError("homography upper-left 2x2 block is singular")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def apply(self, points):
        return apply_homography(self.m, points)

    def inverse(self):
        if abs(np.linalg.det(self.m)) < 1e-12:
            raise DegenerateConfigurationError("homography is not invertible")
        return Homography(np.linalg.inv(self.m))

    def to_list(self):
        return [float(x) for x in self.m.ravel()]

    @classmethod
    def from_list(cls, values):
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))


@dataclass
class RansacResult:
    h: Homography
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_used: int


def apply_homography(m, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = pts @ m[:, :2].T + m[:, 2]
    return hom[:, :2] / hom[:, 2:3]


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _collinear_triplet(pts, tol=1e-9):
    # any 3 of 4 points on a line (area relative to squared extent)
    ext = np.ptp(pts, axis=0).max() ** 2 + 1e-300
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        d1 = pts[b] - pts[a]
        d2 = pts[c] - pts[a]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * ext:
            return True
    return False


def dlt(src, dst):
    """Normalized direct linear transform for ``dst ~ H src``.

    Hartley normalization, SVD null vector, denormalization and scaling to
    ``m[2, 2] = 1``.

    Raises
    ------
    InsufficientDataError
        Fewer than four correspondences.
    DegenerateConfigurationError
        Collinear minimal sample or rank-deficient system.
    """
    src = check_points(src, "src")
    dst = check_points(dst, "dst")
    n = len(src)
    if n < 4 or len(dst) != n:
        raise InsufficientDataError(f"need at least 4 paired points, got {n}/{len(dst)}")
    if n == 4 and (_collinear_triplet(src) or _collinear_triplet(dst)):
        raise DegenerateConfigurationError("three of the four points are collinear")
    t_src = _normalizer(src)
    t_dst = _normalizer(dst)
    ps = src @ t_src[:2, :2].T + t_src[:2, 2]
    pd = dst @ t_dst[:2, :2].T + t_dst[:2, 2]
    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    a[1::2] = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    _, s, vt = np.linalg.svd(a)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("correspondence system is rank deficient")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(m[2, 2]) < 1e-15:
        raise DegenerateConfigurationError("estimated homography maps the origin to infinity")
    return Homography(m)


def transfer_errors(m, src, dst):
    """Root-mean of forward and backward transfer distances per correspondence."""
    fwd = np.linalg.norm(apply_homography(m, src) - dst, axis=1)
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    bwd = np.linalg.norm(apply_homography(inv, dst) - src, axis=1)
    err = np.sqrt(0.5 * (fwd**2 + bwd**2))
    return np.where(np.isfinite(err), err, np.inf)


def _required_iters(inlier_frac, confidence, sample_size=4):
    if inlier_frac >= 1.0:
        return 1
    if inlier_frac <= 0.0:
        return math.inf
    denom = math.log(max(1e-300, 1.0 - inlier_frac**sample_size))
    if denom == 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / denom)


def ransac_homography(matches, reproj_thresh=3.0, max_iters=2000, seed=0, confidence=0.999):
    """Robust homography from a :class:`~hybridreg.matching.MatchSet` (moving -> fixed).

    Inliers have symmetric transfer error below ``reproj_thresh`` pixels.
    The best minimal-sample model is refit on its inliers (with inlier
    re-selection until the set stabilizes). Deterministic for a given seed.

    Raises
    ------
    InsufficientDataError
        Fewer than 4 matches.
    RansacFailure
        No model with at least 4 inliers.
    """
    src, dst = matches.moving, matches.fixed
    n = len(src)
    if n < 4:
        raise InsufficientDataError(f"RANSAC needs at least 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    best_err = math.inf
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            h = dlt(src[sample], dst[sample])
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        err = transfer_errors(h.m, src, dst)
        mask = err < reproj_thresh
        count = int(mask.sum())
        score = float(err[mask].sum()) if count else math.inf
        if count > best_count or (count == best_count and count > 0 and score < best_err):
            best_mask, best_count, best_err = mask, count, score
            needed = _required_iters(count / n, confidence)
    if best_mask is None or best_count < 4:
        raise RansacFailure(f"no homography with at least 4 inliers among {n} matches")

    mask = best_mask
    h = dlt(src[mask], dst[mask])
    for _ in range(5):
        new_mask = transfer_errors(h.m, src, dst) < reproj_thresh
        if new_mask.sum() < 4 or np.array_equal(new_mask, mask):
            break
        if new_mask.sum() < mask.sum():
            break
        mask = new_mask
        h = dlt(src[mask], dst[mask])
    mask = transfer_errors(h.m, src, dst) < reproj_thresh
    if mask.sum() < 4:
        raise RansacFailure("refit homography retains fewer than 4 inliers")
    return RansacResult(h=h, inlier_mask=mask, inlier_count=int(mask.sum()), iterations_used=it)


def warp_homography(img, h, shape=None):
    """Inverse warp: output pixel ``p`` samples ``img`` at ``h^-1 p`` (bilinear, clamped).

    The output has the input's size unless ``shape`` ``(height, width)`` is given.
    """
    img = np.asarray(img, dtype=np.float64)
    if np.array_equal(h.m, np.eye(3)) and shape in (None, img.shape):
        return img.copy()
    inv = h.inverse().m
    out_h, out_w = shape if shape is not None else img.shape
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    xs = (inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]) / den
    ys = (inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]) / den
    return bilinear(img, xs, ys)


def corner_transfer_error(h_est, h_true, width, height):
    """Maximum distance between the images of the four image corners."""
    corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)
    return float(np.linalg.norm(h_est.apply(corners) - h_true.apply(corners), axis=1).max())
