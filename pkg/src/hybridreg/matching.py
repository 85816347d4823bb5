"""Keypoint correspondences: a Harris/patch stand-in detector and match-file ingestion.

Any detector can feed the pipeline; its output only has to arrive as a
:class:`MatchSet`, either built here or loaded from a JSON match file.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_points
from .exceptions import FormatError, MatchValidationError

HARRIS_K = 0.04
PATCH_SIZE = 16


@dataclass
class MatchSet:
    """Paired keypoints; row ``k`` of ``moving`` corresponds to row ``k`` of ``fixed``.

    Duplicate coordinates on either side are dropped at construction,
    keeping the first occurrence.
    """

    moving: np.ndarray
    fixed: np.ndarray
    source: str = "builtin"
    scores: np.ndarray = field(default=None)

    def __post_init__(self):
        self.moving = check_points(self.moving, "moving")
        self.fixed = check_points(self.fixed, "fixed")
        if len(self.moving) != len(self.fixed):
            raise ValueError(f"moving/fixed counts differ: {len(self.moving)} vs {len(self.fixed)}")
        if self.scores is None:
            self.scores = np.zeros(len(self.moving))
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        keep = _first_unique(self.moving) & _first_unique(self.fixed)
        if not keep.all():
            self.moving, self.fixed, self.scores = self.moving[keep], self.fixed[keep], self.scores[keep]

    def __len__(self):
        return len(self.moving)

    @classmethod
    def empty(cls, source="builtin"):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), source=source)

    def subset(self, mask):
        return MatchSet(self.moving[mask], self.fixed[mask], self.source, self.scores[mask])

    def with_moving(self, moving):
        return MatchSet(moving, self.fixed, self.source, self.scores)

    def to_records(self):
        return np.hstack([self.moving, self.fixed]).tolist()


def _first_unique(points):
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    _, first = np.unique(points, axis=0, return_index=True)
    mask = np.zeros(len(points), dtype=bool)
    mask[first] = True
    return mask


def harris_response(img, k=HARRIS_K, sigma=1.0):
    """Dense Harris response ``det(M) - k tr(M)^2`` with 3x3 Sobel derivatives."""
    img = np.asarray(img, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_harris(img, max_points=500, nms_radius=4, threshold_rel=0.01, border=3):
    """Harris corners after greedy non-maximum suppression.

    Candidates are local maxima of the response above ``threshold_rel`` times
    the global maximum. They are accepted strongest first, skipping any
    candidate within ``nms_radius`` (Chebyshev) of an accepted one.

    Returns
    -------
    points : (N, 2) ndarray of (x, y)
    scores : (N,) ndarray, non-increasing
    """
    img = check_image(img, min_size=16)
    resp = harris_response(img)
    peak = resp.max()
    if not peak > 1e-12:
        return np.zeros((0, 2)), np.zeros(0)
    size = 2 * nms_radius + 1
    local_max = resp == ndimage.maximum_filter(resp, size=size, mode="nearest")
    cand = local_max & (resp > threshold_rel * peak)
    if border > 0:
        cand[:border] = cand[-border:] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    sc = resp[ys, xs]
    order = np.argsort(-sc, kind="stable")
    accepted = []
    taken = np.zeros(img.shape, dtype=bool)
    for idx in order:
        y, x = ys[idx], xs[idx]
        if taken[y, x]:
            continue
        accepted.append(idx)
        taken[max(0, y - nms_radius) : y + nms_radius + 1, max(0, x - nms_radius) : x + nms_radius + 1] = True
        if len(accepted) >= max_points:
            break
    accepted = np.asarray(accepted, dtype=np.intp)
    pts = np.stack([xs[accepted], ys[accepted]], axis=1).astype(np.float64) if len(accepted) else np.zeros((0, 2))
    return pts, sc[accepted] if len(accepted) else np.zeros(0)


def patch_descriptors(img, points, size=PATCH_SIZE):
    """Zero-mean unit-norm ``size`` x ``size`` patches around rounded points.

    Points too close to the border for a full patch, or whose patch is flat,
    are dropped. Returns ``(descriptors, kept_index)``.
    """
    img = np.asarray(img, dtype=np.float64)
    pts = check_points(points)
    h, w = img.shape
    r = size // 2
    ix = np.rint(pts[:, 0]).astype(np.intp)
    iy = np.rint(pts[:, 1]).astype(np.intp)
    ok = (ix - r >= 0) & (ix + size - r <= w) & (iy - r >= 0) & (iy + size - r <= h)
    kept = np.nonzero(ok)[0]
    if len(kept) == 0:
        return np.zeros((0, size * size)), kept
    off = np.arange(size) - r
    rows = iy[kept, None, None] + off[None, :, None]
    cols = ix[kept, None, None] + off[None, None, :]
    patches = img[rows, cols].reshape(len(kept), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    nonflat = norms > 1e-8
    return patches[nonflat] / norms[nonflat, None], kept[nonflat]


def _ratio_nearest(dist, ratio):
    """Nearest column per row and whether it passes the ratio test."""
    n_cols = dist.shape[1]
    nn = np.argmin(dist, axis=1)
    if n_cols < 2:
        return nn, np.ones(dist.shape[0], dtype=bool)
    part = np.partition(dist, 1, axis=1)
    return nn, part[:, 0] < ratio * part[:, 1]


def match_descriptors(img_m, img_f, kps_m, kps_f, ratio=0.9):
    """Mutual nearest-neighbour matching of patch descriptors.

    A pair is kept when each point is the other's nearest neighbour and the
    Lowe ratio test passes in both directions, which makes the result
    independent of argument order.
    """
    desc_m, keep_m = patch_descriptors(img_m, kps_m)
    desc_f, keep_f = patch_descriptors(img_f, kps_f)
    if len(desc_m) == 0 or len(desc_f) == 0:
        return MatchSet.empty()
    # unit vectors: squared distance = 2 - 2 cos
    dist = np.sqrt(np.maximum(2.0 - 2.0 * desc_m @ desc_f.T, 0.0))
    nn_mf, ok_mf = _ratio_nearest(dist, ratio)
    nn_fm, ok_fm = _ratio_nearest(dist.T, ratio)
    rows = np.arange(len(desc_m))
    good = (nn_fm[nn_mf] == rows) & ok_mf & ok_fm[nn_mf]
    i_m = rows[good]
    i_f = nn_mf[good]
    pts_m = check_points(kps_m)[keep_m[i_m]]
    pts_f = check_points(kps_f)[keep_f[i_f]]
    return MatchSet(pts_m, pts_f, source="builtin", scores=-dist[i_m, i_f])


def builtin_matches(img_m, img_f, max_points=500, nms_radius=4, ratio=0.9):
    """Detect on both images and match."""
    kps_m, _ = detect_harris(img_m, max_points=max_points, nms_radius=nms_radius)
    kps_f, _ = detect_harris(img_f, max_points=max_points, nms_radius=nms_radius)
    return match_descriptors(img_m, img_f, kps_m, kps_f, ratio=ratio)


def load_matches(path, image_size):
    """Read a match file ``{"frame": [w, h], "matches": [[x_m, y_m, x_f, y_f], ...]}``.

    Coordinates are rescaled linearly from ``frame`` to ``image_size``
    (``(w, h)``) when the two differ.

    Raises
    ------
    FormatError
        Malformed JSON or records.
    MatchValidationError
        A rescaled coordinate falls outside the target image; ``indices``
        lists the offending records.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "matches" not in doc:
        raise FormatError(f"{path}: expected an object with a 'matches' array")
    records = doc["matches"]
    frame = doc.get("frame", list(image_size))
    if not (isinstance(frame, (list, tuple)) and len(frame) == 2):
        raise FormatError(f"{path}: 'frame' must be [width, height]")
    if not isinstance(records, list):
        raise FormatError(f"{path}: 'matches' must be a list")
    for k, rec in enumerate(records):
        if not (isinstance(rec, (list, tuple)) and len(rec) == 4):
            raise FormatError(f"{path}: match {k} must have 4 numbers, got {rec!r}")
        if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in rec):
            raise FormatError(f"{path}: match {k} contains non-numeric entries")
    arr = np.asarray(records, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite coordinates")
    fw, fh = float(frame[0]), float(frame[1])
    if fw <= 0 or fh <= 0:
        raise FormatError(f"{path}: frame dimensions must be positive")
    w, h = image_size
    scale = np.array([w / fw, h / fh, w / fw, h / fh])
    arr = arr * scale
    # half-open bounds: the ratio rescale sends the last source pixel just past w - 1
    bad = np.nonzero(
        (arr[:, [0, 2]] < 0).any(axis=1)
        | (arr[:, [0, 2]] >= w).any(axis=1)
        | (arr[:, [1, 3]] < 0).any(axis=1)
        | (arr[:, [1, 3]] >= h).any(axis=1)
    )[0]
    if len(bad):
        raise MatchValidationError(f"{path}: matches out of bounds at indices {bad.tolist()}", bad)
    return MatchSet(arr[:, :2], arr[:, 2:], source="ingested")


def save_matches(path, matches, frame):
    doc = {"frame": list(frame), "matches": matches.to_records()}
    Path(path).write_text(json.dumps(doc))
