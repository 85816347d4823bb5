"""Synthetic training/evaluation pairs: random affine + elastic warp + Gaussian noise.

The ground-truth field ``g`` lives on the fixed grid in the pull convention,
``fixed(p) ~ moving(p + g(p))``, with ``p + g(p) = A(p + e(p))`` for the
affine map ``A`` and the elastic field ``e``. Rendering the moving image
needs the inverse of that map, which is found by fixed-point iteration.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .field import DisplacementField, interpolate_field, jacobian_stats, save_field
from .raster import bilinear, gradient, save_png

REFERENCE_SIZE = 768


@dataclass(frozen=True)
class AffineParams:
    """Rotation (degrees), scale and translation (pixels) about the image centre."""

    rotation: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def matrix(self, width, height):
        """3x3 matrix of the fixed-to-moving map ``q = s R (p - c) + c + t``."""
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        a = self.scale * np.array([[c, -s], [s, c]])
        t = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.array([self.tx, self.ty])
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = t
        return m


def sample_affine(seed, max_rot=15.0, max_trans=0.05, scale_range=(0.9, 1.1), width=REFERENCE_SIZE):
    """Uniformly sample rotation in ``±max_rot``, translation in ``±max_trans * width`` and scale."""
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-max_rot, max_rot) if max_rot > 0 else 0.0
    lo, hi = scale_range
    scale = rng.uniform(lo, hi) if hi > lo else float(lo)
    t = max_trans * width
    tx, ty = (rng.uniform(-t, t, size=2) if t > 0 else (0.0, 0.0))
    return AffineParams(float(rot), float(scale), float(tx), float(ty))


def sample_elastic(seed, intensity=50.0, sigma=6.0, size=(REFERENCE_SIZE, REFERENCE_SIZE),
                   reject_folding=True, max_attempts=10, return_info=False):
    """Gaussian-smoothed uniform noise rescaled to a peak displacement.

    The peak magnitude is ``intensity * width / 768`` pixels. With
    ``reject_folding`` a sample whose Jacobian determinant is non-positive
    anywhere is redrawn; after ``max_attempts`` failures the intensity is
    halved and sampling continues.
    """
    w, h = size
    if w < 32 or h < 32:
        raise ValueError("elastic fields need at least 32x32 pixels")
    rng = np.random.default_rng(seed)
    peak = float(intensity) * w / REFERENCE_SIZE
    attempts = 0
    halvings = 0
    while True:
        noise = rng.uniform(-1.0, 1.0, size=(2, h, w))
        u = ndimage.gaussian_filter(noise[0], sigma, mode="reflect")
        v = ndimage.gaussian_filter(noise[1], sigma, mode="reflect")
        mag = np.hypot(u, v).max()
        if peak == 0.0 or mag == 0.0:
            phi = DisplacementField.zeros(w, h)
        else:
            phi = DisplacementField(u * (peak / mag), v * (peak / mag))
        attempts += 1
        if not reject_folding or peak == 0.0 or jacobian_stats(phi)[1] == 0.0:
            break
        if attempts % max_attempts == 0:
            peak *= 0.5
            halvings += 1
    if return_info:
        return phi, {"peak": peak, "attempts": attempts, "halvings": halvings}
    return phi


@dataclass
class SynthConfig:
    max_rot: float = 15.0
    max_trans: float = 0.05
    scale_range: tuple = (0.9, 1.1)
    elastic_intensity: float = 50.0
    elastic_sigma: float = 6.0
    noise_sigma: float = 0.02
    n_control: int = 20
    min_control: int = 10
    control_spacing: float = 32.0
    affine: bool = True
    elastic: bool = True

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)

    def to_dict(self):
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    gt_field: DisplacementField
    control_fixed: np.ndarray
    control_moving: np.ndarray
    seed: int
    params: dict = field(default_factory=dict)


def invert_map(shape, affine_inv, elastic, n_iter=40):
    """Solve ``A(y + e(y)) = q`` for every moving-grid pixel ``q``.

    ``affine_inv`` is the inverse affine matrix; ``elastic`` the field ``e``.
    Returns source coordinates ``(x, y)`` on the fixed grid.
    """
    h, w = shape
    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    bx = affine_inv[0, 0] * qx + affine_inv[0, 1] * qy + affine_inv[0, 2]
    by = affine_inv[1, 0] * qx + affine_inv[1, 1] * qy + affine_inv[1, 2]
    x, y = bx.copy(), by.copy()
    if elastic is None:
        return x, y
    for _ in range(n_iter):
        ex = bilinear(elastic.u, x, y)
        ey = bilinear(elastic.v, x, y)
        nx, ny = bx - ex, by - ey
        step = max(np.abs(nx - x).max(), np.abs(ny - y).max())
        x, y = nx, ny
        if step < 1e-6:
            break
    return x, y


def _control_points(fixed, gt_field, n, min_n, spacing, margin):
    h, w = fixed.shape
    gx, gy = gradient(ndimage.gaussian_filter(fixed, 1.0))
    score = np.abs(gx) + np.abs(gy)
    yy, xx = np.mgrid[0:h, 0:w]
    mx = xx + gt_field.u
    my = yy + gt_field.v
    valid = (
        (xx >= margin) & (xx <= w - 1 - margin) & (yy >= margin) & (yy <= h - 1 - margin)
        & (mx >= margin) & (mx <= w - 1 - margin) & (my >= margin) & (my <= h - 1 - margin)
    )
    flat = np.flatnonzero(valid.ravel())
    order = flat[np.argsort(-score.ravel()[flat], kind="stable")]
    chosen = []
    for idx in order:
        p = np.array([idx % w, idx // w], dtype=np.float64)
        if all(np.hypot(*(p - q)) >= spacing for q in chosen):
            chosen.append(p)
            if len(chosen) >= n:
                break
    if len(chosen) < min_n:
        raise ValueError(f"only {len(chosen)} control points fit at spacing {spacing}; need {min_n}")
    return np.array(chosen)


def make_pair(src, seed, cfg=None):
    """Build a :class:`SynthPair` from a source image at working resolution."""
    cfg = cfg or SynthConfig()
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    if w < 64 or h < 64:
        raise ValueError(f"source image {w}x{h} is too small; need at least 64x64")
    ss = np.random.SeedSequence(seed)
    s_aff, s_el, s_noise_f, s_noise_m = (int(c.generate_state(1)[0]) for c in ss.spawn(4))

    params = AffineParams()
    if cfg.affine:
        params = sample_affine(s_aff, cfg.max_rot, cfg.max_trans, cfg.scale_range, width=w)
    a = params.matrix(w, h)
    elastic = None
    el_info = {"peak": 0.0, "attempts": 0, "halvings": 0}
    if cfg.elastic and cfg.elastic_intensity > 0:
        elastic, el_info = sample_elastic(s_el, cfg.elastic_intensity, cfg.elastic_sigma, (w, h), return_info=True)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ex = xx + (elastic.u if elastic is not None else 0.0)
    ey = yy + (elastic.v if elastic is not None else 0.0)
    mx = a[0, 0] * ex + a[0, 1] * ey + a[0, 2]
    my = a[1, 0] * ex + a[1, 1] * ey + a[1, 2]
    gt = DisplacementField(mx - xx, my - yy)

    sx, sy = invert_map((h, w), np.linalg.inv(a), elastic)
    moving = bilinear(src, sx, sy)
    fixed = src.copy()
    if cfg.noise_sigma > 0:
        fixed = np.clip(fixed + np.random.default_rng(s_noise_f).normal(0, cfg.noise_sigma, fixed.shape), 0, 1)
        moving = np.clip(moving + np.random.default_rng(s_noise_m).normal(0, cfg.noise_sigma, moving.shape), 0, 1)

    margin = max(8, int(0.04 * w))
    ctrl_f = _control_points(src, gt, cfg.n_control, cfg.min_control, cfg.control_spacing, margin)
    ctrl_m = ctrl_f + interpolate_field(gt, ctrl_f)
    info = {
        "seed": int(seed),
        "size": [w, h],
        "affine": asdict(params),
        "elastic": {"sigma": cfg.elastic_sigma, "requested_intensity": cfg.elastic_intensity, **el_info},
        "noise_sigma": cfg.noise_sigma,
        "config": cfg.to_dict(),
    }
    return SynthPair(fixed, moving, gt, ctrl_f, ctrl_m, int(seed), info)


def save_pair(pair, out_dir, extra_params=None):
    """Write ``fixed.png``, ``moving.png``, ``gt_field.hrfd``, ``points.json`` and ``params.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "fixed.png", pair.fixed)
    save_png(out / "moving.png", pair.moving)
    save_field(out / "gt_field.hrfd", pair.gt_field)
    h, w = pair.fixed.shape
    points = {"frame": [w, h], "fixed": pair.control_fixed.tolist(), "moving": pair.control_moving.tolist()}
    (out / "points.json").write_text(json.dumps(points, indent=1))
    params = dict(pair.params)
    if extra_params:
        params.update(extra_params)
    (out / "params.json").write_text(json.dumps(params, indent=1, sort_keys=True))
    return out


def fundus_phantom(size=256, seed=0):
    """Render a fundus-like grayscale image: bright disc, vessel tree, fine texture.

    Not anatomically faithful; it provides branching curvilinear structure
    and corners for detectors and windowed similarity.
    """
    rng = np.random.default_rng(seed)
    n = int(size)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2.0
    r = np.hypot(xx - c, yy - c) / (0.5 * n)
    base = 0.55 + 0.15 * (1.0 - np.clip(r, 0, 1.2) ** 2)
    disc_x = c + rng.uniform(-0.25, 0.25) * n
    disc_y = c + rng.uniform(-0.1, 0.1) * n
    base += 0.3 * np.exp(-((xx - disc_x) ** 2 + (yy - disc_y) ** 2) / (2 * (0.06 * n) ** 2))

    vessels = np.zeros((n, n))
    layers = {}

    def grow(x, y, angle, width, depth):
        length = rng.uniform(0.25, 0.45) * n * (0.75**depth)
        step = 1.0
        pts = []
        curv = rng.normal(0, 0.02)
        for _ in range(int(length / step)):
            angle += curv + rng.normal(0, 0.04)
            x += step * math.cos(angle)
            y += step * math.sin(angle)
            if not (0 <= x < n and 0 <= y < n):
                break
            pts.append((x, y))
        layers.setdefault(width, []).extend(pts)
        if depth < 4 and len(pts) > 10:
            for frac in rng.uniform(0.3, 0.9, size=2):
                bx, by = pts[int(frac * (len(pts) - 1))]
                grow(bx, by, angle + rng.choice([-1, 1]) * rng.uniform(0.4, 1.0), width * 0.7, depth + 1)

    for k in range(rng.integers(5, 8)):
        grow(disc_x, disc_y, 2 * math.pi * k / 6 + rng.normal(0, 0.3), 0.012 * n, 0)

    for width, pts in layers.items():
        if not pts:
            continue
        acc = np.zeros((n, n))
        p = np.asarray(pts)
        ix = np.clip(np.rint(p[:, 0]).astype(int), 0, n - 1)
        iy = np.clip(np.rint(p[:, 1]).astype(int), 0, n - 1)
        np.add.at(acc, (iy, ix), 1.0)
        sig = max(0.6, width / 2.0)
        prof = ndimage.gaussian_filter(acc, sig)
        prof = prof / (prof.max() + 1e-12)
        vessels = np.maximum(vessels, np.clip(prof * 3.0, 0, 1) * min(1.0, 0.4 + width / (0.012 * n) * 0.6))

    texture = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), 2.0)
    texture = 0.04 * texture / (texture.std() + 1e-12)
    img = base - 0.4 * vessels + texture
    return np.clip(img, 0.0, 1.0)
