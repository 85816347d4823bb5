"""Dense displacement fields and the pull-style spatial transform.

A field is defined on the fixed-image grid. Warping pulls intensities from
the source image: ``out(p) = src(p + phi(p))``. Consequently a fixed-frame
point ``p`` corresponds to the moving-frame point ``p + phi(p)``.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .raster import bilinear

FIELD_MAGIC = b"HRFD"


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement ``(u, v)`` in pixels, arrays of shape ``(height, width)``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be 2-D arrays of one shape, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, width, height, du, dv):
        return cls(np.full((height, width), float(du)), np.full((height, width), float(dv)))

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.hypot(self.u, self.v)

    def __neg__(self):
        return DisplacementField(-self.u, -self.v)

    def __add__(self, other):
        return DisplacementField(self.u + other.u, self.v + other.v)

    def __mul__(self, k):
        return DisplacementField(self.u * k, self.v * k)

    __rmul__ = __mul__


def sampling_grid(phi):
    """Absolute sample coordinates ``(x + u, y + v)`` for every grid pixel."""
    h, w = phi.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx + phi.u, yy + phi.v


def warp_field(img, phi):
    """Resample ``img`` at ``p + phi(p)`` with bilinear interpolation and border clamp."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != phi.shape:
        raise ValueError(f"image shape {img.shape} does not match field shape {phi.shape}")
    xs, ys = sampling_grid(phi)
    return bilinear(img, xs, ys)


def warp_field_with_grad(img, phi):
    """Warped image plus d(warped)/du and d(warped)/dv at every pixel."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != phi.shape:
        raise ValueError(f"image shape {img.shape} does not match field shape {phi.shape}")
    xs, ys = sampling_grid(phi)
    return bilinear(img, xs, ys, with_grad=True)


def interpolate_field(phi, points):
    """Bilinear field value at subpixel points; returns an (N, 2) array of (u, v)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    du = bilinear(phi.u, pts[:, 0], pts[:, 1])
    dv = bilinear(phi.v, pts[:, 0], pts[:, 1])
    return np.stack([du, dv], axis=1)


def warp_points(points, phi):
    """Map fixed-frame points into the frame the field pulls from: ``p + phi(p)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts + interpolate_field(phi, pts)


def bilinear_weights(points, width, height):
    """Sparse bilinear stencil of each point: returns flat indices (N, 4) and weights (N, 4).

    ``sum(weights * field.ravel()[indices], axis=1)`` reproduces
    :func:`interpolate_field` for one component.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(pts[:, 0], 0.0, width - 1.0)
    y = np.clip(pts[:, 1], 0.0, height - 1.0)
    x0 = np.clip(np.ceil(x).astype(np.intp) - 1, 0, max(width - 2, 0))
    y0 = np.clip(np.ceil(y).astype(np.intp) - 1, 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def upsample_field(phi, factor=2, shape=None):
    """Bilinear upsampling of ``u`` and ``v`` followed by the pixel-unit rescale.

    Grids are aligned the way box decimation aligns them: coarse pixel ``i``
    sits at fine coordinate ``factor * i + (factor - 1) / 2``. ``shape`` is
    the target ``(height, width)``; by default ``factor`` times the input.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    h, w = phi.shape
    if shape is None:
        shape = (h * factor, w * factor)
    out_h, out_w = shape
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    cx = (xx + 0.5) / factor - 0.5
    cy = (yy + 0.5) / factor - 0.5
    u = bilinear(phi.u, cx, cy) * factor
    v = bilinear(phi.v, cx, cy) * factor
    return DisplacementField(u, v)


def jacobian_determinant(phi):
    """det of d(p + phi)/dp by central differences on interior pixels, shape (h-2, w-2)."""
    u, v = phi.u, phi.v
    ux = (u[1:-1, 2:] - u[1:-1, :-2]) / 2.0
    uy = (u[2:, 1:-1] - u[:-2, 1:-1]) / 2.0
    vx = (v[1:-1, 2:] - v[1:-1, :-2]) / 2.0
    vy = (v[2:, 1:-1] - v[:-2, 1:-1]) / 2.0
    return (1.0 + ux) * (1.0 + vy) - uy * vx


def jacobian_stats(phi):
    """Return ``(min_det, folding_fraction)`` over interior pixels.

    Fields smaller than 3x3 have no interior; they report ``(1.0, 0.0)``.
    """
    if min(phi.shape) < 2:
        raise ValueError("jacobian_stats needs a field of at least 2x2")
    if min(phi.shape) < 3:
        return 1.0, 0.0
    det = jacobian_determinant(phi)
    return float(det.min()), float(np.mean(det <= 0.0))


def save_field(path, phi):
    """Write the little-endian HRFD container: magic, u32 width, u32 height, f32 u, f32 v."""
    header = FIELD_MAGIC + struct.pack("<II", phi.width, phi.height)
    body = phi.u.astype("<f4").tobytes() + phi.v.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_field(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FIELD_MAGIC:
        raise FormatError(f"{path}: not an HRFD field file")
    w, h = struct.unpack("<II", data[4:12])
    n = w * h
    if len(data) != 12 + 8 * n:
        raise FormatError(f"{path}: expected {12 + 8 * n} bytes for a {w}x{h} field, got {len(data)}")
    planes = np.frombuffer(data[12:], dtype="<f4").astype(np.float64)
    return DisplacementField(planes[:n].reshape(h, w), planes[n:].reshape(h, w))
