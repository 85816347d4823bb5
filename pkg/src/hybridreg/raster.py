"""Grayscale rasters: I/O, resampling, gradients and box pyramids.

Images are plain ``float64`` arrays of shape ``(height, width)`` with values
in [0, 1]; ``img[y, x]`` addresses column ``x`` of row ``y``. Coordinates
passed around as points are ``(x, y)``. Every sampler clamps to the border.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._validation import check_image
from .exceptions import FormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _read_pgm(data):
    # binary P5: magic, width, height, maxval separated by whitespace/comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"malformed PGM header: {tokens!r}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM header values {w}x{h} maxval={maxval}")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise FormatError(f"truncated PGM raster: expected {need} bytes, got {len(raw)}")
    pix = np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.float64)
    return np.clip(pix / maxval, 0.0, 1.0)


def to_gray(arr):
    """Convert an (H, W) or (H, W, 3|4) array already scaled to [0, 1] to luminance."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        r, g, b = LUMA_WEIGHTS
        return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    raise ValueError(f"cannot convert array of shape {arr.shape} to grayscale")


def load_image(path):
    """Read a PNG or binary PGM file into a grayscale image in [0, 1].

    RGB(A) inputs are reduced with the Rec. 601 luminance weights; alpha is
    ignored.

    Raises
    ------
    OSError
        The file does not exist or cannot be read.
    FormatError
        The file is not a readable PNG/PGM.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return _read_pgm(data)
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        raise FormatError(f"{path}: unsupported image format (PNG or binary PGM expected)")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = to_gray(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode PNG ({exc})") from exc
    return np.clip(arr, 0.0, 1.0)


def _to_uint8(img):
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(path, img):
    """Write an 8-bit grayscale PNG, rounding to nearest."""
    Image.fromarray(_to_uint8(check_image(img)), mode="L").save(Path(path), format="PNG")


def save_pgm(path, img):
    img = check_image(img)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _to_uint8(img).tobytes())


def _axis_weights(n_src, n_dst):
    # align-corners mapping: dst 0 -> src 0, dst n_dst-1 -> src n_src-1
    if n_dst == 1:
        pos = np.array([(n_src - 1) / 2.0])
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, max(n_src - 2, 0))
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    return i0, i1, frac


def resize(img, w, h):
    """Bilinear resampling to exactly ``w`` x ``h`` pixels (corner-aligned grids)."""
    if int(w) < 1 or int(h) < 1:
        raise ValueError(f"target size must be at least 1x1, got {w}x{h}")
    img = np.asarray(img, dtype=np.float64)
    src_h, src_w = img.shape
    if (src_w, src_h) == (w, h):
        return img.copy()
    y0, y1, fy = _axis_weights(src_h, int(h))
    x0, x1, fx = _axis_weights(src_w, int(w))
    rows = img[y0] * (1.0 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def _cell(coord, n):
    """Clamp coordinates and pick the interpolation cell.

    At an exact integer the cell to the left is used, so derivatives taken
    from the cell are one-sided from below. Returns ``(c, i0, frac, inside)``.
    """
    c = np.clip(coord, 0.0, n - 1.0)
    if n == 1:
        zero = np.zeros(np.shape(c), dtype=np.intp)
        return c, zero, np.zeros(np.shape(c)), np.zeros(np.shape(c), dtype=bool)
    i0 = np.clip(np.ceil(c).astype(np.intp) - 1, 0, n - 2)
    inside = (coord >= 0.0) & (coord <= n - 1.0)
    return c, i0, c - i0, inside


def bilinear(img, x, y, with_grad=False):
    """Vectorized clamped bilinear sampling.

    With ``with_grad`` also returns the partial derivatives of the sampled
    value with respect to ``x`` and ``y`` (zero where the coordinate was
    clamped).
    """
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, x0, fx, inx = _cell(x, w)
    _, y0, fy, iny = _cell(y, h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    i00 = img[y0, x0]
    i01 = img[y0, x1]
    i10 = img[y1, x0]
    i11 = img[y1, x1]
    # weighted form keeps integer coordinates bit-exact
    top = (1.0 - fx) * i00 + fx * i01
    bot = (1.0 - fx) * i10 + fx * i11
    val = (1.0 - fy) * top + fy * bot
    if not with_grad:
        return val
    gx = ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10)) * inx
    gy = (bot - top) * iny
    return val, gx, gy


def sample_bilinear(img, x, y):
    """Intensity at subpixel ``(x, y)``; coordinates outside the raster clamp to the edge.

    ``x`` and ``y`` may be scalars or broadcast-compatible arrays.
    """
    val = bilinear(np.asarray(img, dtype=np.float64), x, y)
    return float(val) if np.ndim(val) == 0 else val


def gradient(img):
    """Return ``(gx, gy)``: central differences inside, one-sided at the borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError(f"gradient needs at least 2 pixels per side, got shape {img.shape}")
    gy, gx = np.gradient(img)
    return gx, gy


def box_downsample(img, factor=2):
    h, w = img.shape
    hh, ww = h // factor, w // factor
    blocks = img[: hh * factor, : ww * factor].reshape(hh, factor, ww, factor)
    return blocks.mean(axis=(1, 3))


@dataclass(frozen=True)
class Pyramid:
    """Image pyramid; ``levels[0]`` is the coarsest, ``levels[-1]`` the input."""

    levels: list
    factor: int = 2

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    @property
    def shapes(self):
        return [lvl.shape for lvl in self.levels]


def build_pyramid(img, levels, factor=2, min_size=8):
    """Box-filter pyramid with ``levels`` levels (the input counts as one).

    Raises ``ValueError`` if the coarsest level would be smaller than
    ``min_size`` pixels on a side.
    """
    img = np.asarray(img, dtype=np.float64)
    if int(levels) < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape
    scale = factor ** (levels - 1)
    if h // scale < min_size or w // scale < min_size:
        raise ValueError(
            f"{levels} pyramid levels on a {w}x{h} image leave a coarsest level below {min_size}x{min_size}"
        )
    out = [img]
    for _ in range(levels - 1):
        out.append(box_downsample(out[-1], factor))
    return Pyramid(levels=out[::-1], factor=factor)


def level_coords(points, k, factor=2):
    """Map finest-level pixel coordinates to pyramid level ``k`` steps coarser.

    Box decimation places coarse pixel ``i`` at fine coordinate
    ``factor * i + (factor - 1) / 2``.
    """
    s = float(factor) ** k
    return (np.asarray(points, dtype=np.float64) + 0.5) / s - 0.5
