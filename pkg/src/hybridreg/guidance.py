"""Pixel relation guidance derived from keypoint matches.

Two signals steer the field: a cell-to-cell affinity target built from
matches (compared against descriptor similarity of the warped moving and
fixed images) and direct smooth-l1 supervision of matched point positions.

The affinity target between moving cell ``i`` and fixed cell ``j`` on the
downsampled grid is 1 for matched cells, ``1 - d(j, m)`` when ``i`` is
matched to some fixed cell ``m``, ``1 - d(n, i)`` when some moving cell
``n`` is matched to ``j``, and 0 otherwise. ``d`` is the Manhattan cell
distance divided by the grid diameter ``(W' - 1) + (H' - 1)``; overlapping
cases take the maximum and values are clamped at 0.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .field import bilinear_weights, interpolate_field
from .raster import gradient

DEFAULT_STRIDE = 8
DEFAULT_TOP_K = 120
DEFAULT_ROW_SAMPLE = 1024
FULL_GRID_CELLS = 32 * 32
FLAT_VARIANCE = 1e-8


@dataclass
class AffinityMap:
    """Ground-truth affinity between cells of a ``grid_w`` x ``grid_h`` grid.

    Only the matched cell pairs are stored; rows are materialized on demand
    because a dense map has ``(grid_w * grid_h) ** 2`` entries.
    """

    grid_w: int
    grid_h: int
    moving_cells: np.ndarray  # (K,) flat cell indices, deduplicated pairs
    fixed_cells: np.ndarray

    @property
    def n_cells(self):
        return self.grid_w * self.grid_h

    @property
    def diameter(self):
        return max(1, (self.grid_w - 1) + (self.grid_h - 1))

    def _cell_xy(self, cells):
        cells = np.asarray(cells, dtype=np.intp)
        return cells % self.grid_w, cells // self.grid_w

    def _manhattan(self, a, b):
        ax, ay = self._cell_xy(a)
        bx, by = self._cell_xy(b)
        return (np.abs(ax[:, None] - bx[None, :]) + np.abs(ay[:, None] - by[None, :])) / self.diameter

    def rows(self, row_idx):
        """Affinity rows for the given moving cells, shape ``(len(row_idx), n_cells)``."""
        row_idx = np.asarray(row_idx, dtype=np.intp)
        out = np.zeros((len(row_idx), self.n_cells))
        if len(self.moving_cells) == 0 or len(row_idx) == 0:
            return out
        all_cells = np.arange(self.n_cells)
        # moving cell n matched to fixed cell j: column j gets 1 - d(n, i)
        near = np.maximum(0.0, 1.0 - self._manhattan(row_idx, self.moving_cells))
        for k, j in enumerate(self.fixed_cells):
            np.maximum(out[:, j], near[:, k], out=out[:, j])
        # row i matched to fixed cell m: entry j gets 1 - d(j, m)
        pos = {int(c): r for r, c in enumerate(row_idx)}
        for m_cell, f_cell in zip(self.moving_cells, self.fixed_cells):
            r = pos.get(int(m_cell))
            if r is None:
                continue
            vals = np.maximum(0.0, 1.0 - self._manhattan(all_cells, [f_cell])[:, 0])
            np.maximum(out[r], vals, out=out[r])
        return out

    @property
    def values(self):
        return self.rows(np.arange(self.n_cells))

    def matched_rows(self):
        return np.unique(self.moving_cells)


def build_affinity_gt(matches, image_size, stride=DEFAULT_STRIDE):
    """Quantize matches to the ``stride`` grid and build the :class:`AffinityMap`.

    Matches whose cell falls outside the ``W // stride`` x ``H // stride``
    grid are dropped. An empty match set gives an all-zero map.
    """
    w, h = image_size
    gw, gh = int(w) // stride, int(h) // stride
    if gw < 1 or gh < 1:
        raise ValueError(f"image {w}x{h} is smaller than one {stride}-pixel cell")
    if len(matches) == 0:
        empty = np.zeros(0, dtype=np.intp)
        return AffinityMap(gw, gh, empty, empty)
    cm = np.floor(matches.moving / stride).astype(np.intp)
    cf = np.floor(matches.fixed / stride).astype(np.intp)
    ok = (
        (cm[:, 0] >= 0) & (cm[:, 0] < gw) & (cm[:, 1] >= 0) & (cm[:, 1] < gh)
        & (cf[:, 0] >= 0) & (cf[:, 0] < gw) & (cf[:, 1] >= 0) & (cf[:, 1] < gh)
    )
    mi = cm[ok, 1] * gw + cm[ok, 0]
    fj = cf[ok, 1] * gw + cf[ok, 0]
    pairs = np.unique(np.stack([mi, fj], axis=1), axis=0) if len(mi) else np.zeros((0, 2), dtype=np.intp)
    return AffinityMap(gw, gh, pairs[:, 0].astype(np.intp), pairs[:, 1].astype(np.intp))


@dataclass
class FeatureGrid:
    """One zero-mean unit-norm descriptor per ``stride`` x ``stride`` cell (zero for flat cells)."""

    grid_w: int
    grid_h: int
    descriptors: np.ndarray  # (grid_w * grid_h, stride * stride)
    stride: int = DEFAULT_STRIDE

    @property
    def dim(self):
        return self.descriptors.shape[1]


def _cells(img, stride):
    h, w = img.shape
    gh, gw = h // stride, w // stride
    blocks = img[: gh * stride, : gw * stride].reshape(gh, stride, gw, stride)
    return blocks.transpose(0, 2, 1, 3).reshape(gh * gw, stride * stride), gw, gh


def _uncells(cell_grads, shape, stride, gw, gh):
    out = np.zeros(shape)
    out[: gh * stride, : gw * stride] = (
        cell_grads.reshape(gh, gw, stride, stride).transpose(0, 2, 1, 3).reshape(gh * stride, gw * stride)
    )
    return out


def _normalize_cells(patches):
    centered = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    flat = centered.var(axis=1) < FLAT_VARIANCE
    safe = np.where(flat, 1.0, norms)
    desc = centered / safe[:, None]
    desc[flat] = 0.0
    return desc, safe, flat


def build_feature_grid(img, stride=DEFAULT_STRIDE):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] < stride or img.shape[1] < stride:
        raise ValueError(f"image must be at least {stride}x{stride}")
    patches, gw, gh = _cells(img, stride)
    desc, _, _ = _normalize_cells(patches)
    return FeatureGrid(gw, gh, desc, stride)


def select_affinity_rows(gt, row_sample=DEFAULT_ROW_SAMPLE, seed=0):
    """Rows evaluated by :func:`affinity_loss`.

    All rows for grids up to 32x32 cells; otherwise the matched rows plus
    ``row_sample`` rows drawn uniformly (seeded) from the rest.
    """
    n = gt.n_cells
    if n <= FULL_GRID_CELLS or row_sample is None or row_sample >= n:
        return np.arange(n)
    matched = gt.matched_rows()
    rest = np.setdiff1d(np.arange(n), matched)
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=min(int(row_sample), len(rest)), replace=False)
    return np.sort(np.concatenate([matched, extra]).astype(np.intp))


def affinity_loss(fg_warped_moving, fg_fixed, gt, row_sample=DEFAULT_ROW_SAMPLE, seed=0, rows=None):
    """Mean squared error between clamped descriptor similarity and the affinity target.

    ``rows`` overrides the seeded row selection; pass ``np.arange(n_cells)``
    for the exact dense loss.
    """
    _check_grids(fg_warped_moving, fg_fixed, gt)
    if rows is None:
        rows = select_affinity_rows(gt, row_sample, seed)
    pred = np.clip(fg_warped_moving.descriptors[rows] @ fg_fixed.descriptors.T, 0.0, 1.0)
    diff = pred - gt.rows(rows)
    return float(np.mean(diff * diff))


def _check_grids(fg_m, fg_f, gt):
    dims = {(fg_m.grid_w, fg_m.grid_h), (fg_f.grid_w, fg_f.grid_h), (gt.grid_w, gt.grid_h)}
    if len(dims) != 1:
        raise ValueError(f"feature grids and affinity map disagree on grid size: {sorted(dims)}")


def affinity_loss_grad(warped, fg_fixed, gt, rows, target_rows=None):
    """Affinity loss and its derivative with respect to every pixel of ``warped``.

    ``target_rows`` may carry precomputed ``gt.rows(rows)``.
    """
    stride = fg_fixed.stride
    patches, gw, gh = _cells(np.asarray(warped, dtype=np.float64), stride)
    if (gw, gh) != (gt.grid_w, gt.grid_h):
        raise ValueError("warped image grid does not match the affinity map")
    desc, norms, flat = _normalize_cells(patches)
    target = gt.rows(rows) if target_rows is None else target_rows
    dots = desc[rows] @ fg_fixed.descriptors.T
    pred = np.clip(dots, 0.0, 1.0)
    diff = pred - target
    value = float(np.mean(diff * diff))
    g_pred = 2.0 * diff / diff.size
    g_dots = np.where((dots > 0.0) & (dots < 1.0), g_pred, 0.0)
    g_desc = np.zeros_like(desc)
    g_desc[rows] = g_dots @ fg_fixed.descriptors
    # d = c / |c|, c = x - mean(x)
    radial = np.sum(g_desc * desc, axis=1, keepdims=True)
    g_c = (g_desc - desc * radial) / norms[:, None]
    g_x = g_c - g_c.mean(axis=1, keepdims=True)
    g_x[flat] = 0.0
    return value, _uncells(g_x, warped.shape, stride, gw, gh)


@dataclass
class GuidancePoints:
    """Matched point pairs chosen for position supervision, strongest gradient first."""

    p_m: np.ndarray
    p_f: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.p_f)


def select_guidance_points(matches, fixed_img, k=DEFAULT_TOP_K):
    """Keep the ``k`` matches whose fixed-side point has the largest ``|gx| + |gy|``."""
    fixed_img = np.asarray(fixed_img, dtype=np.float64)
    if len(matches) == 0:
        return GuidancePoints(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    gx, gy = gradient(fixed_img)
    score_map = np.abs(gx) + np.abs(gy)
    h, w = fixed_img.shape
    ix = np.clip(np.rint(matches.fixed[:, 0]).astype(np.intp), 0, w - 1)
    iy = np.clip(np.rint(matches.fixed[:, 1]).astype(np.intp), 0, h - 1)
    scores = score_map[iy, ix]
    order = np.argsort(-scores, kind="stable")[: min(k, len(matches))]
    return GuidancePoints(matches.moving[order].copy(), matches.fixed[order].copy(), scores[order])


def _smooth_l1(r, beta=1.0):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)


def _smooth_l1_grad(r, beta=1.0):
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


def position_residuals(gp, phi):
    """``p_f + phi(p_f) - p_m`` for every guidance pair."""
    return gp.p_f + interpolate_field(phi, gp.p_f) - gp.p_m


def position_loss(gp, phi):
    """Smooth-l1 distance between transferred fixed points and their moving partners.

    Summed over x and y, averaged over points. Empty guidance gives 0 and a
    :class:`RuntimeWarning`.
    """
    if len(gp) == 0:
        warnings.warn("position loss evaluated with no guidance points", RuntimeWarning, stacklevel=2)
        return 0.0
    r = position_residuals(gp, phi)
    return float(np.sum(_smooth_l1(r)) / len(gp))


def position_loss_grad(gp, phi):
    """Position loss and its gradient with respect to ``(u, v)``."""
    h, w = phi.shape
    gu = np.zeros(h * w)
    gv = np.zeros(h * w)
    if len(gp) == 0:
        return 0.0, gu.reshape(h, w), gv.reshape(h, w)
    r = position_residuals(gp, phi)
    value = float(np.sum(_smooth_l1(r)) / len(gp))
    g = _smooth_l1_grad(r) / len(gp)
    idx, wts = bilinear_weights(gp.p_f, w, h)
    np.add.at(gu, idx.ravel(), (wts * g[:, :1]).ravel())
    np.add.at(gv, idx.ravel(), (wts * g[:, 1:]).ravel())
    return value, gu.reshape(h, w), gv.reshape(h, w)
