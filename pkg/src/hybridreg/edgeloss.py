"""Edge attention and image similarity terms.

The edge mask comes from an adaptive-threshold Canny detector on the fixed
image and only reweights the windowed NCC similarity. Window sums use
summed-area tables over an edge-replicated image, so each evaluation is
linear in the pixel count whatever the window size. Every loss has a
``*_grad`` twin returning the derivative with respect to the warped image
(or the field, for smoothness).
"""

import numpy as np
from scipy import ndimage

from ._validation import check_odd_window, check_same_shape

NCC_EPS = 1e-8
NCC_WINDOW = 15


def canny_adaptive(img, sigma=1.4, low_ratio=0.66, high_ratio=1.33):
    """Binary edge mask (uint8, values 0/1) with thresholds tied to the median gradient.

    Thresholds are ``low_ratio`` and ``high_ratio`` times the median Sobel
    magnitude of the blurred image; pixels with zero magnitude are never edges.
    """
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape) < 16:
        raise ValueError("canny_adaptive needs an image of at least 16x16")
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    med = float(np.median(mag))
    low, high = low_ratio * med, high_ratio * med

    # quantize direction to 0/45/90/135 degrees and compare along it
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    pad = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    center = pad[1:-1, 1:-1]

    def shifted(dy, dx):
        return pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    thin = np.zeros_like(mag, dtype=bool)
    for sel, (dy, dx) in sectors:
        # ties broken towards the lower/left neighbour so plateaus stay one pixel wide
        keep = (center > shifted(-dy, -dx)) & (center >= shifted(dy, dx))
        thin |= sel & keep
    thin &= mag > 0.0

    strong = thin & (mag >= high)
    weak = thin & (mag >= low)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels].astype(np.uint8)


def _box1(x, r, axis):
    # sliding sum of width 2r+1 over the edge-padded axis
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r + 1, r)
    p = np.pad(x, pad, mode="edge")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(0, 1)
    p[tuple(idx)] = 0.0
    c = np.cumsum(p, axis=axis)
    hi = [slice(None)] * x.ndim
    lo = [slice(None)] * x.ndim
    hi[axis] = slice(2 * r + 1, 2 * r + 1 + n)
    lo[axis] = slice(0, n)
    return c[tuple(hi)] - c[tuple(lo)]


def _box1_adjoint(g, r, axis):
    n = g.shape[axis]
    w = 2 * r + 1
    # spread each output over its window in padded coordinates (length n + 2r)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (w, w - 1)
    c = np.cumsum(np.pad(g, pad, mode="constant"), axis=axis)
    hi = [slice(None)] * g.ndim
    lo = [slice(None)] * g.ndim
    hi[axis] = slice(w, w + n + 2 * r)
    lo[axis] = slice(0, n + 2 * r)
    gp = c[tuple(hi)] - c[tuple(lo)]
    # fold replicated border samples back onto the edge pixels
    take = [slice(None)] * g.ndim
    take[axis] = slice(r, r + n)
    out = gp[tuple(take)].copy()
    first = [slice(None)] * g.ndim
    last = [slice(None)] * g.ndim
    first[axis] = slice(0, r)
    last[axis] = slice(r + n, n + 2 * r)
    o0 = [slice(None)] * g.ndim
    o1 = [slice(None)] * g.ndim
    o0[axis] = slice(0, 1)
    o1[axis] = slice(n - 1, n)
    out[tuple(o0)] += gp[tuple(first)].sum(axis=axis, keepdims=True)
    out[tuple(o1)] += gp[tuple(last)].sum(axis=axis, keepdims=True)
    return out


def box_sum(x, w):
    """Sum over the ``w`` x ``w`` window centred at each pixel, borders clamped."""
    r = w // 2
    return _box1(_box1(x, r, 0), r, 1)


def box_sum_adjoint(g, w):
    r = w // 2
    return _box1_adjoint(_box1_adjoint(g, r, 1), r, 0)


def _ncc_parts(fixed, warped, w):
    # inputs are centred by the caller; this keeps flat windows exactly zero
    n = float(w * w)
    sf = box_sum(fixed, w)
    st = box_sum(warped, w)
    cross = box_sum(fixed * warped, w) - sf * st / n
    var_f = box_sum(fixed * fixed, w) - sf * sf / n
    var_t = box_sum(warped * warped, w) - st * st / n
    denom = var_f * var_t + NCC_EPS
    return sf, st, cross, var_f, var_t, denom


def local_ncc_map(fixed, warped, w=NCC_WINDOW):
    """Squared local correlation coefficient in ``w`` x ``w`` windows.

    Flat windows yield 0 through the ``NCC_EPS`` guard on the denominator.
    """
    w = check_odd_window(w)
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    check_same_shape(fixed, warped, ("fixed", "warped"))
    _, _, cross, _, _, denom = _ncc_parts(fixed - fixed.mean(), warped - warped.mean(), w)
    return cross * cross / denom


def _edge_weights(edge_mask, shape):
    if edge_mask is None:
        return np.ones(shape)
    em = np.asarray(edge_mask)
    if em.shape != shape:
        raise ValueError(f"edge mask shape {em.shape} does not match image shape {shape}")
    return 1.0 + em.astype(np.float64)


def ncc_loss(fixed, warped, w=NCC_WINDOW):
    """Plain windowed NCC objective, ``-mean(ncc^2)``."""
    ncc2 = local_ncc_map(fixed, warped, w)
    return -(np.sum(ncc2) / ncc2.size)


def encc_loss(fixed, warped, edge_mask, w=NCC_WINDOW):
    """Edge-weighted NCC: ``-sum((1 + E) ncc^2) / sum(1 + E)``, a value in [-1, 0]."""
    ncc2 = local_ncc_map(fixed, warped, w)
    weights = _edge_weights(edge_mask, ncc2.shape)
    return -(np.sum(weights * ncc2) / np.sum(weights))


def encc_loss_grad(fixed, warped, edge_mask, w=NCC_WINDOW):
    """ENCC value and its derivative with respect to every warped-image pixel."""
    w = check_odd_window(w)
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    check_same_shape(fixed, warped, ("fixed", "warped"))
    n = float(w * w)
    # NCC ignores global offsets; the gradient is the same for the centred image
    fixed = fixed - fixed.mean()
    warped = warped - warped.mean()
    sf, st, cross, var_f, var_t, denom = _ncc_parts(fixed, warped, w)
    ncc2 = cross * cross / denom
    weights = _edge_weights(edge_mask, ncc2.shape)
    total_w = np.sum(weights)
    value = -(np.sum(weights * ncc2) / total_w)

    scale = -weights / total_w
    g_cross = scale * 2.0 * cross / denom
    g_var_t = -scale * cross * cross * var_f / (denom * denom)
    # cross = S(F T) - S(F) S(T) / n ;  var_t = S(T^2) - S(T)^2 / n
    g_st = -(g_cross * sf + 2.0 * g_var_t * st) / n
    grad = (
        fixed * box_sum_adjoint(g_cross, w)
        + 2.0 * warped * box_sum_adjoint(g_var_t, w)
        + box_sum_adjoint(g_st, w)
    )
    return value, grad


def smoothness_loss(phi):
    """Mean squared forward differences of both field components along x and y."""
    return smoothness_loss_grad(phi)[0]


def smoothness_loss_grad(phi):
    """Smoothness value and its gradient with respect to ``(u, v)``."""
    u, v = phi.u, phi.v
    if min(u.shape) < 2:
        raise ValueError("smoothness needs a field of at least 2x2")
    h, w = u.shape
    nx = h * (w - 1)
    ny = (h - 1) * w
    value = 0.0
    grads = []
    for comp in (u, v):
        dx = comp[:, 1:] - comp[:, :-1]
        dy = comp[1:, :] - comp[:-1, :]
        value += np.sum(dx * dx) / nx + np.sum(dy * dy) / ny
        g = np.zeros_like(comp)
        gx = 2.0 * dx / nx
        gy = 2.0 * dy / ny
        g[:, 1:] += gx
        g[:, :-1] -= gx
        g[1:, :] += gy
        g[:-1, :] -= gy
        grads.append(g)
    return float(value), grads[0], grads[1]
