"""The composite deformable objective and its gradient with respect to the field.

``total = L_affinity + lambda_position * L_position + lambda_encc * L_encc
+ lambda_smooth * L_smooth``. Image-based terms are differentiated through
the bilinear pull warp, so their field gradient is the image gradient times
the sampled moving-image derivative.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .edgeloss import NCC_WINDOW, encc_loss_grad, smoothness_loss_grad
from .exceptions import DivergenceError
from .field import warp_field_with_grad
from .guidance import (
    DEFAULT_ROW_SAMPLE,
    DEFAULT_STRIDE,
    affinity_loss_grad,
    build_feature_grid,
    position_loss_grad,
    select_affinity_rows,
)

TERMS = ("affinity", "position", "encc", "smooth")


@dataclass(frozen=True)
class LossWeights:
    """Term weights; the affinity term always has weight 1."""

    position: float = 5.0
    encc: float = 2.0
    smooth: float = 1.0

    def as_dict(self):
        return asdict(self)


class Objective:
    """Loss and field gradient for one fixed/moving pair at one resolution.

    Parameters
    ----------
    fixed, moving : ndarray
        Fixed image and the (globally registered) moving image, same shape.
    edge_mask : ndarray or None
        Binary mask on the fixed grid weighting the NCC term.
    guidance : GuidancePoints or None
        Position supervision; ``None`` or empty disables the term.
    affinity : AffinityMap or None
        Affinity target; ``None`` or an empty map disables the term.
    """

    def __init__(self, fixed, moving, edge_mask=None, guidance=None, affinity=None, weights=None,
                 window=NCC_WINDOW, stride=DEFAULT_STRIDE, row_sample=DEFAULT_ROW_SAMPLE, seed=0):
        self.fixed = np.asarray(fixed, dtype=np.float64)
        self.moving = np.asarray(moving, dtype=np.float64)
        if self.fixed.shape != self.moving.shape:
            raise ValueError(f"fixed {self.fixed.shape} and moving {self.moving.shape} differ in shape")
        self.edge_mask = edge_mask
        self.guidance = guidance if guidance is not None and len(guidance) else None
        self.weights = weights or LossWeights()
        self.window = window
        self.affinity = affinity if affinity is not None and len(affinity.moving_cells) else None
        if self.affinity is not None:
            self.fg_fixed = build_feature_grid(self.fixed, stride)
            self.rows = select_affinity_rows(self.affinity, row_sample, seed)
            self.target_rows = self.affinity.rows(self.rows)

    @property
    def active_terms(self):
        return {
            "affinity": self.affinity is not None,
            "position": self.guidance is not None,
            "encc": True,
            "smooth": True,
        }

    def evaluate(self, phi):
        """Return ``(total, breakdown, grad_u, grad_v)``.

        ``breakdown`` maps each term to its raw value and to the weighted
        contribution under ``"<term>_weighted"``.
        """
        h, w = self.fixed.shape
        warped, dx, dy = warp_field_with_grad(self.moving, phi)
        raw = {}
        gu = np.zeros((h, w))
        gv = np.zeros((h, w))
        lam = {"affinity": 1.0, "position": self.weights.position,
               "encc": self.weights.encc, "smooth": self.weights.smooth}

        img_grad = np.zeros((h, w))
        if self.affinity is not None:
            val, g = affinity_loss_grad(warped, self.fg_fixed, self.affinity, self.rows, self.target_rows)
            _check_finite("affinity", val, g)
            raw["affinity"] = val
            img_grad += lam["affinity"] * g
        else:
            raw["affinity"] = 0.0

        val, g = encc_loss_grad(self.fixed, warped, self.edge_mask, self.window)
        _check_finite("encc", val, g)
        raw["encc"] = val
        img_grad += lam["encc"] * g
        gu += img_grad * dx
        gv += img_grad * dy

        if self.guidance is not None:
            val, pu, pv = position_loss_grad(self.guidance, phi)
            _check_finite("position", val, pu, pv)
            raw["position"] = val
            gu += lam["position"] * pu
            gv += lam["position"] * pv
        else:
            raw["position"] = 0.0

        val, su, sv = smoothness_loss_grad(phi)
        _check_finite("smooth", val, su, sv)
        raw["smooth"] = val
        gu += lam["smooth"] * su
        gv += lam["smooth"] * sv

        breakdown = {}
        total = 0.0
        for term in TERMS:
            breakdown[term] = float(raw[term])
            breakdown[f"{term}_weighted"] = float(lam[term] * raw[term])
            total += lam[term] * raw[term]
        breakdown["total"] = float(total)
        return float(total), breakdown, gu, gv

    def value(self, phi):
        return self.evaluate(phi)[0]


def _check_finite(term, value, *grads):
    if not np.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(term)


def total_loss(fixed, warped_moving, phi, edge_mask=None, guidance=None, affinity=None, weights=None,
               window=NCC_WINDOW, stride=DEFAULT_STRIDE, row_sample=DEFAULT_ROW_SAMPLE, seed=0):
    """Composite loss for an already-warped moving image.

    ``warped_moving`` is treated as the warp result; ``phi`` enters only the
    position and smoothness terms. Returns ``(value, breakdown)``.
    """
    obj = Objective(fixed, warped_moving, edge_mask, guidance, affinity, weights, window, stride, row_sample, seed)
    warped = obj.moving
    raw = {}
    if obj.affinity is not None:
        raw["affinity"] = affinity_loss_grad(warped, obj.fg_fixed, obj.affinity, obj.rows, obj.target_rows)[0]
    else:
        raw["affinity"] = 0.0
    raw["encc"] = encc_loss_grad(obj.fixed, warped, edge_mask, window)[0]
    raw["position"] = position_loss_grad(obj.guidance, phi)[0] if obj.guidance is not None else 0.0
    raw["smooth"] = smoothness_loss_grad(phi)[0]
    lam = {"affinity": 1.0, "position": obj.weights.position, "encc": obj.weights.encc, "smooth": obj.weights.smooth}
    breakdown = {}
    total = 0.0
    for term in TERMS:
        breakdown[term] = float(raw[term])
        breakdown[f"{term}_weighted"] = float(lam[term] * raw[term])
        total += lam[term] * raw[term]
    breakdown["total"] = float(total)
    breakdown["weights"] = {"affinity": 1.0, **obj.weights.as_dict()}
    return float(total), breakdown
