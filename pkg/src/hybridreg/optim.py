"""Instance-wise deformable registration: Adam on a dense field, coarse to fine."""

import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .edgeloss import NCC_WINDOW, canny_adaptive
from .exceptions import DivergenceError
from .field import DisplacementField, upsample_field
from .guidance import (
    DEFAULT_ROW_SAMPLE,
    DEFAULT_STRIDE,
    DEFAULT_TOP_K,
    build_affinity_gt,
    select_guidance_points,
)
from .matching import MatchSet
from .objective import LossWeights, Objective
from .raster import build_pyramid, level_coords


@dataclass
class OptimConfig:
    """Solver settings. ``iters_per_level`` and step sizes run coarsest to finest."""

    levels: int = 3
    iters_per_level: tuple = (200, 150, 100)
    step_size: float = 0.5
    step_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    row_sample: int = DEFAULT_ROW_SAMPLE
    stride: int = DEFAULT_STRIDE
    window: int = NCC_WINDOW
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.iters_per_level = tuple(int(i) for i in self.iters_per_level)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if any(i < 1 for i in self.iters_per_level):
            raise ValueError("iterations per level must be >= 1")

    def iterations(self, level):
        """Iterations for pyramid level ``level`` (0 = coarsest)."""
        its = self.iters_per_level
        if len(its) >= self.levels:
            return its[len(its) - self.levels + level]
        return its[min(level, len(its) - 1)]

    def learning_rate(self, level):
        return self.step_size * self.step_decay**level

    def to_dict(self):
        d = asdict(self)
        d["iters_per_level"] = list(self.iters_per_level)
        return d


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Raises ``DivergenceError`` on non-finite gradients.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ValueError(f"gradient shape {grads.shape} does not match parameters {np.shape(params)}")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("gradient", "non-finite gradient passed to adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


@dataclass
class OptimTrace:
    """Per-iteration losses plus per-level summaries."""

    total: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    level_of_iter: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.total)

    def summary(self):
        return {
            "iterations": len(self.total),
            "levels": self.levels,
            "final_total": self.total[-1] if self.total else None,
            "final_terms": self.terms[-1] if self.terms else None,
            "warnings": list(self.warnings),
        }

    def to_csv(self, path):
        keys = sorted(self.terms[0]) if self.terms else []
        lines = [",".join(["iteration", "level", "total"] + keys)]
        for k, (tot, lvl, terms) in enumerate(zip(self.total, self.level_of_iter, self.terms)):
            lines.append(",".join([str(k), str(lvl), repr(tot)] + [repr(terms[c]) for c in keys]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _level_matches(matches, k):
    if len(matches) == 0:
        return matches
    return MatchSet(level_coords(matches.moving, k), level_coords(matches.fixed, k), matches.source, matches.scores)


def _in_bounds(matches, shape):
    if len(matches) == 0:
        return matches
    h, w = shape
    pts = np.concatenate([matches.moving, matches.fixed], axis=1)
    ok = (pts[:, [0, 2]] >= 0).all(1) & (pts[:, [0, 2]] <= w - 1).all(1)
    ok &= (pts[:, [1, 3]] >= 0).all(1) & (pts[:, [1, 3]] <= h - 1).all(1)
    return matches.subset(ok)


def build_level_objective(fixed, moving, matches, cfg, k, top_k=None):
    """Objective for an image pair already at its pyramid resolution.

    ``k`` is the number of halvings from the finest level. Matches are
    mapped to the level's grid; the affinity cell size stays ``cfg.stride``
    pixels of the level, so coarse levels use coarser grids.
    """
    stride = cfg.stride
    lvl_matches = _in_bounds(_level_matches(matches, k), fixed.shape)
    guidance = None
    affinity = None
    if len(lvl_matches):
        guidance = select_guidance_points(lvl_matches, fixed, top_k or cfg.top_k)
        h, w = fixed.shape
        affinity = build_affinity_gt(lvl_matches, (w, h), stride)
    mask = canny_adaptive(fixed) if min(fixed.shape) >= 16 else None
    return Objective(fixed, moving, mask, guidance, affinity, cfg.weights, cfg.window, stride,
                     cfg.row_sample, cfg.seed + k)


def register_deformable(fixed, moving_global, matches, cfg=None, callback=None):
    """Minimize the composite objective over a dense displacement field.

    Parameters
    ----------
    fixed, moving_global : ndarray
        Same-shape images; ``moving_global`` is the moving image after the
        global (homography) stage.
    matches : MatchSet
        Correspondences expressed in the globally registered frame.
    cfg : OptimConfig
    callback : callable, optional
        Called as ``callback(level, iteration, total, breakdown)``.

    Returns
    -------
    phi : DisplacementField
        Finest-level field in pull convention on the fixed grid.
    trace : OptimTrace
    """
    cfg = cfg or OptimConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving_global = np.asarray(moving_global, dtype=np.float64)
    if fixed.shape != moving_global.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving_global.shape} differ in shape")
    matches = matches if matches is not None else MatchSet.empty()
    trace = OptimTrace()
    if len(matches) == 0:
        trace.warnings.append("no matches: affinity and position terms inactive")
        warnings.warn("register_deformable called without matches; guidance terms disabled", RuntimeWarning,
                      stacklevel=2)

    pyr_f = build_pyramid(fixed, cfg.levels)
    pyr_m = build_pyramid(moving_global, cfg.levels)
    phi = None
    for level in range(cfg.levels):
        k = cfg.levels - 1 - level
        f_img, m_img = pyr_f[level], pyr_m[level]
        h, w = f_img.shape
        if phi is None:
            phi = DisplacementField.zeros(w, h)
        else:
            phi = upsample_field(phi, 2, shape=(h, w))
        obj = build_level_objective(f_img, m_img, matches, cfg, k)
        lr = cfg.learning_rate(level)
        params = np.stack([phi.u, phi.v])
        state = AdamState.like(params)
        t0 = time.perf_counter()
        n_iter = cfg.iterations(level)
        initial = None
        best = None
        for it in range(n_iter):
            total, breakdown, gu, gv = obj.evaluate(DisplacementField(params[0], params[1]))
            if initial is None:
                initial = total
            if best is None or total <= best[0]:
                best = (total, params.copy())
            trace.total.append(total)
            trace.terms.append(breakdown)
            trace.level_of_iter.append(level)
            if callback is not None:
                callback(level, it, total, breakdown)
            params, state = adam_step(params, np.stack([gu, gv]), state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            if not np.all(np.isfinite(params)):
                raise DivergenceError("field", "displacement field became non-finite")
        final_total = obj.value(DisplacementField(params[0], params[1]))
        if final_total > best[0]:
            # keep the best iterate so the level never ends above its start
            final_total, params = best
        phi = DisplacementField(params[0], params[1])
        trace.levels.append({
            "level": level,
            "shape": [w, h],
            "iterations": n_iter,
            "learning_rate": lr,
            "initial_loss": float(initial),
            "final_loss": float(final_total),
            "active_terms": obj.active_terms,
            "seconds": time.perf_counter() - t0,
        })
    return phi, trace
