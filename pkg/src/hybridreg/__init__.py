"""Hybrid retinal image registration: RANSAC homography plus dense deformable refinement."""

__version__ = "0.1.0"

from .evaluation import BatchResult, PairResult, accepted, auc, render_checkerboard, rmse  # noqa: E402
from .field import DisplacementField, warp_field, warp_points  # noqa: E402
from .homography import Homography, ransac_homography, warp_homography  # noqa: E402
from .matching import MatchSet, builtin_matches, load_matches  # noqa: E402
from .objective import LossWeights, total_loss  # noqa: E402
from .optim import OptimConfig, register_deformable  # noqa: E402
from .pipeline import RunConfig, register_arrays, register_pair, run_batch, synth_dataset  # noqa: E402
from .synth import SynthConfig, make_pair  # noqa: E402

__all__ = [
    "BatchResult", "DisplacementField", "Homography", "LossWeights", "MatchSet", "OptimConfig",
    "PairResult", "RunConfig", "SynthConfig", "accepted", "auc", "builtin_matches", "load_matches",
    "make_pair", "ransac_homography", "register_arrays", "register_deformable", "register_pair",
    "render_checkerboard", "rmse", "run_batch", "synth_dataset", "total_loss", "warp_field",
    "warp_homography", "warp_points",
]
