"""End-to-end registration: global homography stage, then deformable refinement.

The composite transform takes a fixed-frame point ``p`` to the moving frame
as ``H^-1(p + phi(p))``, with ``H`` mapping moving to fixed coordinates and
``phi`` the deformable field on the fixed grid.
"""

import csv
import json
import os
import platform
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import PairResult, accepted, render_checkerboard, rmse, summarize
from .exceptions import DivergenceError, InsufficientDataError, RansacFailure
from .field import DisplacementField, jacobian_stats, save_field, warp_points
from .homography import Homography, ransac_homography
from .matching import MatchSet, builtin_matches, load_matches
from .objective import LossWeights
from .optim import OptimConfig, register_deformable
from .raster import bilinear, load_image, resize, save_png
from .synth import SynthConfig, make_pair, save_pair

THREADS_ENV = "HYBRIDREG_THREADS"

STAGE_OK = "ok"
STAGE_GLOBAL_FAILED = "global_failed"
STAGE_DEFORM_FAILED = "deform_failed"


@dataclass
class RunConfig:
    """Everything that determines a registration run; echoed into every report."""

    resolution: int = 768
    seed: int = 0
    detector: str = "builtin"
    max_points: int = 500
    nms_radius: int = 4
    ratio: float = 0.9
    ransac_thresh: float = 3.0
    ransac_iters: int = 2000
    guidance_max_residual: float = 10.0
    checker_tile: int = 0
    write_trace_csv: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.detector not in ("builtin", "file"):
            raise ValueError(f"detector must be 'builtin' or 'file', got {self.detector!r}")

    def to_dict(self):
        d = asdict(self)
        d["optim"] = self.optim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        optim = dict(d.pop("optim", {}) or {})
        if "weights" in optim and isinstance(optim["weights"], dict):
            optim["weights"] = LossWeights(**optim["weights"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(optim=OptimConfig(**optim), **d)

    def with_overrides(self, overrides):
        """Return a copy with dotted-key overrides, e.g. ``{"optim.weights.smooth": 2.0}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = _coerce(value, node[parts[-1]])
        return RunConfig.from_dict(d)


def _coerce(value, current):
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, (list, tuple)):
        return [type(current[0])(v) if current else float(v) for v in value.replace(",", " ").split()]
    return value


def load_config(path):
    """Read a JSON config, or ``key=value`` lines with dotted keys, into a :class:`RunConfig`."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        doc = json.loads(stripped)
        return RunConfig.from_dict(doc.get("config", doc))
    overrides = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        overrides[k.strip()] = v.strip()
    return RunConfig().with_overrides(overrides)


def thread_cap():
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            warnings.warn(f"ignoring non-integer {THREADS_ENV}={value!r}", RuntimeWarning, stacklevel=2)
    return max(1, os.cpu_count() or 1)


def scale_points(points, src_size, dst_size):
    """Map pixel coordinates between image sizes with the corner-aligned resize convention."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    (sw, sh), (dw, dh) = src_size, dst_size
    fx = (dw - 1) / (sw - 1) if sw > 1 else 1.0
    fy = (dh - 1) / (sh - 1) if sh > 1 else 1.0
    return pts * np.array([fx, fy])


@dataclass
class RegistrationResult:
    """In-memory outcome of one registration at working resolution."""

    stage: str
    homography: Homography = None
    ransac: object = None
    matches: MatchSet = None
    guidance_matches: MatchSet = None
    phi: DisplacementField = None
    trace: object = None
    moving_global: np.ndarray = None
    warped: np.ndarray = None
    error: str = ""

    def transfer(self, points_fixed, deformable=True):
        """Fixed-frame points to moving-frame coordinates through the fitted transform."""
        pts = np.asarray(points_fixed, dtype=np.float64).reshape(-1, 2)
        if deformable and self.phi is not None:
            pts = warp_points(pts, self.phi)
        return self.homography.inverse().apply(pts)


def compose_warp(moving, h, phi):
    """Single-interpolation warp of ``moving`` through ``H^-1(p + phi(p))``."""
    hgt, wid = phi.shape
    yy, xx = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    pts = np.stack([(xx + phi.u).ravel(), (yy + phi.v).ravel()], axis=1)
    src = h.inverse().apply(pts)
    return bilinear(moving, src[:, 0].reshape(hgt, wid), src[:, 1].reshape(hgt, wid))


def register_arrays(fixed, moving, cfg=None, matches=None):
    """Register two same-size images already at working resolution.

    ``matches`` (moving -> fixed, working coordinates) overrides the built-in
    detector. Failures are reported through ``stage`` rather than raised.
    """
    from .homography import warp_homography

    cfg = cfg or RunConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if matches is None:
        matches = builtin_matches(moving, fixed, cfg.max_points, cfg.nms_radius, cfg.ratio)
    result = RegistrationResult(stage=STAGE_OK, matches=matches)
    try:
        rr = ransac_homography(matches, cfg.ransac_thresh, cfg.ransac_iters, seed=cfg.seed)
    except (InsufficientDataError, RansacFailure) as exc:
        result.stage = STAGE_GLOBAL_FAILED
        result.error = str(exc)
        return result
    result.ransac = rr
    result.homography = rr.h
    moving_global = warp_homography(moving, rr.h)
    result.moving_global = moving_global

    # guidance lives in the globally registered frame
    registered = matches.with_moving(rr.h.apply(matches.moving))
    resid = np.linalg.norm(registered.moving - registered.fixed, axis=1)
    guidance = registered.subset(resid < cfg.guidance_max_residual)
    result.guidance_matches = guidance
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            phi, trace = register_deformable(fixed, moving_global, guidance, cfg.optim)
    except DivergenceError as exc:
        result.stage = STAGE_DEFORM_FAILED
        result.error = f"{exc} (term: {exc.term})"
        return result
    result.phi = phi
    result.trace = trace
    result.warped = compose_warp(moving, rr.h, phi)
    return result


def _read_points(path):
    doc = json.loads(Path(path).read_text())
    return doc.get("frame"), np.asarray(doc["fixed"], dtype=np.float64), np.asarray(doc["moving"], dtype=np.float64)


def _finite(x):
    return float(x) if x is not None and np.isfinite(x) else None


def build_report(result, cfg, extra=None):
    rep = {
        "stage": result.stage,
        "error": result.error,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {"hybridreg": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "matches": {
            "count": len(result.matches) if result.matches is not None else 0,
            "source": result.matches.source if result.matches is not None else None,
            "guidance_count": len(result.guidance_matches) if result.guidance_matches is not None else 0,
        },
    }
    if result.homography is not None:
        rep["homography"] = result.homography.to_list()
        rep["ransac"] = {"inliers": result.ransac.inlier_count, "iterations": result.ransac.iterations_used,
                         "threshold": cfg.ransac_thresh}
    if result.trace is not None:
        summary = result.trace.summary()
        # wall time stays out of the report so reruns are byte-identical
        summary["levels"] = [{k: v for k, v in lvl.items() if k != "seconds"} for lvl in summary["levels"]]
        rep["optim"] = summary
        min_det, fold = jacobian_stats(result.phi)
        rep["field"] = {"min_jacobian_det": min_det, "folding_fraction": fold,
                        "mean_abs_displacement": float(result.phi.magnitude().mean())}
    if extra:
        rep.update(extra)
    return rep


def register_pair(fixed_path, moving_path, cfg=None, matches=None, points=None, out_dir=None, pair_id=None):
    """Load, resize, register and (optionally) evaluate one pair; write artifacts.

    Returns the report dict. Artifacts in ``out_dir``: ``warped.png``,
    ``field.hrfd``, ``checkerboard.png`` and ``report.json``.

    Raises
    ------
    OSError, FormatError
        Unreadable inputs; raised before anything is written.
    """
    cfg = cfg or RunConfig()
    fixed_o = load_image(fixed_path)
    moving_o = load_image(moving_path)
    res = cfg.resolution
    if res:
        fixed = resize(fixed_o, res, res)
        moving = resize(moving_o, res, res)
    else:
        fixed, moving = fixed_o, moving_o
        if fixed.shape != moving.shape:
            moving = resize(moving, fixed.shape[1], fixed.shape[0])
    h, w = fixed.shape
    ms = load_matches(matches, (w, h)) if matches else None
    if ms is None and cfg.detector == "file":
        raise ValueError("detector='file' requires a match file")

    result = register_arrays(fixed, moving, cfg, ms)
    extra = {"pair_id": pair_id or Path(moving_path).stem, "fixed": str(fixed_path), "moving": str(moving_path)}
    if points and result.stage == STAGE_OK:
        frame, pf, pm = _read_points(points)
        fh_o, fw_o = fixed_o.shape
        mh_o, mw_o = moving_o.shape
        pf_w = scale_points(pf, (fw_o, fh_o), (w, h))
        back = lambda q: scale_points(q, (w, h), (mw_o, mh_o))  # noqa: E731
        glob = back(result.transfer(pf_w, deformable=False))
        final = back(result.transfer(pf_w, deformable=True))
        r_g, r_f = rmse(pm, glob), rmse(pm, final)
        extra.update({"rmse_global": r_g, "rmse_final": r_f, "accepted": accepted(r_f)})
    report = build_report(result, cfg, extra)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if result.stage == STAGE_OK:
            save_png(out / "warped.png", np.clip(result.warped, 0, 1))
            save_field(out / "field.hrfd", result.phi)
            tile = cfg.checker_tile or max(8, w // 8)
            save_png(out / "checkerboard.png", render_checkerboard(fixed, np.clip(result.warped, 0, 1), tile))
            if cfg.write_trace_csv:
                result.trace.to_csv(out / "trace.csv")
            timing = {f"level_{lv['level']}": lv["seconds"] for lv in result.trace.levels}
            (out / "timing.json").write_text(json.dumps(timing, indent=1))
        elif result.stage == STAGE_DEFORM_FAILED and result.homography is not None:
            save_png(out / "warped_global.png", np.clip(result.moving_global, 0, 1))
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


MANIFEST_COLUMNS = ("fixed", "moving", "matches", "points", "category", "pair_id")


def read_manifest(path):
    """Rows of a manifest CSV with columns ``fixed, moving[, matches, points, category, pair_id]``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"fixed", "moving"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs a header with at least 'fixed' and 'moving'")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: manifest has no rows")
    base = path.parent
    out = []
    for k, row in enumerate(rows):
        rec = {c: (row.get(c) or "").strip() for c in MANIFEST_COLUMNS}
        for c in ("fixed", "moving", "matches", "points"):
            if rec[c] and not Path(rec[c]).is_absolute():
                rec[c] = str(base / rec[c])
        rec["pair_id"] = rec["pair_id"] or f"pair_{k:04d}"
        out.append(rec)
    return out


def _run_row(args):
    row, cfg_dict, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        if not row["fixed"] or not row["moving"]:
            raise ValueError("row lacks fixed or moving path")
        rep = register_pair(row["fixed"], row["moving"], cfg, row["matches"] or None, row["points"] or None,
                            Path(out_dir) / row["pair_id"], row["pair_id"])
        return {"row": row, "report": rep, "error": None}
    except Exception as exc:  # row-level failures are recorded, the batch continues
        return {"row": row, "report": None, "error": f"{type(exc).__name__}: {exc}"}


def run_batch(manifest, cfg=None, out_dir="batch_out", threads=None):
    """Register every manifest row and aggregate metrics where ground truth exists.

    Writes ``batch.json`` and ``summary.csv`` into ``out_dir``. Returns
    ``(BatchResult, outcomes)`` where ``outcomes`` lists per-row dicts in
    manifest order.
    """
    cfg = cfg or RunConfig()
    rows = read_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(row, cfg.to_dict(), str(out)) for row in rows]
    n_workers = min(threads or thread_cap(), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_run_row, jobs))
    else:
        outcomes = [_run_row(j) for j in jobs]

    pair_results = []
    errors = []
    for oc in outcomes:
        rep, row = oc["report"], oc["row"]
        if oc["error"]:
            errors.append({"pair_id": row["pair_id"], "error": oc["error"]})
            continue
        if rep["stage"] != STAGE_OK:
            errors.append({"pair_id": row["pair_id"], "error": f"{rep['stage']}: {rep['error']}"})
            continue
        if "rmse_final" in rep:
            pair_results.append(PairResult(row["pair_id"], rep["rmse_global"], rep["rmse_final"],
                                           category=row["category"]))
    batch = summarize(pair_results, errors)
    doc = batch.to_dict()
    doc["n_rows"] = len(rows)
    doc["n_failed"] = len(errors)
    doc["sources"] = {oc["row"]["pair_id"]: (oc["report"] or {}).get("matches", {}).get("source")
                      for oc in outcomes}
    (out / "batch.json").write_text(json.dumps(doc, indent=1))
    batch.write_csv(out / "summary.csv")
    return batch, outcomes


def _check_writable(out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


IMAGE_SUFFIXES = (".png", ".pgm")


def synth_dataset(src_dir, n_pairs, out_dir, resolution=256, seed=0, synth_cfg=None):
    """Generate ``n_pairs`` synthetic bundles from images in ``src_dir`` (round-robin).

    Returns the path of the written ``manifest.csv``.
    """
    out = _check_writable(out_dir)
    sources = sorted(p for p in Path(src_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not sources:
        raise ValueError(f"{src_dir}: no PNG/PGM source images")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    synth_cfg = synth_cfg or SynthConfig()
    cache = {}
    lines = [list(MANIFEST_COLUMNS)]
    for i in range(n_pairs):
        src_path = sources[i % len(sources)]
        if src_path not in cache:
            img = load_image(src_path)
            cache[src_path] = resize(img, resolution, resolution) if resolution else img
        pair = make_pair(cache[src_path], seed + i, synth_cfg)
        name = f"pair_{i:04d}"
        save_pair(pair, out / name, {"source": src_path.name, "source_index": i % len(sources)})
        lines.append([f"{name}/fixed.png", f"{name}/moving.png", "", f"{name}/points.json", "synthetic", name])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        csv.writer(fh).writerows(lines)
    return manifest


def collect_results(paths):
    """PairResults from ``report.json`` files, directories containing them, or summary CSVs."""
    results = []
    for p in map(Path, paths):
        if p.is_dir():
            files = sorted(p.rglob("report.json"))
        else:
            files = [p]
        for f in files:
            if f.suffix == ".csv":
                with open(f, newline="") as fh:
                    for row in csv.DictReader(fh):
                        results.append(PairResult(row["pair_id"], float(row["rmse_global"]),
                                                  float(row["rmse_final"]), category=row.get("category", "")))
                continue
            rep = json.loads(f.read_text())
            if "pairs" in rep:
                for pr in rep["pairs"]:
                    results.append(PairResult(pr["pair_id"], pr["rmse_global"], pr["rmse_final"],
                                              category=pr.get("category", "")))
            elif "rmse_final" in rep:
                results.append(PairResult(rep.get("pair_id", f.parent.name), rep["rmse_global"], rep["rmse_final"]))
    return results
