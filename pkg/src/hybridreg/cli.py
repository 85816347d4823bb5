"""Command-line interface: ``hybridreg {register,batch,synth,eval,phantom}``.

Exit codes: 0 success, 1 usage or I/O error, 2 global-stage failure (or every
batch row failed), 3 deformable-stage failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import summarize
from .exceptions import FormatError
from .pipeline import (
    STAGE_DEFORM_FAILED,
    STAGE_GLOBAL_FAILED,
    RunConfig,
    collect_results,
    load_config,
    register_pair,
    run_batch,
    synth_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_GLOBAL = 2
EXIT_DEFORM = 3

log = logging.getLogger("hybridreg")

# flag -> dotted RunConfig key
RUN_FLAGS = {
    "resolution": ("resolution", int),
    "seed": ("seed", int),
    "detector": ("detector", str),
    "max_points": ("max_points", int),
    "nms_radius": ("nms_radius", int),
    "ratio": ("ratio", float),
    "ransac_thresh": ("ransac_thresh", float),
    "ransac_iters": ("ransac_iters", int),
    "guidance_max_residual": ("guidance_max_residual", float),
    "checker_tile": ("checker_tile", int),
    "levels": ("optim.levels", int),
    "step_size": ("optim.step_size", float),
    "step_decay": ("optim.step_decay", float),
    "stride": ("optim.stride", int),
    "window": ("optim.window", int),
    "top_k": ("optim.top_k", int),
    "row_sample": ("optim.row_sample", int),
    "lambda_position": ("optim.weights.position", float),
    "lambda_encc": ("optim.weights.encc", float),
    "lambda_smooth": ("optim.weights.smooth", float),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_options(p):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON or key=value file; explicit flags take precedence")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. optim.weights.smooth=2 (repeatable)")
    for name, (_, typ) in RUN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "detector":
            g.add_argument(flag, choices=("builtin", "file"))
        else:
            g.add_argument(flag, type=typ)
    g.add_argument("--iters", type=int, nargs="+", metavar="N", help="iterations per level, coarsest first")
    g.add_argument("--trace-csv", action="store_true", help="also write the per-iteration loss trace")


def config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for name, (key, _) in RUN_FLAGS.items():
        val = getattr(args, name, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "iters", None):
        overrides["optim.iters_per_level"] = list(args.iters)
    if getattr(args, "trace_csv", False):
        overrides["write_trace_csv"] = True
    return cfg.with_overrides(overrides) if overrides else cfg


def build_parser():
    parser = _Parser(prog="hybridreg", description="Hybrid homography + deformable retinal image registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="register one fixed/moving pair")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--matches", help="match file (moving -> fixed, JSON)")
    p.add_argument("--points", help="ground-truth control points JSON for RMSE")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pair-id")
    _add_run_options(p)

    p = sub.add_parser("batch", help="register every row of a manifest CSV")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, help="worker processes (capped by HYBRIDREG_THREADS otherwise)")
    _add_run_options(p)

    p = sub.add_parser("synth", help="generate synthetic pairs from source images")
    p.add_argument("src_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int, default=20)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--elastic-intensity", type=float, default=50.0)
    p.add_argument("--elastic-sigma", type=float, default=6.0)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--max-rot", type=float, default=15.0)
    p.add_argument("--max-trans", type=float, default=0.05)
    p.add_argument("--no-affine", action="store_true")
    p.add_argument("--no-elastic", action="store_true")

    p = sub.add_parser("eval", help="aggregate RMSE/Accept/AUC from reports or summary CSVs")
    p.add_argument("paths", nargs="+", help="report.json, batch.json, summary.csv or directories")
    p.add_argument("--out", help="write the BatchResult JSON here")
    p.add_argument("--csv", help="write a per-pair summary CSV here")

    p = sub.add_parser("phantom", help="write procedural fundus-like source images")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_register(args):
    if not Path(args.fixed).is_file() or not Path(args.moving).is_file():
        missing = [f for f in (args.fixed, args.moving) if not Path(f).is_file()]
        log.error("input image not found: %s", ", ".join(missing))
        return EXIT_USAGE
    cfg = config_from_args(args)
    report = register_pair(args.fixed, args.moving, cfg, args.matches, args.points, args.out, args.pair_id)
    line = {k: report.get(k) for k in ("pair_id", "stage", "rmse_global", "rmse_final") if k in report}
    print(json.dumps(line))
    if report["stage"] == STAGE_GLOBAL_FAILED:
        return EXIT_GLOBAL
    if report["stage"] == STAGE_DEFORM_FAILED:
        return EXIT_DEFORM
    return EXIT_OK


def _cmd_batch(args):
    cfg = config_from_args(args)
    batch, outcomes = run_batch(args.manifest, cfg, args.out, args.threads)
    print(json.dumps({"pairs": len(batch.pairs), "failed": len(batch.errors), "accept_rate": batch.accept_rate,
                      "auc": batch.auc, "auc_global": batch.auc_global}))
    if outcomes and len(batch.errors) == len(outcomes):
        return EXIT_GLOBAL
    return EXIT_OK


def _cmd_synth(args):
    from .synth import SynthConfig

    scfg = SynthConfig(max_rot=args.max_rot, max_trans=args.max_trans, elastic_intensity=args.elastic_intensity,
                       elastic_sigma=args.elastic_sigma, noise_sigma=args.noise_sigma,
                       affine=not args.no_affine, elastic=not args.no_elastic)
    manifest = synth_dataset(args.src_dir, args.n_pairs, args.out, args.resolution, args.seed, scfg)
    print(manifest)
    return EXIT_OK


def _cmd_eval(args):
    results = collect_results(args.paths)
    if not results:
        log.error("no evaluable results (need rmse_global and rmse_final) under %s", args.paths)
        return EXIT_USAGE
    batch = summarize(results)
    if args.out:
        batch.write_json(args.out)
    if args.csv:
        batch.write_csv(args.csv)
    print(json.dumps({"pairs": len(batch.pairs), "accept_rate": batch.accept_rate,
                      "accept_rate_global": batch.accept_rate_global, "auc": batch.auc,
                      "auc_global": batch.auc_global}))
    return EXIT_OK


def _cmd_phantom(args):
    from .raster import save_png
    from .synth import fundus_phantom

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        save_png(out / f"phantom_{i:02d}.png", fundus_phantom(args.size, args.seed + i))
    print(out)
    return EXIT_OK


COMMANDS = {"register": _cmd_register, "batch": _cmd_batch, "synth": _cmd_synth, "eval": _cmd_eval,
            "phantom": _cmd_phantom}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
