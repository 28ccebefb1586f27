"""Command-line driver: ``gen``, ``run``, ``eval`` and ``plot``.

Exit status is 0 on success, 1 for usage errors, 2 for missing or malformed
data and 3 for numeric failures (empty metrics, non-finite estimates).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .estimator import ABLATIONS, RefineParams, run_sequence
from .evaluation import (
    THRESHOLDS,
    UndefinedMetricError,
    count_predictions,
    evaluate_maps,
    load_prediction,
    write_metrics_csv,
)
from .fileio import DataFormatError, read_keyvalue, read_pfm, write_keyvalue, write_pfm, write_pgm
from .flow import FlowParams
from .manifest import find_manifest, manifest_pattern_path, read_manifest
from .pattern import PatternGenerationError, generate_pattern, load_pattern
from .simulator import RenderError, available_scenes, default_scene_path, gen_sequence, load_scene_file

log = logging.getLogger("patternflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TIMING_COLUMNS = ("frame_index", "ms_flow", "ms_warp", "ms_refine", "ms_total")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- gen ---------------------------------------------------------------------------


def _scene_path(name: str) -> Path:
    p = Path(name)
    if p.suffix == ".ini" or p.exists():
        return p
    if name in available_scenes():
        return default_scene_path(name)
    raise UsageError(f"unknown scene {name!r}; built-in scenes: {', '.join(available_scenes())}")


def cmd_gen(args) -> int:
    path = _scene_path(args.scene)
    try:
        sf = load_scene_file(path)
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    scene, noise = sf.scene, sf.noise
    if args.frames is not None:
        if args.frames < 1:
            raise UsageError("--frames must be >= 1")
        scene = replace(scene, n_frames=args.frames)
    if args.noise_sigma is not None:
        noise = replace(noise, gaussian_sigma=args.noise_sigma)
    if args.pattern:
        p = load_pattern(args.pattern)
    else:
        pp = dict(sf.pattern_params)
        seed = pp.pop("seed", args.seed)
        if args.pattern_seed is not None:
            seed = args.pattern_seed
        p = generate_pattern(seed, **pp)
    m = gen_sequence(scene, sf.rig, p, noise, args.out, seed=args.seed)
    print(f"wrote {m.n_frames} frames of {path.stem} to {args.out} (seed {args.seed})")
    return EXIT_OK


# --- run ---------------------------------------------------------------------------


def _load_manifest(path):
    found = find_manifest(path)
    if found is None:
        raise DataFormatError(f"no manifest at {path}")
    return read_manifest(found)


def cmd_run(args) -> int:
    m = _load_manifest(args.manifest)
    p = load_pattern(manifest_pattern_path(m))
    rp = RefineParams()
    overrides = {
        "patch": args.patch,
        "search_radius_px": args.radius,
        "init_step_px": args.init_step,
        "zncc_floor": args.zncc_floor,
        "fuse_weight": args.fuse_weight,
    }
    try:
        rp = replace(rp, **{k: v for k, v in overrides.items() if v is not None})
        fp = FlowParams(window=args.flow_window, iters=args.flow_iters, factor=m.rig.downsample_factor)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def save(t, dm, timing):
        if not np.isfinite(dm.d[dm.valid]).all():
            raise NumericError(f"frame {t}: non-finite disparity")
        write_pfm(out / f"disp_{t:04d}.pfm", dm.masked())
        write_pgm(out / f"valid_{t:04d}.pgm", dm.valid.astype(np.uint8) * 255)
        write_pfm(out / f"conf_{t:04d}.pfm", dm.confidence)

    res = run_sequence(m, m.rig, p, fp, rp, args.ablation, args.fill_holes, on_frame=save, keep_flows=args.dump_flow)
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for tm in res.timings:
            w.writerow([tm.frame_index] + [f"{v:.3f}" for v in (tm.ms_flow, tm.ms_warp, tm.ms_refine, tm.ms_total)])
    if args.dump_flow:
        for t, fl in enumerate(res.flows):
            if fl is not None:
                write_pfm(out / f"flow_{t:04d}.pfm", np.where(fl.valid, fl.u, np.inf))
    write_keyvalue(
        out / "run_info.txt",
        [("manifest", str(Path(args.manifest).resolve())), ("ablation", args.ablation), ("fill_holes", args.fill_holes)]
        + [(k, v) for k, v in rp.__dict__.items()],
    )
    later = [tm.ms_total for tm in res.timings[1:]]
    extra = f", median {np.median(later):.1f} ms/frame after frame 0" if later else ""
    print(f"{args.ablation}: {len(res.maps)} frames -> {out}{extra}")
    return EXIT_OK


# --- eval --------------------------------------------------------------------------


def _run_label(pred_dir: Path) -> str:
    info = pred_dir / "run_info.txt"
    if info.exists():
        return read_keyvalue(info).get("ablation", pred_dir.name)
    return pred_dir.name


def _predictions_for(m, pred_dir: Path):
    n = count_predictions(pred_dir)
    if n != m.n_frames:
        raise DataFormatError(f"{pred_dir}: {n} predictions for {m.n_frames} frames")
    if len(m.gt) != m.n_frames:
        raise DataFormatError("manifest lists no ground truth")
    return [load_prediction(pred_dir, t) for t in range(n)], [m.load_gt(t) for t in range(n)]


def cmd_eval(args) -> int:
    m = _load_manifest(args.manifest)
    seq = args.sequence or Path(args.manifest).resolve().name
    rows = []
    for d in args.pred:
        pred_dir = Path(d)
        preds, gts = _predictions_for(m, pred_dir)
        row = evaluate_maps(preds, gts, thresholds=THRESHOLDS, pooled=args.pooled,
                            invalid_as_bad=not args.skip_invalid, invalid_penalty=args.invalid_penalty)
        if not np.isfinite([row.o1, row.o2, row.o5, row.avg]).all():
            raise NumericError(f"{pred_dir}: metrics undefined (no valid predictions)")
        label = _run_label(pred_dir)
        rows.append((seq, label, row))
        print(f"{seq} {label}: o1={row.o1:.3f} o2={row.o2:.3f} o5={row.o5:.3f} avg={row.avg:.4f} px")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(args.out, rows)
    return EXIT_OK


# --- plot --------------------------------------------------------------------------


def cmd_plot(args) -> int:
    from . import report
    from .evaluation import avg_l1

    m = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for d in args.pred:
        pred_dir = Path(d)
        preds, gts = _predictions_for(m, pred_dir)
        label = _run_label(pred_dir)
        prefix = f"{label}_" if len(args.pred) > 1 else ""
        curves[label] = [avg_l1(pr, g) for pr, g in zip(preds, gts)]
        frames = range(m.n_frames) if args.every is None else range(0, m.n_frames, args.every)
        for t in frames:
            report.save_error_heatmap(preds[t], gts[t], out / f"{prefix}error_{t:04d}.png",
                                      vmax=args.vmax, title=f"{label} frame {t}")
            fpath = pred_dir / f"flow_{t:04d}.pfm"
            if fpath.exists():
                u = read_pfm(fpath).astype(np.float64)
                report.save_flow_image(u, np.isfinite(u), out / f"{prefix}flow_{t:04d}.png",
                                       limit=args.flow_limit, scale=m.rig.downsample_factor)
    report.save_convergence_plot(curves, out / "convergence.png")
    print(f"wrote plots for {len(curves)} run(s) to {out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="patternflow", description="Incremental structured-light disparity estimation.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic sequence from a scene file")
    g.add_argument("--scene", default="default", help="built-in scene name or path to an .ini file")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, help="override the scene's frame count")
    g.add_argument("--seed", type=int, default=0, help="noise seed")
    g.add_argument("--pattern-seed", type=int, help="override the scene's pattern seed")
    g.add_argument("--pattern", help="use this saved pattern instead of generating one")
    g.add_argument("--noise-sigma", type=float)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="estimate disparity for every frame of a sequence")
    r.add_argument("manifest", help="manifest file or sequence directory")
    r.add_argument("--out", required=True)
    r.add_argument("--ablation", choices=ABLATIONS, default="full")
    r.add_argument("--fill-holes", action="store_true", help="full-range search where the prior is invalid")
    r.add_argument("--dump-flow", action="store_true", help="also write reduced-resolution flow as flow_NNNN.pfm")
    r.add_argument("--patch", type=int)
    r.add_argument("--radius", type=float)
    r.add_argument("--init-step", type=float)
    r.add_argument("--zncc-floor", type=float)
    r.add_argument("--fuse-weight", type=float)
    r.add_argument("--flow-window", type=int, default=FlowParams.window)
    r.add_argument("--flow-iters", type=int, default=FlowParams.iters)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("manifest")
    e.add_argument("pred", nargs="+", help="one or more prediction directories")
    e.add_argument("--out", help="metrics CSV")
    e.add_argument("--sequence", help="sequence name for the CSV (default: manifest directory name)")
    e.add_argument("--pooled", action="store_true", help="pool pixels over frames instead of averaging per frame")
    e.add_argument("--skip-invalid", action="store_true", help="leave invalid predictions out of o(t)")
    e.add_argument("--invalid-penalty", type=float, help="count invalid predictions in avg with this error")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="error heatmaps, flow maps and a convergence curve")
    pl.add_argument("manifest")
    pl.add_argument("pred", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--every", type=int, help="only plot every n-th frame")
    pl.add_argument("--vmax", type=float, default=5.0, help="heatmap upper limit (px)")
    pl.add_argument("--flow-limit", type=float, help="symmetric flow color limit (px)")
    pl.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, bad usage exits 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"patternflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, UndefinedMetricError, FloatingPointError) as exc:
        print(f"patternflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, RenderError, PatternGenerationError, OSError, ValueError) as exc:
        print(f"patternflow: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
