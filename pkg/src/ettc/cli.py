"""Command-line entry point: ``ettc {estimate,simulate,eval,iwe}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .evaluation import build_iwe, contrast, relative_ttc_errors
from .events import EventFormatError, parse_event_file, read_boxes, read_intrinsics, write_boxes, write_event_file, write_intrinsics
from .linear_solver import AffineParams
from .pipeline import PipelineConfig, TtcEstimate, TtcPipeline
from .simulator import DEFAULT_INTRINSICS, generate_events, load_scene, read_ground_truth_csv

log = logging.getLogger("ettc")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY = 0, 1, 2
INPUT_ERRORS = (OSError, EventFormatError, ValueError, KeyError, TypeError, json.JSONDecodeError)


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


def cmd_estimate(args) -> int:
    try:
        intr = read_intrinsics(args.intrinsics)
        cfg = _load_config(args.config)
        events = parse_event_file(args.events, intr.width, intr.height)
        boxes = read_boxes(args.boxes)
    except INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    pipe = TtcPipeline(intr, cfg)
    n = 0
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TtcEstimate.CSV_FIELDS)
        w.writeheader()
        for est in pipe.run(events, boxes):
            w.writerow(est.csv_row())
            n += 1
    for d in pipe.diagnostics:
        log.info("diagnostic t=%.4f %s: %s", d.t, d.stage, d.message)
    log.info("%d estimates from %d events, %d diagnostics", n, len(events), len(pipe.diagnostics))
    return EXIT_OK if n else EXIT_EMPTY


def cmd_simulate(args) -> int:
    try:
        scene = load_scene(args.scene, args.seed)
    except INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    slc, gt = generate_events(scene)
    write_event_file(slc, args.out_events)
    gt.write_csv(args.out_gt, step=args.gt_step)
    if args.out_boxes:
        write_boxes(gt.box_track(scene.box_rate_hz), args.out_boxes)
    if args.out_intrinsics:
        write_intrinsics(scene.intr, args.out_intrinsics)
    log.info("%d events over %.3f s", len(slc), scene.t_span)
    return EXIT_OK if len(slc) else EXIT_EMPTY


def _read_estimates(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"t_ref_s", "ttc_s"} - set(rows[0] if rows else {"t_ref_s", "ttc_s"})
    if missing:
        raise ValueError(f"estimates file lacks columns {sorted(missing)}")
    return np.array([float(r["t_ref_s"]) for r in rows]), np.array([float(r["ttc_s"]) for r in rows])


def cmd_eval(args) -> int:
    try:
        t_ref, ttc_est = _read_estimates(args.estimates)
        gt = read_ground_truth_csv(args.gt)
        if len(gt["t_s"]) == 0:
            raise ValueError("ground-truth file is empty")
    except INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    if len(t_ref) == 0:
        log.error("no estimates to evaluate")
        return EXIT_EMPTY
    ttc_gt = np.interp(t_ref, gt["t_s"], gt["ttc_s"])
    err = relative_ttc_errors(ttc_gt, ttc_est)
    mean = float(np.mean(err))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ref_s", "ttc_est_s", "ttc_gt_s", "e_ttc_pct"])
        for row in zip(t_ref, ttc_est, ttc_gt, err):
            w.writerow([repr(float(v)) for v in row])
        w.writerow(["mean", "", "", repr(mean)])
    if not args.no_plot:
        from .plotting import plot_ttc_report

        fig = plot_ttc_report(t_ref, ttc_est, ttc_gt, err, Path(args.out).with_suffix(".png"),
                              title=f"mean e_TTC {mean:.2f} %")
        log.info("figure written to %s", fig)
    print(f"mean e_TTC: {mean:.3f} % over {len(err)} estimates")
    return EXIT_OK


def _parse_params(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3 or not all(math.isfinite(v) for v in parts):
        raise ValueError("--params needs three finite numbers ax,ay,az")
    return parts


def cmd_iwe(args) -> int:
    try:
        intr = read_intrinsics(args.intrinsics) if args.intrinsics else DEFAULT_INTRINSICS
        a = _parse_params(args.params)
        events = parse_event_file(args.events, intr.width, intr.height)
    except INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    if len(events) == 0:
        log.error("event file is empty")
        return EXIT_EMPTY
    if args.model == "tv":
        a = AffineParams(*a, t_ref=args.tref)
    iwe = build_iwe(events, a, args.tref, intr, model=args.model, t0=args.t0)
    iwe.dump_pgm(args.out)
    print(f"contrast: {contrast(iwe):.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ettc", description="Event-based time-to-contact estimation.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="run the estimator over an event file and a box track")
    p.add_argument("--events", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--config", help="pipeline JSON; may name a preset, e.g. {\"preset\": \"sim-approach\"}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="render a synthetic scene to events and ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--out-events", required=True)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--out-boxes")
    p.add_argument("--out-intrinsics")
    p.add_argument("--seed", type=int)
    p.add_argument("--gt-step", type=float, default=1e-3, help="ground-truth sampling step [s]")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="relative TTC error of estimates against ground truth")
    p.add_argument("--estimates", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true", help="skip the PNG written next to --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("iwe", help="image of warped events for a given motion")
    p.add_argument("--events", required=True)
    p.add_argument("--params", required=True, help="ax,ay,az")
    p.add_argument("--tref", type=float, required=True)
    p.add_argument("--model", choices=("tv", "const"), default="tv")
    p.add_argument("--t0", type=float, help="anchor time of the constant model (default: first event)")
    p.add_argument("--intrinsics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_iwe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
