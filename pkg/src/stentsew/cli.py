"""Command-line entry point: ``stentsew {stitch,knot,servo}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import experiments as ex
from .config import CONFIG_ENV, load_settings
from .knot import load_keyframes
from .stitch import ARC, CHORD

log = logging.getLogger("stentsew")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV} or built-ins)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory for CSV / JSON / report files")
    common.add_argument("--mode", choices=(CHORD, ARC), help="stitch size interpretation")
    common.add_argument("--pixel-noise", type=float, metavar="PX", help="pixel noise sigma")
    common.add_argument("--depth-noise", type=float, metavar="MM", help="depth noise sigma")
    common.add_argument("--dropout", type=float, help="fraction of invalid depth readings")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stentsew", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stitch", parents=[common], help="running-stitch experiment")
    s.add_argument("--sizes", type=float, nargs="+", default=[1, 2, 3, 4, 5], metavar="MM")
    s.add_argument("--trials", type=int, default=1, help="repeats per stitch size")
    s.add_argument("--targets", type=int, default=6)
    s.add_argument("--bias", type=float, metavar="MM", help="jaw-press bias added to measurements")

    k = sub.add_parser("knot", parents=[common], help="stitch + knot cycles until thread runs out")
    k.add_argument("--keyframes", help="keyframe recording (JSON); default: bundled recording")
    k.add_argument("--stiffness", type=float, metavar="N/M", help="thread stiffness override")

    v = sub.add_parser("servo", parents=[common], help="servo convergence from random offsets")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--offset-mm", type=float, default=20.0)
    v.add_argument("--offset-deg", type=float, default=10.0)
    return p


def _apply_overrides(settings, args):
    w = settings.world
    if args.pixel_noise is not None:
        w = replace(w, pixel_sigma=args.pixel_noise)
    if args.depth_noise is not None:
        w = replace(w, depth_sigma=args.depth_noise * 1e-3)
    if args.dropout is not None:
        w = replace(w, dropout=args.dropout)
    if getattr(args, "bias", None) is not None:
        w = replace(w, jaw_press_bias=args.bias * 1e-3)
    settings = replace(settings, world=replace(w, seed=args.seed))
    if getattr(args, "stiffness", None) is not None:
        settings = replace(settings, knot=replace(settings.knot, stiffness=args.stiffness))
    if args.mode is not None:
        settings = replace(settings, stitch=replace(settings.stitch, mode=args.mode))
    return settings


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        settings = _apply_overrides(load_settings(args.config), args)
        mode = settings.stitch.mode
        if args.command == "stitch":
            spec = ex.ExperimentSpec(ex.RUNNING_STITCH, trials=args.trials,
                                     sizes_mm=tuple(args.sizes), targets=args.targets,
                                     seed=args.seed, output_dir=args.out, jobs=args.jobs)
            result = ex.run_running_stitch(spec, settings, mode)
        elif args.command == "knot":
            spec = ex.ExperimentSpec(ex.KNOT_TYING, seed=args.seed, output_dir=args.out)
            kf = load_keyframes(args.keyframes) if args.keyframes else None
            result = ex.run_knot_tying(spec, settings, mode, keyframes=kf)
        else:
            spec = ex.ExperimentSpec(ex.SERVO_CONVERGENCE, trials=args.trials, seed=args.seed,
                                     output_dir=args.out, offset_mm=args.offset_mm,
                                     offset_deg=args.offset_deg, jobs=args.jobs)
            result = ex.run_servo_convergence(spec, settings)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2

    sys.stdout.write(result.report)
    for name, ok in result.checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if args.out:
        for p in ex.write_outputs(result, args.out):
            log.info("wrote %s", p)
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
