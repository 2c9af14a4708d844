"""Command-line entry point: ``deepfit <command> [options]``.

Exit codes: 0 success, 1 a frame-level failure (without
``--continue-on-error``), 2 bad input (config, manifest, arguments).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from .harness.config import ConfigError, load_config
from .harness.io import FormatError, load_manifest
from .harness.runner import (
    FrameFailure,
    Session,
    run_fit_appearance,
    run_infill,
    run_reestimate,
    run_report,
    run_smooth,
    run_solve,
    write_run_manifest,
)
from .harness.synthetic import SyntheticScenario, generate_synthetic
from .rig import RigError, load_rig


def _common(p, manifest=True, input_dir=False):
    p.add_argument("--config", help="solve config (YAML); defaults apply when omitted")
    if manifest:
        p.add_argument("--manifest", required=True, help="sequence manifest (JSON)")
    p.add_argument("--output-dir", required=True, help="directory for results")
    if input_dir:
        p.add_argument("--input-dir", required=True, help="directory holding params/ from an earlier step")
    p.add_argument("--frames", help="inclusive frame range A..B")
    p.add_argument("--cameras", help="comma-separated camera names (default: all)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--continue-on-error", action="store_true", help="keep going after frame failures")


def build_parser():
    ap = argparse.ArgumentParser(prog="deepfit", description="Landmark- and flow-driven face rig fitting.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic ground-truth sequence")
    p.add_argument("--config", required=True, help="synthetic scenario (YAML)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, help="overrides the scenario seed")

    p = sub.add_parser("fit-appearance", help="fit albedo and SH lighting on one frame")
    _common(p)
    p.add_argument("--input-dir", help="params/ directory with the pose of the fit frame")
    p.add_argument("--frame", type=int, help="frame to fit (default: manifest appearance_frame)")

    p = sub.add_parser("solve", help="rigid and expression solve per frame")
    _common(p)
    p.add_argument("--appearance", help="appearance file (default: from the manifest)")

    for name, text in (("infill", "flow infill of failed frames"), ("smooth", "temporal smoothing"),
                       ("reestimate", "re-solve expressions with fixed rigid parameters")):
        p = sub.add_parser(name, help=text)
        _common(p, input_dir=True)
        p.add_argument("--appearance", help="appearance file (default: from the manifest)")

    p = sub.add_parser("report", help="per-frame rigid errors against ground truth")
    _common(p, input_dir=True)
    return ap


def _cameras(arg):
    return None if arg is None else [c.strip() for c in arg.split(",") if c.strip()]


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    try:
        return _dispatch(args, log)
    except (ConfigError, FormatError, RigError, ValidationError, FileNotFoundError) as e:
        log(f"error: {e}")
        return 2
    except FrameFailure as e:
        log(f"error: {e}")
        return 1


def _dispatch(args, log):
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "synth":
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        try:
            scenario = SyntheticScenario.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        if args.seed is not None:
            scenario = scenario.model_copy(update={"seed": args.seed})
        m = generate_synthetic(scenario, out)
        log(f"wrote {len(m.frames)} frames to {out}")
        return 0

    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    np.random.seed(config.seed)
    manifest = load_manifest(args.manifest)
    cams = _cameras(args.cameras)

    if args.command == "report":
        rig = load_rig(manifest.resolve(manifest.rig))
        rows = run_report(manifest, rig, args.input_dir, out, args.frames)
        write_run_manifest(out, "report", config, config.seed, args.manifest, [r["frame"] for r in rows])
        log(f"report: {len(rows)} frames")
        return 0

    session = Session(manifest, config, cams, getattr(args, "appearance", None))
    if args.command == "fit-appearance":
        run_fit_appearance(session, out, args.input_dir, args.frame)
        write_run_manifest(out, "fit-appearance", config, config.seed, args.manifest, [])
        log(f"wrote {out / 'appearance.json'}")
        return 0
    if args.command == "solve":
        frames, failures = run_solve(session, out, args.frames, args.continue_on_error, log)
        write_run_manifest(out, "solve", config, config.seed, args.manifest, [f.index for f in frames],
                           {"failed_frames": failures})
        return 1 if failures and not args.continue_on_error else 0
    runners = {"infill": run_infill, "smooth": run_smooth, "reestimate": run_reestimate}
    try:
        frames = runners[args.command](session, args.input_dir, out, args.frames, log=log)
    except (FrameFailure, ValueError) as e:
        if isinstance(e, (ConfigError, FormatError)):
            raise
        raise FrameFailure(str(e)) from e
    write_run_manifest(out, args.command, config, config.seed, args.manifest, [f.index for f in frames])
    return 0


if __name__ == "__main__":
    sys.exit(main())
