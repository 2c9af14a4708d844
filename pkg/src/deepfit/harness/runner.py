"""Sequence-level drivers shared by the command-line tools."""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..detect import BoundingBox, DetectionFailed
from ..pipeline.fitting import FrameFitter, reestimate_expression, solve_frame
from ..pipeline.flowfit import FlowFitter, infill
from ..pipeline.smoothing import smooth
from ..pipeline.stages import FrameState
from ..render import MeshSurface, fit_appearance
from ..rig import euler_to_rotation, load_rig, posed_vertices
from .config import SolveConfig
from .io import (
    DIAGNOSTIC_FIELDS,
    FormatError,
    SequenceManifest,
    diagnostics_rows,
    file_sha256,
    load_appearance,
    load_image,
    params_filename,
    read_csv,
    read_params,
    save_appearance,
    write_csv,
    write_params,
)


class FrameFailure(RuntimeError):
    pass


def parse_frame_range(text, available):
    """``A..B`` (inclusive) or a single index; None selects everything."""
    if text is None:
        return list(available)
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo = int(a) if a else min(available)
            hi = int(b) if b else max(available)
        else:
            lo = hi = int(text)
    except ValueError:
        raise FormatError(f"bad frame range {text!r}; expected A..B") from None
    sel = [i for i in available if lo <= i <= hi]
    if not sel:
        raise FormatError(f"frame range {text!r} selects no frames")
    return sel


class Session:
    """A manifest, a config and the objects both imply."""

    def __init__(self, manifest: SequenceManifest, config: SolveConfig, cameras=None, appearance_path=None):
        self.manifest = manifest.check_paths()
        self.config = config
        names = cameras if cameras is not None else config.cameras
        self.cam_idx = manifest.camera_indices(names)
        self.cameras = [manifest.cameras[i].to_camera() for i in self.cam_idx]
        self.rig = load_rig(manifest.resolve(manifest.rig))
        config.validate_for_rig(self.rig)
        self.appearance_path = appearance_path
        self._appearance = None

    @property
    def appearance(self):
        if self._appearance is None:
            path = self.appearance_path
            if path is None:
                if self.manifest.appearance is None:
                    raise FormatError("no appearance model: run fit-appearance first")
                path = self.manifest.resolve(self.manifest.appearance)
            self._appearance = load_appearance(path)
        return self._appearance

    def frame_indices(self, frames=None):
        return parse_frame_range(frames, [f.index for f in self.manifest.frames])

    def record(self, index):
        for f in self.manifest.frames:
            if f.index == index:
                return f
        raise FormatError(f"frame {index} not in manifest")

    def load_frame(self, index) -> FrameState:
        rec = self.record(index)
        imgs = [load_image(self.manifest.resolve(rec.images[c])) for c in self.cam_idx]
        return FrameState(index, imgs)

    def bboxes(self, index):
        rec = self.record(index)
        if rec.bboxes is None:
            return None
        return [None if rec.bboxes[c] is None else BoundingBox(*rec.bboxes[c]) for c in self.cam_idx]

    def landmark_fitter(self):
        d = self.config.detector
        return FrameFitter(self.rig, self.appearance, self.cameras, d.build(), beta=d.beta,
                           validity=d.validity_threshold)

    def flow_fitter(self):
        f = self.config.flow
        return FlowFitter(self.rig, self.appearance, self.cameras, f.build(), dilation=f.mask_dilation)


# -- parameter directories -----------------------------------------------------

def write_frames(out_dir, frames, rig):
    pdir = Path(out_dir) / "params"
    pdir.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_params(pdir / params_filename(f.index), f.params, rig, f.index, f.status, f.flagged)


def read_frames(session: Session, in_dir, indices):
    frames = []
    for i in indices:
        path = Path(in_dir) / "params" / params_filename(i)
        if not path.exists():
            raise FormatError(f"missing parameter file {path}")
        params, frame, status, flagged = read_params(path, session.rig)
        f = session.load_frame(i)
        f.params, f.status, f.flagged = params, status, flagged
        frames.append(f)
    return frames


def write_run_manifest(out_dir, command, config: SolveConfig, seed, manifest_path, frames, extra=None):
    out = Path(out_dir)
    files = {}
    pdir = out / "params"
    if pdir.exists():
        files = {p.name: file_sha256(p) for p in sorted(pdir.glob("*.json"))}
    doc = {
        "header": {"tool": "deepfit", "version": __version__, "command": command,
                   "config_sha256": config.digest(), "seed": int(seed)},
        "manifest": None if manifest_path is None else str(manifest_path),
        "frames": [int(f) for f in frames],
        "params_sha256": files,
    }
    if extra:
        doc.update(extra)
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1) + "\n")
    return doc


# -- commands ------------------------------------------------------------------

def run_solve(session: Session, out_dir, frames=None, continue_on_error=False, log=print):
    """Rigid then expression solve per frame; returns (frames, failures)."""
    cfg = session.config
    fitter = session.landmark_fitter()
    rigid, expr = cfg.rigid.specs(), (cfg.expression.specs() if cfg.expression.enabled else ())
    out, rows, failures = [], [], []
    for i in session.frame_indices(frames):
        f = session.load_frame(i)
        t0 = time.perf_counter()
        if session.record(i).detector_failed:
            f.advance("detector_failed")
        else:
            solve_frame(f, fitter, rigid, expr, session.bboxes(i))
        thr = cfg.failure.landmark_residual_threshold
        if f.status == "solved" and thr is not None:
            err = fitter.landmark_error(f.params, fitter.capture(f.images, session.bboxes(i)))
            if err > thr:
                f.status, f.flagged = "detector_failed", True
        rows += diagnostics_rows(i, f.reports, time.perf_counter() - t0, len(session.cameras))
        out.append(f)
        if f.status == "detector_failed":
            failures.append(i)
            log(f"frame {i}: detection failed")
            if not continue_on_error:
                break
        else:
            log(f"frame {i}: solved")
    write_frames(out_dir, out, session.rig)
    write_csv(Path(out_dir) / "diagnostics.csv", rows, DIAGNOSTIC_FIELDS)
    return out, failures


def run_infill(session: Session, in_dir, out_dir, frames=None, log=print):
    idx = session.frame_indices(frames)
    seq = read_frames(session, in_dir, idx)
    failed = [k for k, f in enumerate(seq) if f.status == "detector_failed"]
    rows = []
    if failed:
        seq = infill(seq, session.flow_fitter(), failed=failed, stage=session.config.infill.stage(),
                     sweeps=session.config.infill.sweeps)
        for k in failed:
            rows += diagnostics_rows(seq[k].index, seq[k].reports, None, len(session.cameras))
            log(f"frame {seq[k].index}: infilled" + (" (one-sided)" if seq[k].flagged else ""))
    write_frames(out_dir, seq, session.rig)
    write_csv(Path(out_dir) / "diagnostics.csv", rows, DIAGNOSTIC_FIELDS)
    return seq


def run_smooth(session: Session, in_dir, out_dir, frames=None, log=print):
    idx = session.frame_indices(frames)
    seq = read_frames(session, in_dir, idx)
    missing = [f.index for f in seq if f.params is None]
    if missing:
        raise FrameFailure(f"frames {missing} have no parameters; run infill first")
    cfg = session.config.smoothing.build()
    fitter = session.flow_fitter() if cfg.mode != "averaging" else None
    seq = smooth(seq, cfg, fitter)
    rows = []
    for f in seq:
        rows += diagnostics_rows(f.index, [r for r in f.reports if r[0].endswith("_flow")], None, len(session.cameras))
    write_frames(out_dir, seq, session.rig)
    write_csv(Path(out_dir) / "diagnostics.csv", rows, DIAGNOSTIC_FIELDS)
    log(f"smoothed {len(seq)} frames ({cfg.mode})")
    return seq


def run_reestimate(session: Session, in_dir, out_dir, frames=None, log=print):
    idx = session.frame_indices(frames)
    seq = read_frames(session, in_dir, idx)
    before = [len(f.reports) for f in seq]
    seq = reestimate_expression(seq, session.landmark_fitter(), session.config.reestimate.specs())
    rows = []
    for f, n in zip(seq, before):
        rows += diagnostics_rows(f.index, f.reports[n:], None, len(session.cameras))
    write_frames(out_dir, seq, session.rig)
    write_csv(Path(out_dir) / "diagnostics.csv", rows, DIAGNOSTIC_FIELDS)
    log(f"re-estimated {len(seq)} frames")
    return seq


def run_fit_appearance(session: Session, out_dir, in_dir=None, frame=None):
    """Fit albedo and lighting on one frame whose pose is known."""
    index = frame if frame is not None else (session.manifest.appearance_frame or session.manifest.frames[0].index)
    rec = session.record(index)
    if in_dir is not None:
        path = Path(in_dir) / "params" / params_filename(index)
    elif rec.ground_truth is not None:
        path = session.manifest.resolve(rec.ground_truth)
    else:
        raise FormatError("fit-appearance needs a pose: pass --input-dir with parameter files")
    params, *_ = read_params(path, session.rig)
    if params is None:
        raise FrameFailure(f"frame {index} has no parameters")
    img = load_image(session.manifest.resolve(rec.images[session.cam_idx[0]]))
    surf = MeshSurface(posed_vertices(session.rig, params), session.rig.triangles)
    app = fit_appearance(img, session.cameras[0], surf, session.config.appearance.options())
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    save_appearance(Path(out_dir) / "appearance.json", app)
    return app


REPORT_FIELDS = ("frame", "status", "rot_err_deg", "rot_err_x_deg", "rot_err_y_deg", "rot_err_z_deg",
                 "trans_err", "trans_err_x", "trans_err_y", "trans_err_z")


def rotation_error_deg(theta_a, theta_b):
    """Geodesic angle between two Euler rotations, in degrees."""
    R = euler_to_rotation(theta_a)[0].T @ euler_to_rotation(theta_b)[0]
    return float(np.rad2deg(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))))


def run_report(manifest: SequenceManifest, rig, in_dir, out_dir, frames=None):
    """Per-frame rigid errors against ground truth where the manifest has it."""
    idx = parse_frame_range(frames, [f.index for f in manifest.frames])
    rows = []
    for i in idx:
        rec = next(f for f in manifest.frames if f.index == i)
        path = Path(in_dir) / "params" / params_filename(i)
        if not path.exists():
            continue
        est, _, status, _ = read_params(path, rig)
        row = {"frame": i, "status": status}
        if rec.ground_truth is not None and est is not None:
            gt, *_ = read_params(manifest.resolve(rec.ground_truth), rig)
            d_theta = np.rad2deg(est.theta - gt.theta)
            d_t = est.t - gt.t
            row.update(rot_err_deg=repr(rotation_error_deg(est.theta, gt.theta)),
                       rot_err_x_deg=repr(float(d_theta[0])), rot_err_y_deg=repr(float(d_theta[1])),
                       rot_err_z_deg=repr(float(d_theta[2])), trans_err=repr(float(np.linalg.norm(d_t))),
                       trans_err_x=repr(float(d_t[0])), trans_err_y=repr(float(d_t[1])),
                       trans_err_z=repr(float(d_t[2])))
        rows.append(row)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_csv(Path(out_dir) / "report.csv", rows, REPORT_FIELDS)
    diag = Path(in_dir) / "diagnostics.csv"
    if diag.exists():
        stages = read_csv(diag)
        (Path(out_dir) / "report_stages.json").write_text(json.dumps(_stage_summary(stages), indent=1) + "\n")
    return rows


def _stage_summary(rows):
    out = {}
    for r in rows:
        s = out.setdefault(r["stage"], {"frames": 0, "iterations": 0, "final_residual_sum": 0.0})
        s["frames"] += 1
        s["iterations"] += int(r["iterations"])
        if r["final_residual"]:
            s["final_residual_sum"] += float(r["final_residual"])
    return out
