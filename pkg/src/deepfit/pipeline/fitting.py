"""Per-frame landmark fitting: staged rigid and expression solves.

A ``FrameFitter`` holds everything a frame solve needs that does not
change between frames (rig, appearance, cameras, detector).  Captured
landmarks are detected once per frame and camera; rendered landmarks
are re-detected on every residual evaluation.  The detector's box and
patch choices enter the Jacobian as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..detect import DetectionFailed, LandmarkSet, landmarks
from ..detect.landmarks import DEFAULT_BETA, DEFAULT_VALIDITY
from ..energies import (
    RenderedView,
    deviation_prior,
    edge_energy,
    landmark_energy,
    stack,
    weight_regularizer,
)
from ..render import BACKGROUND, AppearanceModel
from ..rig import FaceRig, PoseParams
from ..solver import SolveReport, dogleg_solve
from .stages import FrameState, StageSpec, default_expression_stages, default_rigid_stages


@dataclass
class Captured:
    """Captured-image landmarks for one camera."""

    landmarks: LandmarkSet
    bbox: object


class FrameFitter:
    def __init__(self, rig: FaceRig, appearance: AppearanceModel, cameras, backend,
                 beta=DEFAULT_BETA, validity=DEFAULT_VALIDITY, background=BACKGROUND):
        self.rig = rig
        self.appearance = appearance
        self.cameras = list(cameras)
        self.backend = backend
        self.beta = beta
        self.validity = validity
        self.background = background

    # detection -------------------------------------------------------
    def detect(self, image, bbox=None):
        return landmarks(self.backend, image, bbox=bbox, beta=self.beta,
                         validity_threshold=self.validity, background=self.background)

    def capture(self, images, bboxes=None) -> list:
        """Detect landmarks on every captured view; raises DetectionFailed."""
        if len(images) != len(self.cameras):
            raise ValueError("one captured image per camera is required")
        out = []
        for ci, img in enumerate(images):
            det = self.detect(img, None if bboxes is None else bboxes[ci])
            if not det.landmarks.valid.any():
                raise DetectionFailed(f"camera {ci}: no valid landmarks")
            out.append(Captured(det.landmarks, det.bbox))
        return out

    def render_landmarks(self, params: PoseParams, camera_index=0):
        view = RenderedView(self.rig, self.cameras[camera_index], self.appearance, params,
                            _full_mask(self.rig), self.background)
        return self.detect(view.image).landmarks

    # residuals -------------------------------------------------------
    def residual_fn(self, stage: StageSpec, captured, reference: PoseParams, valid):
        """Stacked residual for ``stage``; ``valid`` is a per-camera landmark mask."""
        rig = self.rig
        mask = stage.mask(rig)
        W = stage.weights(rig)
        prior = np.zeros(rig.n_params)
        prior[:6] = stage.prior_weight

        def fn(p_full, jacobian):
            params = PoseParams.from_vector(p_full)
            blocks = []
            for ci, cam in enumerate(self.cameras):
                view = RenderedView(rig, cam, self.appearance, params, mask, self.background)
                det = self.detect(view.image)
                chain = det.jacobian(view.tangents) if jacobian else None
                ok = valid[ci]
                rend = LandmarkSet(det.landmarks.points, det.landmarks.confidence, ok)
                cap = LandmarkSet(captured[ci].landmarks.points, captured[ci].landmarks.confidence, ok)
                lb = landmark_energy(W, rend, cap, chain, label=f"cam{ci}/landmarks")
                lb.weight = stage.landmark_weight
                blocks.append(lb)
                if stage.edge_weight > 0:
                    eb = edge_energy(rend, cap, chain, valid=W.weights > 0, label=f"cam{ci}/edges")
                    eb.weight = stage.edge_weight
                    blocks.append(eb)
            if stage.regularization > 0:
                blocks.append(weight_regularizer(stage.regularization, params, mask))
            if stage.prior_weight > 0 and mask.active[:6].any():
                blocks.append(deviation_prior(params, reference, prior, mask))
            r, J = stack(blocks, mask)
            return r, (J if jacobian else None)

        return fn

    def stage_validity(self, params: PoseParams, captured, stage: StageSpec):
        """Landmarks used throughout a stage: valid in capture and start render, nonzero weight."""
        W = stage.weights(self.rig).weights > 0
        out = []
        for ci in range(len(self.cameras)):
            rend = self.render_landmarks(params, ci)
            out.append(captured[ci].landmarks.valid & rend.valid & W)
        return out

    def run_stage(self, stage: StageSpec, params: PoseParams, captured) -> SolveReport:
        valid = self.stage_validity(params, captured, stage)
        fn = self.residual_fn(stage, captured, params.copy(), valid)
        mask = stage.mask(self.rig)
        return dogleg_solve(fn, params.to_vector(), mask.active, stage.options)

    def run_stages(self, stages, params: PoseParams, captured):
        reports = []
        for stage in stages:
            rep = self.run_stage(stage, params, captured)
            reports.append((stage.name, rep))
            params = PoseParams.from_vector(rep.params)
            if rep.termination.startswith("residual failure"):
                break
        return params, reports

    def landmark_error(self, params: PoseParams, captured, camera_index=0):
        """Mean landmark reprojection distance in pixels over jointly valid points."""
        rend = self.render_landmarks(params, camera_index)
        cap = captured[camera_index].landmarks
        ok = rend.valid & cap.valid
        return float(np.linalg.norm(rend.points[ok] - cap.points[ok], axis=1).mean())


def _full_mask(rig):
    from ..energies import ParamMask

    return ParamMask(np.ones(rig.n_params, dtype=bool))


def initial_params(rig: FaceRig, t=(0.0, 0.0, 0.0)):
    """Front-facing, centred, neutral expression."""
    return PoseParams.neutral(rig, t)


def _solve(fitter: FrameFitter, frame: FrameState, stages, bboxes=None):
    try:
        captured = fitter.capture(frame.images, bboxes)
    except DetectionFailed:
        if frame.status == "unsolved":
            frame.advance("detector_failed")
        return frame
    params = frame.params if frame.params is not None else initial_params(fitter.rig)
    params, reports = fitter.run_stages(stages, params, captured)
    frame.params = params
    frame.reports.extend(reports)
    if frame.status == "unsolved":
        frame.advance("solved")
    return frame


def solve_rigid(frame: FrameState, fitter: FrameFitter, stages=None, bboxes=None) -> FrameState:
    """Staged rigid alignment of one frame; marks detector failures."""
    return _solve(fitter, frame, default_rigid_stages() if stages is None else stages, bboxes)


def solve_expression(frame: FrameState, fitter: FrameFitter, stages=None, bboxes=None) -> FrameState:
    """Staged jaw and mouth estimation after rigid alignment."""
    if frame.status == "detector_failed":
        return frame
    return _solve(fitter, frame, default_expression_stages() if stages is None else stages, bboxes)


def solve_frame(frame: FrameState, fitter: FrameFitter, rigid_stages=None, expression_stages=None,
                bboxes=None) -> FrameState:
    solve_rigid(frame, fitter, rigid_stages, bboxes)
    if frame.status != "detector_failed":
        solve_expression(frame, fitter, expression_stages, bboxes)
    return frame


def reestimate_expression(frames, fitter: FrameFitter, stages=None, bboxes=None):
    """Re-solve jaw and mouth weights with the rigid parameters held fixed."""
    stages = default_expression_stages() if stages is None else stages
    stages = tuple(s.without_rigid() for s in stages)
    out = []
    for f in frames:
        g = f.copy()
        if g.params is not None and g.status != "detector_failed":
            try:
                captured = fitter.capture(g.images)
            except DetectionFailed:
                out.append(g)
                continue
            rigid = g.params.to_vector()[:6].copy()
            params, reports = fitter.run_stages(stages, g.params, captured)
            v = params.to_vector()
            v[:6] = rigid
            g.params = PoseParams.from_vector(v)
            g.reports.extend(reports)
        out.append(g)
    return out
