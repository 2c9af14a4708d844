"""Flow-driven frame solves: infill of failed frames and flow smoothing.

A frame's parameters are solved so that the flow between its render and
the renders of its neighbours (held fixed) matches the flow between the
corresponding captured images (plate flow), or so that the incoming and
outgoing render flows agree (self flow).  The comparison mask is frozen
at the start of each solve.
"""
from __future__ import annotations

import numpy as np

from ..energies import RenderedView, ResidualBlock, deviation_prior, flow_mask, flow_match_energy, stack
from ..render import BACKGROUND, AppearanceModel
from ..rig import FaceRig, PoseParams
from ..solver import SolveOptions, dogleg_solve
from .stages import FrameState, StageSpec

DEFAULT_DILATION = 5


def default_flow_stage(max_iterations=20):
    return StageSpec("flow", theta=True, t=True, shapes=("jaw", "mouth"),
                     options=SolveOptions(max_iterations=max_iterations))


class FlowFitter:
    def __init__(self, rig: FaceRig, appearance: AppearanceModel, cameras, backend,
                 background=BACKGROUND, dilation=DEFAULT_DILATION):
        self.rig = rig
        self.appearance = appearance
        self.cameras = list(cameras)
        self.backend = backend
        self.background = background
        self.dilation = dilation
        self._captured = {}

    @property
    def resolution(self):
        return self.backend.resolution

    def view(self, params: PoseParams, ci, mask):
        return RenderedView(self.rig, self.cameras[ci], self.appearance, params, mask, self.background)

    def captured_flow(self, frames, i, j, ci):
        """Flow between captured images of frames i and j, cached per image pair."""
        A, B = frames[i].images[ci], frames[j].images[ci]
        key = (id(A), id(B))
        hit = self._captured.get(key)
        # the arrays are kept with the entry so their ids cannot be reused
        if hit is None or hit[0] is not A or hit[1] is not B:
            hit = (A, B, self.backend.flow(A, B))
            self._captured[key] = hit
        return hit[2]

    def clear_cache(self):
        self._captured.clear()

    def _neighbor_renders(self, neighbors, mask):
        out = []
        for params in neighbors:
            out.append(None if params is None else
                       [self.view(params, ci, mask).render for ci in range(len(self.cameras))])
        return out

    def solve(self, p0: PoseParams, prev, nxt, targets, stage: StageSpec, mode="plate",
              reference: PoseParams | None = None, prior_weight=0.0):
        """Solve one frame against fixed neighbour parameters.

        ``prev`` / ``nxt`` are neighbour PoseParams or None.  ``targets``
        maps ("prev" | "next", camera) to the captured FlowField for plate
        mode.  Self mode needs both neighbours.
        """
        rig = self.rig
        mask = stage.mask(rig)
        renders = self._neighbor_renders([prev, nxt], mask)
        R = self.resolution
        start = [self.view(p0, ci, mask).render.mask for ci in range(len(self.cameras))]
        masks = []
        for ci in range(len(self.cameras)):
            cover = [start[ci]] + [r[ci].mask for r in renders if r is not None]
            masks.append(flow_mask(cover, R, self.dilation))
        # flow terms are mean squared errors over the mask, so the prior weight
        # does not depend on how many pixels the face covers
        per_pixel = [1.0 / max(int(m.sum()), 1) for m in masks]
        prior = np.zeros(rig.n_params)
        prior[mask.indices] = prior_weight
        reference = p0 if reference is None else reference
        if mode == "self" and (prev is None or nxt is None):
            raise ValueError("self flow needs both neighbours")
        if mode == "plate" and not targets:
            raise ValueError("plate flow needs at least one captured flow")

        def fn(p_full, jacobian):
            params = PoseParams.from_vector(p_full)
            blocks = []
            for ci in range(len(self.cameras)):
                view = self.view(params, ci, mask)
                T = view.dense_tangents() if jacobian else None
                img = view.image
                m = masks[ci]
                flows = {}
                if renders[0] is not None:
                    flows["prev"] = self._flow(renders[0][ci].image, img, None, T, jacobian)
                if renders[1] is not None:
                    flows["next"] = self._flow(img, renders[1][ci].image, T, None, jacobian)
                if mode == "plate":
                    for side, (fl, ch) in flows.items():
                        if (side, ci) in targets:
                            b = flow_match_energy(targets[(side, ci)], fl, m, ch, label=f"cam{ci}/flow_{side}")
                            b.weight = per_pixel[ci]
                            blocks.append(b)
                else:
                    (f1, c1), (f2, c2) = flows["prev"], flows["next"]
                    r = (f1.data[:, m] - f2.data[:, m]).ravel()
                    J = None if c1 is None else (c1[:, m] - c2[:, m]).reshape(len(r), -1)
                    blocks.append(ResidualBlock(r, J, f"cam{ci}/self_flow", weight=per_pixel[ci]))
            if prior_weight > 0:
                blocks.append(deviation_prior(params, reference, prior, mask))
            r, J = stack(blocks, mask)
            return r, (J if jacobian else None)

        return dogleg_solve(fn, p0.to_vector(), mask.active, stage.options)

    def _flow(self, A, B, TA, TB, jacobian):
        if not jacobian:
            return self.backend.flow(A, B), None
        fl, tang = self.backend.jvp(A, B, TA, TB)
        return fl, tang


def _runs(flags):
    """Maximal runs of consecutive True entries as (start, end) inclusive."""
    runs, start = [], None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - 1))
            start = None
    return runs


def infill(frames, fitter: FlowFitter, failed=None, stage: StageSpec | None = None, sweeps=2):
    """Solve failed frames by matching render flow to captured flow.

    Sweeps alternate forward from the earlier anchor and backward from
    the later one.  Every solve uses the flow to each neighbour whose
    parameters are known at that moment.  A run touching the sequence
    boundary is swept from its single anchor only and flagged.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be at least 1")
    stage = default_flow_stage() if stage is None else stage
    frames = [f.copy() for f in frames]
    n = len(frames)
    if failed is None:
        failed = [f.status == "detector_failed" for f in frames]
    else:
        idx = set(failed)
        failed = [i in idx for i in range(n)]
    for s, e in _runs(failed):
        has_prev = s > 0 and frames[s - 1].params is not None
        has_next = e < n - 1 and frames[e + 1].params is not None
        if not (has_prev or has_next):
            raise ValueError(f"frames {s}..{e} have no solved neighbour to infill from")
        one_sided = not (has_prev and has_next)
        known = {i: frames[i].params is not None and not failed[i] for i in range(max(s - 1, 0), min(e + 2, n))}
        first_forward = has_prev
        for k in range(sweeps):
            forward = first_forward if k % 2 == 0 else not first_forward
            if one_sided:
                forward = has_prev
            order = range(s, e + 1) if forward else range(e, s - 1, -1)
            for i in order:
                came_from = i - 1 if forward else i + 1
                prev = frames[i - 1].params if i - 1 >= 0 and known.get(i - 1) else None
                nxt = frames[i + 1].params if i + 1 < n and known.get(i + 1) else None
                p0 = frames[i].params if known.get(i) else frames[came_from].params
                targets = {}
                for ci in range(len(fitter.cameras)):
                    if prev is not None:
                        targets[("prev", ci)] = fitter.captured_flow(frames, i - 1, i, ci)
                    if nxt is not None:
                        targets[("next", ci)] = fitter.captured_flow(frames, i, i + 1, ci)
                rep = fitter.solve(p0, prev, nxt, targets, stage, mode="plate")
                frames[i].params = PoseParams.from_vector(rep.params)
                frames[i].reports.append((f"infill_sweep{k}", rep))
                known[i] = True
        for i in range(s, e + 1):
            frames[i].advance("infilled") if frames[i].status != "infilled" else None
            frames[i].flagged = frames[i].flagged or one_sided
    return frames


def flow_smooth_sweep(frames, fitter: FlowFitter, mode, stage: StageSpec, prior_weight=1.0,
                      references=None, gauss_seidel=False):
    """One smoothing sweep with plate or self flow.

    Jacobi by default: every frame reads its neighbours' parameters from
    before the sweep.  With ``gauss_seidel`` frames are visited in order
    and read already-updated predecessors.
    """
    old = [f.params for f in frames]
    new = list(old)
    n = len(frames)
    out = [f.copy() for f in frames]
    for i in range(n):
        src = new if gauss_seidel else old
        prev = src[i - 1] if i > 0 else None
        nxt = src[i + 1] if i < n - 1 else None
        if mode == "self" and (prev is None or nxt is None):
            continue
        targets = {}
        if mode == "plate":
            for ci in range(len(fitter.cameras)):
                if prev is not None:
                    targets[("prev", ci)] = fitter.captured_flow(frames, i - 1, i, ci)
                if nxt is not None:
                    targets[("next", ci)] = fitter.captured_flow(frames, i, i + 1, ci)
            if not targets:
                continue
        ref = old[i] if references is None else references[i]
        rep = fitter.solve(old[i], prev, nxt, targets, stage, mode=mode, reference=ref,
                           prior_weight=prior_weight)
        new[i] = PoseParams.from_vector(rep.params)
        out[i].reports.append((f"{mode}_flow", rep))
    for f, p in zip(out, new):
        f.params = p
    return out
