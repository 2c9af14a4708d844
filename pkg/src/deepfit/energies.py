"""Residual blocks over a masked parameter vector and their stacking.

Every block carries a residual vector and its Jacobian with respect to
the active entries of the full (theta, t, w) vector.  ``RenderedView``
ties a rig, a camera and an appearance together and supplies the image
tangents that the landmark and flow chains push forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .detect.flow import FlowField
from .detect.landmarks import LandmarkSet
from .procedural import EDGE_CHAINS
from .render import AppearanceModel, Camera, MeshSurface, RenderResult, rasterize, render_jacobian
from .rig import FaceRig, PoseParams, pose_jacobian, posed_vertices

N_LANDMARKS = 68
MOUTH_WEIGHT = 10.0


@dataclass
class ResidualBlock:
    residual: np.ndarray
    jacobian: np.ndarray | None  # (m, n_active); None when not requested
    label: str
    weight: float = 1.0
    empty: bool = False

    def __post_init__(self):
        self.residual = np.asarray(self.residual, dtype=float).ravel()
        if self.jacobian is not None:
            J = self.jacobian.toarray() if sp.issparse(self.jacobian) else np.asarray(self.jacobian, dtype=float)
            if J.ndim != 2 or J.shape[0] != len(self.residual):
                raise ValueError(f"block {self.label}: Jacobian rows do not match residual length")
            self.jacobian = J

    @property
    def cost(self):
        return float(self.weight * self.residual @ self.residual)


@dataclass(frozen=True)
class ParamMask:
    active: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.active, dtype=bool)
        if not a.any():
            raise ValueError("parameter mask selects nothing")
        object.__setattr__(self, "active", a)

    @property
    def indices(self):
        return np.flatnonzero(self.active)

    @property
    def size(self):
        return int(self.active.sum())

    @classmethod
    def build(cls, rig: FaceRig, theta=False, t=False, shapes=()):
        """Mask from rigid flags and blendshape names or tags."""
        a = np.zeros(rig.n_params, dtype=bool)
        a[0:3] = theta
        a[3:6] = t
        for s in shapes:
            if s in rig.shape_names:
                a[6 + rig.shape_index(s)] = True
            else:
                idx = rig.shapes_with_tag(s)
                if len(idx) == 0:
                    raise ValueError(f"unknown blendshape name or tag {s!r}")
                a[6 + np.asarray(idx)] = True
        return cls(a)

    def without_rigid(self):
        a = self.active.copy()
        a[:6] = False
        return ParamMask(a)


@dataclass(frozen=True)
class LandmarkWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (N_LANDMARKS,) or (w < 0).any():
            raise ValueError("landmark weights must be 68 non-negative values")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, value=1.0):
        return cls(np.full(N_LANDMARKS, float(value)))

    @classmethod
    def mouth_heavy(cls, rig: FaceRig, mouth=MOUTH_WEIGHT):
        w = np.ones(N_LANDMARKS)
        w[rig.landmarks_in_group("mouth")] = mouth
        return cls(w)

    @classmethod
    def subset(cls, rig: FaceRig, name):
        """Preset by name: all, non_jaw, jaw_only, mouth_heavy."""
        if name == "all":
            return cls.uniform()
        if name == "mouth_heavy":
            return cls.mouth_heavy(rig)
        jaw = np.zeros(N_LANDMARKS, dtype=bool)
        jaw[rig.landmarks_in_group("jaw")] = True
        if name == "non_jaw":
            return cls((~jaw).astype(float))
        if name == "jaw_only":
            return cls(jaw.astype(float))
        raise ValueError(f"unknown landmark subset {name!r}")


@dataclass
class RenderedView:
    """The rig at ``params`` rendered through one camera."""

    rig: FaceRig
    camera: Camera
    appearance: AppearanceModel
    params: PoseParams
    mask: ParamMask
    background: float = 0.5
    surface: MeshSurface = field(init=False)
    render: RenderResult = field(init=False)

    def __post_init__(self):
        self.surface = MeshSurface(posed_vertices(self.rig, self.params), self.rig.triangles)
        self.render = rasterize(self.camera, self.surface, self.appearance, background=self.background)
        self._pose_J = None

    @property
    def image(self):
        return self.render.image

    @property
    def pose_J(self):
        if self._pose_J is None:
            self._pose_J = pose_jacobian(self.rig, self.params)[:, self.mask.indices].tocsr()
        return self._pose_J

    def tangents(self, pixels):
        """Image tangents (n, 3, P) at flat pixel indices."""
        pixels = np.asarray(pixels, dtype=np.int64)
        RJ = render_jacobian(self.render, self.camera, self.surface, self.appearance, pixels=pixels)
        rows = (3 * pixels[:, None] + np.arange(3)).ravel()
        T = RJ[rows] @ self.pose_J
        T = T.toarray() if sp.issparse(T) else np.asarray(T)
        return T.reshape(len(pixels), 3, -1)

    def dense_tangents(self):
        """Image tangents (H, W, 3, P) over the whole frame."""
        H, W = self.render.shape
        RJ = render_jacobian(self.render, self.camera, self.surface, self.appearance)
        T = RJ @ self.pose_J
        T = T.toarray() if sp.issparse(T) else np.asarray(T)
        return T.reshape(H, W, 3, -1)


def _valid_pairs(valid, chains):
    pairs = []
    for idx, closed in chains:
        idx = list(idx)
        links = list(zip(idx[:-1], idx[1:]))
        if closed and len(idx) > 2:
            links.append((idx[-1], idx[0]))
        pairs.extend((a, b) for a, b in links if valid[a] and valid[b])
    return pairs


def landmark_energy(W: LandmarkWeights, lm_render: LandmarkSet, lm_captured: LandmarkSet,
                    chain=None, valid=None, label="landmarks") -> ResidualBlock:
    """Weighted difference of rendered and captured landmarks, two rows per point.

    ``chain`` is d(rendered landmarks)/d(active params), shape (L, 2, P).
    """
    ok = lm_render.valid & lm_captured.valid
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(ok)
    w = W.weights[idx][:, None]
    r = (w * (lm_render.points[idx] - lm_captured.points[idx])).ravel()
    J = None
    if chain is not None:
        J = (w[:, :, None] * np.asarray(chain)[idx]).reshape(2 * len(idx), -1)
    return ResidualBlock(r, J, label, empty=len(idx) == 0)


def edge_energy(lm_render: LandmarkSet, lm_captured: LandmarkSet, chain=None, valid=None,
                chains=EDGE_CHAINS, label="edges") -> ResidualBlock:
    """Rendered minus captured edge vectors between consecutive landmarks."""
    ok = lm_render.valid & lm_captured.valid
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    pairs = _valid_pairs(ok, chains)
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    er = lm_render.points[b] - lm_render.points[a]
    ec = lm_captured.points[b] - lm_captured.points[a]
    r = (er - ec).ravel()
    J = None
    if chain is not None:
        C = np.asarray(chain)
        J = (C[b] - C[a]).reshape(2 * len(pairs), -1) if len(pairs) else np.zeros((0, C.shape[-1]))
    return ResidualBlock(r, J, label, empty=len(pairs) == 0)


def weight_regularizer(lam, params: PoseParams, mask: ParamMask, label="regularizer") -> ResidualBlock:
    """sqrt(lambda) * w_b for every active blendshape weight."""
    full = params.to_vector()
    act = mask.indices
    shape_cols = np.flatnonzero(act >= 6)
    r = np.sqrt(lam) * full[act[shape_cols]]
    J = np.zeros((len(shape_cols), len(act)))
    J[np.arange(len(shape_cols)), shape_cols] = np.sqrt(lam)
    return ResidualBlock(r, J, label, empty=len(shape_cols) == 0)


def deviation_prior(params: PoseParams, reference: PoseParams, weights, mask: ParamMask,
                    label="prior") -> ResidualBlock:
    """sqrt(weight) * (p - p_ref) over the active entries."""
    act = mask.indices
    wt = np.broadcast_to(np.asarray(weights, dtype=float), (len(params.to_vector()),))[act]
    s = np.sqrt(wt)
    r = s * (params.to_vector()[act] - reference.to_vector()[act])
    return ResidualBlock(r, np.diag(s), label)


def flow_mask(coverage_masks, resolution, dilation=5):
    """Union of coverage masks resized to the flow grid and dilated."""
    union = np.zeros(np.shape(coverage_masks[0]), dtype=bool)
    for m in coverage_masks:
        union |= np.asarray(m, dtype=bool)
    H, W = union.shape
    R = int(resolution)
    ys = np.clip(((np.arange(R) + 0.5) * H / R - 0.5).round().astype(int), 0, H - 1)
    xs = np.clip(((np.arange(R) + 0.5) * W / R - 0.5).round().astype(int), 0, W - 1)
    grid = union[np.ix_(ys, xs)]
    if dilation > 0:
        disk = np.hypot(*np.mgrid[-dilation:dilation + 1, -dilation:dilation + 1]) <= dilation
        grid = ndimage.binary_dilation(grid, structure=disk)
    return grid


def flow_match_energy(flow_captured: FlowField, flow_render: FlowField, mask, chain=None,
                      label="flow") -> ResidualBlock:
    """Rendered minus captured flow vectors over ``mask``.

    ``chain`` is d(rendered flow)/d(active params), shape (2, R, R, P).
    """
    if flow_captured.resolution != flow_render.resolution:
        raise ValueError("flow fields differ in resolution")
    m = np.asarray(mask, dtype=bool)
    r = (flow_render.data[:, m] - flow_captured.data[:, m]).ravel()
    J = None
    if chain is not None:
        C = np.asarray(chain)
        J = C[:, m].reshape(-1, C.shape[-1])
    return ResidualBlock(r, J, label, empty=not m.any())


def stack(blocks, param_mask: ParamMask | None = None):
    """Concatenate sqrt(weight)-scaled blocks, ordered by label.

    Returns ``(residual, jacobian)``; the Jacobian is None if any block
    was built without one.
    """
    if not blocks:
        raise ValueError("nothing to stack")
    ordered = sorted(blocks, key=lambda b: b.label)
    r = np.concatenate([np.sqrt(b.weight) * b.residual for b in ordered])
    if any(b.jacobian is None for b in ordered):
        return r, None
    n = {b.jacobian.shape[1] for b in ordered if len(b.residual)}
    if param_mask is not None:
        n.add(param_mask.size)
    if len(n) > 1:
        raise ValueError("blocks disagree on the number of active parameters")
    cols = n.pop() if n else (param_mask.size if param_mask is not None else 0)
    J = np.concatenate([np.sqrt(b.weight) * b.jacobian.reshape(len(b.residual), cols) for b in ordered])
    return r, J
