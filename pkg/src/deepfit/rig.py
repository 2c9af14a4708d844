"""Blendshape face rig with a skinned jaw joint and its rigid placement.

Vertex positions are ``x_R = R(theta) x(w) + t`` where ``x(w)`` is the
neutral mesh plus linear blendshape offsets, blended per vertex with a
rigid jaw transform.  Rotations use intrinsic X-Y-Z Euler angles, i.e.
``R = Rx(a) @ Ry(b) @ Rz(c)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

EULER_CONVENTION = "intrinsic-xyz"
TAGS = ("jaw", "mouth", "other")
LANDMARK_GROUPS = ("jaw", "mouth", "other")
N_LANDMARKS = 68
JAW_DOFS = ("rx", "ry", "rz", "tx", "ty", "tz")


class RigError(ValueError):
    pass


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_rotation(theta):
    """Rotation matrix for intrinsic X-Y-Z Euler angles and its partials.

    Returns ``(R, dR)`` with ``dR[i] = dR/dtheta_i``.
    """
    a, b, c = (float(x) for x in theta)
    X, Y, Z = _rx(a), _ry(b), _rz(c)
    R = X @ Y @ Z
    dR = np.stack([_drx(a) @ Y @ Z, X @ _dry(b) @ Z, X @ Y @ _drz(c)])
    return R, dR


def rotation_to_euler(R, reference=None):
    """Intrinsic X-Y-Z angles of ``R``.

    When ``reference`` is given, each angle is shifted by multiples of 2*pi
    to lie closest to it.
    """
    R = np.asarray(R, dtype=float)
    b = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    if abs(R[0, 2]) < 1.0 - 1e-12:
        a = np.arctan2(-R[1, 2], R[2, 2])
        c = np.arctan2(-R[0, 1], R[0, 0])
    else:  # gimbal lock; fold everything into a
        a = np.arctan2(R[2, 1], R[1, 1])
        c = 0.0
    theta = np.array([a, b, c])
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        theta = theta + 2 * np.pi * np.round((ref - theta) / (2 * np.pi))
    return theta


@dataclass(frozen=True)
class JawJoint:
    """Pivot and frame of the jaw bone.

    ``axes`` columns are the jaw-local axes in model space.  A unit change
    of a jaw rotation slot turns the jaw by ``rotation_scale`` radians; a
    unit change of a translation slot moves it ``translation_scale`` model
    units.
    """

    pivot: np.ndarray
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))
    rotation_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    translation_scale: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass(frozen=True, eq=False)
class FaceRig:
    neutral_vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    blendshape_deltas: np.ndarray  # (B, V, 3); zero for jaw slots
    shape_names: tuple
    shape_tags: tuple
    jaw_joint: JawJoint
    jaw_slots: tuple  # indices into w for rx, ry, rz, tx, ty, tz
    jaw_skin_weights: np.ndarray  # (V,)
    landmark_vertices: np.ndarray  # (68,) int
    landmark_groups: tuple  # (68,) labels from LANDMARK_GROUPS

    def __post_init__(self):
        validate_rig(self)

    @property
    def n_vertices(self):
        return len(self.neutral_vertices)

    @property
    def n_shapes(self):
        return len(self.shape_names)

    @property
    def n_params(self):
        return 6 + self.n_shapes

    def shape_index(self, name):
        try:
            return self.shape_names.index(name)
        except ValueError:
            raise RigError(f"unknown blendshape {name!r}") from None

    def shapes_with_tag(self, tag):
        return [i for i, t in enumerate(self.shape_tags) if t == tag]

    def landmarks_in_group(self, group):
        return np.array([i for i, g in enumerate(self.landmark_groups) if g == group], dtype=int)


def validate_rig(rig: FaceRig):
    V = len(rig.neutral_vertices)
    if rig.neutral_vertices.shape != (V, 3):
        raise RigError("neutral_vertices must be (V, 3)")
    tri = rig.triangles
    if tri.ndim != 2 or tri.shape[1] != 3:
        raise RigError("triangles must be (T, 3)")
    if len(tri) and (tri.min() < 0 or tri.max() >= V):
        raise RigError("triangle index out of range")
    B = len(rig.shape_names)
    if rig.blendshape_deltas.shape != (B, V, 3):
        raise RigError(f"blendshape_deltas must be ({B}, {V}, 3)")
    if len(rig.shape_tags) != B:
        raise RigError("every blendshape needs a tag")
    bad = [t for t in rig.shape_tags if t not in TAGS]
    if bad:
        raise RigError(f"unknown blendshape tags {bad}")
    if len(rig.jaw_slots) != 6 or len(set(rig.jaw_slots)) != 6:
        raise RigError("jaw_slots must name six distinct blendshape slots")
    for s in rig.jaw_slots:
        if not 0 <= s < B or rig.shape_tags[s] != "jaw":
            raise RigError("jaw slots must be jaw-tagged blendshapes")
        if np.any(rig.blendshape_deltas[s]):
            raise RigError("jaw slots must carry zero deltas")
    sw = rig.jaw_skin_weights
    if sw.shape != (V,) or np.any(sw < 0) or np.any(sw > 1):
        raise RigError("jaw_skin_weights must be V values in [0, 1]")
    lm = rig.landmark_vertices
    if lm.shape != (N_LANDMARKS,):
        raise RigError(f"exactly {N_LANDMARKS} landmark vertices required")
    if lm.min() < 0 or lm.max() >= V:
        raise RigError("landmark vertex index out of range")
    if len(rig.landmark_groups) != N_LANDMARKS or any(g not in LANDMARK_GROUPS for g in rig.landmark_groups):
        raise RigError("landmark groups must be 68 labels in {jaw, mouth, other}")
    for name, arr in (("neutral_vertices", rig.neutral_vertices), ("blendshape_deltas", rig.blendshape_deltas)):
        if not np.all(np.isfinite(arr)):
            raise RigError(f"{name} must be finite")


@dataclass
class PoseParams:
    theta: np.ndarray
    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.w = np.asarray(self.w, dtype=float).reshape(-1)

    @classmethod
    def neutral(cls, rig, t=(0.0, 0.0, 0.0)):
        return cls(np.zeros(3), np.asarray(t, dtype=float), np.zeros(rig.n_shapes))

    @classmethod
    def from_vector(cls, p):
        p = np.asarray(p, dtype=float)
        return cls(p[:3], p[3:6], p[6:])

    def to_vector(self):
        return np.concatenate([self.theta, self.t, self.w])

    def copy(self):
        return PoseParams(self.theta.copy(), self.t.copy(), self.w.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))


def _jaw_transform(rig, w):
    """Rotation (in model space) and translation of the jaw bone for weights w."""
    jj = rig.jaw_joint
    ang = w[list(rig.jaw_slots[:3])] * jj.rotation_scale
    Rj, dRj = euler_to_rotation(ang)
    A = jj.axes
    Rm = A @ Rj @ A.T
    dRm = np.einsum("ij,kjl,ml->kim", A, dRj, A) * jj.rotation_scale[:, None, None]
    tj = A @ (w[list(rig.jaw_slots[3:])] * jj.translation_scale)
    return Rm, dRm, tj


def _shaped(rig, w):
    return rig.neutral_vertices + np.tensordot(w, rig.blendshape_deltas, axes=1)


def evaluate_surface(rig: FaceRig, w) -> np.ndarray:
    """Unposed surface x(w): blendshapes first, then jaw skinning."""
    w = np.asarray(w, dtype=float)
    if w.shape != (rig.n_shapes,):
        raise RigError(f"expected {rig.n_shapes} weights, got shape {w.shape}")
    y = _shaped(rig, w)
    Rm, _, tj = _jaw_transform(rig, w)
    c = rig.jaw_joint.pivot
    # written as a displacement so the identity jaw adds exact zeros
    motion = (y - c) @ (Rm - np.eye(3)).T + tj
    return y + rig.jaw_skin_weights[:, None] * motion


def apply_rigid(vertices, theta, t) -> np.ndarray:
    R, _ = euler_to_rotation(theta)
    return np.asarray(vertices) @ R.T + np.asarray(t, dtype=float)


def posed_vertices(rig: FaceRig, p: PoseParams) -> np.ndarray:
    return apply_rigid(evaluate_surface(rig, p.w), p.theta, p.t)


def pose_jacobian(rig: FaceRig, p: PoseParams) -> sp.csc_matrix:
    """d x_R / d p as a (3V, 6 + B) sparse matrix, rows ordered (v, xyz)."""
    V, B = rig.n_vertices, rig.n_shapes
    w = p.w
    R, dR = euler_to_rotation(p.theta)
    x = evaluate_surface(rig, w)
    y = _shaped(rig, w)
    Rm, dRm, _ = _jaw_transform(rig, w)
    s = rig.jaw_skin_weights[:, None]
    c = rig.jaw_joint.pivot

    cols = np.empty((V, 3, 6 + B))
    for i in range(3):
        cols[:, :, i] = x @ dR[i].T
    cols[:, :, 3:6] = np.eye(3)[None]

    jaw_rot = list(rig.jaw_slots[:3])
    jaw_trans = list(rig.jaw_slots[3:])
    # non-jaw shapes pass through the skinning blend: ((1-s) I + s Rm) delta
    blend = (1.0 - s)[:, :, None] * np.eye(3)[None] + s[:, :, None] * Rm[None]
    for b in range(B):
        if b in jaw_rot:
            k = jaw_rot.index(b)
            d = s * ((y - c) @ dRm[k].T)
        elif b in jaw_trans:
            k = jaw_trans.index(b)
            axis = rig.jaw_joint.axes[:, k] * rig.jaw_joint.translation_scale[k]
            d = s * axis[None, :]
        else:
            d = np.einsum("vij,vj->vi", blend, rig.blendshape_deltas[b])
        cols[:, :, 6 + b] = d @ R.T
    return sp.csc_matrix(cols.reshape(3 * V, 6 + B))


# -- file format -------------------------------------------------------------

RIG_FORMAT = "deepfit-rig"


def rig_to_dict(rig: FaceRig) -> dict:
    shapes = []
    for b, (name, tag) in enumerate(zip(rig.shape_names, rig.shape_tags)):
        d = rig.blendshape_deltas[b]
        idx = np.flatnonzero(np.any(d != 0, axis=1))
        shapes.append({"name": name, "tag": tag, "indices": idx.tolist(), "offsets": d[idx].tolist()})
    jj = rig.jaw_joint
    return {
        "format": RIG_FORMAT,
        "version": 1,
        "vertices": rig.neutral_vertices.tolist(),
        "triangles": rig.triangles.tolist(),
        "blendshapes": shapes,
        "jaw": {
            "pivot": jj.pivot.tolist(),
            "axes": jj.axes.tolist(),
            "rotation_scale": jj.rotation_scale.tolist(),
            "translation_scale": jj.translation_scale.tolist(),
            "slots": [rig.shape_names[s] for s in rig.jaw_slots],
            "skin_weights": rig.jaw_skin_weights.tolist(),
        },
        "landmarks": {"vertices": rig.landmark_vertices.tolist(), "groups": list(rig.landmark_groups)},
    }


def rig_from_dict(d: dict) -> FaceRig:
    if d.get("format") != RIG_FORMAT:
        raise RigError(f"not a {RIG_FORMAT} file")
    try:
        verts = np.asarray(d["vertices"], dtype=float).reshape(-1, 3)
        tris = np.asarray(d["triangles"], dtype=np.int64).reshape(-1, 3)
        names, tags = [], []
        deltas = np.zeros((len(d["blendshapes"]), len(verts), 3))
        for b, s in enumerate(d["blendshapes"]):
            names.append(s["name"])
            tags.append(s["tag"])
            idx = np.asarray(s.get("indices", []), dtype=np.int64)
            if len(idx):
                if idx.min() < 0 or idx.max() >= len(verts):
                    raise RigError(f"blendshape {s['name']!r} vertex index out of range")
                deltas[b, idx] = np.asarray(s["offsets"], dtype=float).reshape(-1, 3)
        jaw = d["jaw"]
        joint = JawJoint(
            pivot=np.asarray(jaw["pivot"], dtype=float),
            axes=np.asarray(jaw.get("axes", np.eye(3)), dtype=float),
            rotation_scale=np.asarray(jaw.get("rotation_scale", [1, 1, 1]), dtype=float),
            translation_scale=np.asarray(jaw.get("translation_scale", [1, 1, 1]), dtype=float),
        )
        slots = tuple(names.index(n) for n in jaw["slots"])
        lm = d["landmarks"]
        return FaceRig(
            neutral_vertices=verts,
            triangles=tris,
            blendshape_deltas=deltas,
            shape_names=tuple(names),
            shape_tags=tuple(tags),
            jaw_joint=joint,
            jaw_slots=slots,
            jaw_skin_weights=np.asarray(jaw["skin_weights"], dtype=float),
            landmark_vertices=np.asarray(lm["vertices"], dtype=np.int64),
            landmark_groups=tuple(lm["groups"]),
        )
    except (KeyError, TypeError) as e:
        raise RigError(f"malformed rig file: {e}") from e
    except ValueError as e:
        if isinstance(e, RigError):
            raise
        raise RigError(f"malformed rig file: {e}") from e


def save_rig(rig: FaceRig, path):
    Path(path).write_text(json.dumps(rig_to_dict(rig)))


def load_rig(path) -> FaceRig:
    return rig_from_dict(json.loads(Path(path).read_text()))
