"""A procedurally generated face rig for synthetic experiments.

The face is a height field over a regular grid (model units are
centimetres, +y up, +z towards the viewer) with a nose, brow ridge, eye
sockets and lips, a 68-point landmark layout in the usual iBUG order,
a six-slot jaw and a handful of mouth and brow blendshapes.
"""
from __future__ import annotations

import numpy as np

from .rig import FaceRig, JawJoint

JAW_SLOT_NAMES = ("jaw_open", "jaw_yaw", "jaw_roll", "jaw_side", "jaw_drop", "jaw_forward")
MOUTH_SHAPES = ("mouth_smile", "mouth_pucker", "upper_lip_raise", "lower_lip_depress")
OTHER_SHAPES = ("brow_raise",)

# consecutive landmark chains used by edge energies; closed chains wrap
EDGE_CHAINS = (
    (tuple(range(0, 17)), False),
    (tuple(range(17, 22)), False),
    (tuple(range(22, 27)), False),
    (tuple(range(27, 31)), False),
    (tuple(range(31, 36)), False),
    (tuple(range(36, 42)), True),
    (tuple(range(42, 48)), True),
    (tuple(range(48, 60)), True),
    (tuple(range(60, 68)), True),
)


def _gauss(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def _height(x, y):
    base = 8.0 * np.sqrt(np.clip(1.0 - (x / 9.0) ** 2 - (y / 13.0) ** 2, 0.0, None))
    nose = 1.8 * _gauss(x, y, 0.0, -1.2, 0.75, 1.7) * np.clip((y + 3.2) / 1.0, 0.0, 1.0) ** 0.5
    tip = 0.5 * _gauss(x, y, 0.0, -2.4, 0.9, 0.6)
    brow = 0.45 * _gauss(x, y, -2.8, 3.4, 1.8, 0.6) + 0.45 * _gauss(x, y, 2.8, 3.4, 1.8, 0.6)
    sockets = -0.6 * _gauss(x, y, -2.8, 1.8, 1.2, 0.7) - 0.6 * _gauss(x, y, 2.8, 1.8, 1.2, 0.7)
    lips = 0.35 * _gauss(x, y, 0.0, -4.3, 1.9, 0.35) + 0.4 * _gauss(x, y, 0.0, -5.7, 1.8, 0.4)
    chin = 0.4 * _gauss(x, y, 0.0, -8.2, 1.8, 0.9)
    return base + nose + tip + brow + sockets + lips + chin


def landmark_targets() -> np.ndarray:
    """68 (x, y) positions on the face front, iBUG ordering."""
    pts = []
    # jaw contour 0..16, from the right temple (image left) round the chin
    for k in range(17):
        phi = np.pi + np.pi * k / 16.0
        pts.append((6.2 * np.cos(phi), 1.0 + 9.6 * np.sin(phi) * (0.55 + 0.45 * abs(np.sin(phi)))))
    # brows 17..26
    for k in range(5):
        pts.append((-5.0 + 0.95 * k, 3.5 + 0.35 * np.sin(np.pi * k / 4)))
    for k in range(5):
        pts.append((1.2 + 0.95 * k, 3.5 + 0.35 * np.sin(np.pi * (4 - k) / 4)))
    # nose bridge 27..30 and base 31..35
    for k in range(4):
        pts.append((0.0, 2.3 - 1.15 * k))
    for k in range(5):
        pts.append((-1.5 + 0.75 * k, -2.9 - 0.2 * np.sin(np.pi * k / 4)))
    # eyes 36..47: six points each, outer corner first, clockwise in the image
    for cx in (-2.8, 2.8):
        for k in range(6):
            a = np.pi - 2 * np.pi * k / 6
            pts.append((cx + 1.05 * np.cos(a), 1.8 + 0.5 * np.sin(a)))
    # outer lip 48..59
    for k in range(12):
        a = np.pi - 2 * np.pi * k / 12
        pts.append((2.4 * np.cos(a), -5.0 + 1.3 * np.sin(a)))
    # inner lip 60..67: corners, then three points along each lip
    inner = [(-1.7, 0.0), (-0.8, 0.5), (0.0, 0.55), (0.8, 0.5), (1.7, 0.0), (0.8, -0.5), (0.0, -0.55), (-0.8, -0.5)]
    pts.extend((x, -5.0 + y) for x, y in inner)
    return np.array(pts)


def landmark_groups():
    return tuple("jaw" if i < 17 else "mouth" if i >= 48 else "other" for i in range(68))


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def build_face_rig(spacing=0.25, jaw_rotation_scale=np.deg2rad(15.0)) -> FaceRig:
    xs = np.arange(-7.5, 7.5 + 1e-9, spacing)
    ys = np.arange(-10.5, 8.5 + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys)
    keep = (gx / 7.5) ** 2 + ((gy + 1.0) / 9.6) ** 2 <= 1.0
    index = -np.ones(gx.shape, dtype=np.int64)
    index[keep] = np.arange(keep.sum())
    x, y = gx[keep], gy[keep]
    verts = np.stack([x, y, _height(x, y)], axis=1)

    tris = []
    ny, nx = gx.shape
    for i in range(ny - 1):
        for j in range(nx - 1):
            a, b, c, d = index[i, j], index[i, j + 1], index[i + 1, j], index[i + 1, j + 1]
            # counter-clockwise seen from +z; rows increase with y
            if a >= 0 and b >= 0 and d >= 0:
                tris.append((a, b, d))
            if a >= 0 and d >= 0 and c >= 0:
                tris.append((a, d, c))
    tris = np.array(tris, dtype=np.int64)

    targets = landmark_targets()
    lm = np.array([np.argmin((x - px) ** 2 + (y - py) ** 2) for px, py in targets], dtype=np.int64)

    # jaw region: below a boundary running from the mouth corners up to the ears
    y_b = -5.0 + np.clip(np.abs(x) - 2.0, 0.0, None) * 1.0
    skin = _smoothstep((y_b + 0.3 - y) / 0.6)

    names = list(JAW_SLOT_NAMES) + list(MOUTH_SHAPES) + list(OTHER_SHAPES)
    tags = ["jaw"] * 6 + ["mouth"] * len(MOUTH_SHAPES) + ["other"] * len(OTHER_SHAPES)
    deltas = np.zeros((len(names), len(x), 3))
    corner_l = _gauss(x, y, -2.4, -5.0, 0.9, 0.8)
    corner_r = _gauss(x, y, 2.4, -5.0, 0.9, 0.8)
    mouth = _gauss(x, y, 0.0, -5.0, 2.2, 1.3)
    upper = mouth * (y > -5.0) * _gauss(x, y, 0.0, -4.3, 2.0, 0.7)
    lower = mouth * (y <= -5.0) * _gauss(x, y, 0.0, -5.8, 2.0, 0.7)
    k = 6
    deltas[k, :, 0] = 0.45 * (corner_r - corner_l)
    deltas[k, :, 1] = 0.35 * (corner_r + corner_l)
    deltas[k, :, 2] = -0.1 * (corner_r + corner_l)
    deltas[k + 1, :, 0] = -0.35 * mouth * np.tanh(x / 1.2)
    deltas[k + 1, :, 2] = 0.5 * mouth
    deltas[k + 2, :, 1] = 0.4 * upper
    deltas[k + 3, :, 1] = -0.4 * lower
    brows = _gauss(x, y, -2.8, 3.5, 1.8, 0.7) + _gauss(x, y, 2.8, 3.5, 1.8, 0.7)
    deltas[k + 4, :, 1] = 0.5 * brows
    deltas[np.abs(deltas) < 1e-6] = 0.0

    joint = JawJoint(
        pivot=np.array([0.0, 0.5, -7.5]),
        axes=np.eye(3),
        rotation_scale=np.full(3, jaw_rotation_scale),
        translation_scale=np.full(3, 0.2),
    )
    return FaceRig(
        neutral_vertices=verts,
        triangles=tris,
        blendshape_deltas=deltas,
        shape_names=tuple(names),
        shape_tags=tuple(tags),
        jaw_joint=joint,
        jaw_slots=tuple(range(6)),
        jaw_skin_weights=skin,
        landmark_vertices=lm,
        landmark_groups=landmark_groups(),
    )


# chroma-circle slot of every landmark; landmarks whose colours are within
# four slots of each other sit at least 2.6 cm apart on the face
FIDUCIAL_SLOTS = (
    25, 67, 50, 42, 36, 13, 19, 56, 61, 41, 54, 37, 48, 11, 16, 0, 5, 44, 3, 49, 66, 12, 34,
    10, 65, 60, 21, 43, 62, 28, 22, 59, 27, 32, 38, 57, 9, 39, 30, 55, 17, 24, 51, 23, 4, 33,
    46, 18, 53, 6, 64, 14, 45, 7, 31, 2, 15, 8, 35, 29, 47, 1, 20, 52, 63, 26, 58, 40,
)


def chroma_circle_color(angle, radius=0.42, brightness=1.2):
    """RGB with channel sum ``brightness`` and opponent chroma on a circle."""
    u, v = radius * np.cos(angle), radius * np.sin(angle)
    s = brightness
    b = s * (1.0 - np.sqrt(3.0) * v) / 3.0
    rg = s - b
    return np.stack([0.5 * (rg + u * s), 0.5 * (rg - u * s), b], axis=-1)


def fiducial_colors(n=68, slots=FIDUCIAL_SLOTS, radius=0.42, brightness=1.2):
    """One colour per landmark, evenly spaced around a chroma circle."""
    slots = np.asarray(slots[:n]) if n <= len(slots) else np.arange(n)
    return chroma_circle_color(2 * np.pi * slots / len(slots), radius, brightness)


def skin_albedo(rig: FaceRig, base=(0.7, 0.55, 0.45), variation=0.04):
    x, y = rig.neutral_vertices[:, 0], rig.neutral_vertices[:, 1]
    tint = variation * np.sin(0.5 * x) * np.cos(0.4 * y)
    alb = np.asarray(base)[None, :] + tint[:, None]
    lips = _gauss(x, y, 0.0, -5.0, 2.2, 1.0)
    alb = alb + lips[:, None] * np.array([0.04, -0.06, -0.04])
    return np.clip(alb, 0.0, 1.0)


def paint_fiducials(rig: FaceRig, albedo, radius=0.45, colors=None):
    """Paint a small disk of unique colour around every landmark vertex."""
    albedo = np.array(albedo, dtype=float, copy=True)
    colors = fiducial_colors() if colors is None else colors
    xy = rig.neutral_vertices[:, :2]
    centers = xy[rig.landmark_vertices]
    d2 = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    nearest = np.argmin(d2, axis=1)
    inside = d2[np.arange(len(xy)), nearest] <= radius ** 2 + 1e-9
    albedo[inside] = colors[nearest[inside]]
    return albedo
