"""Temporal smoothing: windowed averaging with quaternion rotation means,
flow-based sweeps, and the averaging-then-plate-flow hybrid."""
from __future__ import annotations

import numpy as np

from ..rig import PoseParams, euler_to_rotation, rotation_to_euler
from .flowfit import FlowFitter, flow_smooth_sweep
from .stages import FrameState, SmoothingConfig


class DegenerateAverage(ValueError):
    pass


def rotation_to_quaternion(R):
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def euler_to_quaternion(theta):
    return rotation_to_quaternion(euler_to_rotation(theta)[0])


def quaternion_to_euler(q, reference=None):
    """Euler angles of ``q`` on the branch nearest ``reference``."""
    return rotation_to_euler(quaternion_to_rotation(q), reference)


def quaternion_average(quaternions, weights=None, tol=1e-12):
    """Weighted rotation mean: top eigenvector of sum w_i q_i q_i^T.

    The result has a non-negative scalar part.  Inputs whose top
    eigenvalue is not unique (for example two opposite rotations with
    equal weight) have no defined mean and raise DegenerateAverage.
    """
    Q = np.asarray(quaternions, dtype=float).reshape(-1, 4)
    if len(Q) == 0:
        raise ValueError("no quaternions to average")
    w = np.ones(len(Q)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(Q),) or (w <= 0).any():
        raise ValueError("weights must be positive, one per quaternion")
    norms = np.linalg.norm(Q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("quaternions must have unit norm")
    M = np.einsum("i,ij,ik->jk", w, Q, Q)
    vals, vecs = np.linalg.eigh(M)
    if vals[-1] - vals[-2] <= tol * max(vals[-1], 1.0):
        raise DegenerateAverage("rotation average is not unique")
    q = vecs[:, -1]
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def _window(n, i, weights):
    idx, ws = [], []
    for off, wt in zip((-1, 0, 1), weights):
        j = i + off
        if 0 <= j < n and wt > 0:
            idx.append(j)
            ws.append(wt)
    ws = np.asarray(ws, dtype=float)
    return idx, ws / ws.sum()


def average_params(params, weights=(0.25, 0.5, 0.25)):
    """One Jacobi pass of three-frame weighted averaging.

    Translations and blendshape weights are averaged linearly; rotations
    through quaternions and converted back on the Euler branch of the
    frame's own angles.  End frames renormalise the one-sided window.
    """
    n = len(params)
    out = []
    for i in range(n):
        idx, ws = _window(n, i, weights)
        if len(idx) == 1:
            out.append(params[i].copy())
            continue
        t = sum(wt * params[j].t for j, wt in zip(idx, ws))
        w = sum(wt * params[j].w for j, wt in zip(idx, ws))
        q = quaternion_average([euler_to_quaternion(params[j].theta) for j in idx], ws)
        theta = quaternion_to_euler(q, params[i].theta)
        out.append(PoseParams(theta, t, w))
    return out


def second_difference_norm(params):
    """Sum over interior frames of |p[i+1] - 2 p[i] + p[i-1]|^2."""
    P = np.array([p.to_vector() for p in params])
    if len(P) < 3:
        return 0.0
    d = P[2:] - 2 * P[1:-1] + P[:-2]
    return float((d * d).sum())


def smooth(frames, config: SmoothingConfig, fitter: FlowFitter | None = None):
    """Apply ``config.sweeps`` smoothing sweeps to solved frames."""
    frames = [f.copy() for f in frames]
    if any(f.params is None for f in frames):
        raise ValueError("every frame needs parameters before smoothing")
    if config.mode in ("self_flow", "plate_flow", "hybrid") and fitter is None:
        raise ValueError(f"{config.mode} smoothing needs a flow fitter")
    refs = [f.params.copy() for f in frames]
    if config.mode in ("averaging", "hybrid"):
        for _ in range(config.sweeps):
            avg = average_params([f.params for f in frames], config.window)
            for f, p in zip(frames, avg):
                f.params = p
        refs = [f.params.copy() for f in frames]
    if config.mode in ("self_flow", "plate_flow", "hybrid"):
        mode = "self" if config.mode == "self_flow" else "plate"
        for _ in range(config.sweeps):
            frames = flow_smooth_sweep(frames, fitter, mode, config.flow_stage, config.prior_weight,
                                       references=refs, gauss_seidel=config.gauss_seidel)
    for f in frames:
        if f.status != "smoothed":
            f.advance("smoothed")
    return frames
