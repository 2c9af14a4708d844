"""Differentiable z-buffered rasterizer with spherical-harmonics shading.

Pixel centres sit at integer coordinates: pixel (row i, column j) is the
point (x=j, y=i).  Shading is Gouraud style: every vertex is lit with
nine SH coefficients per channel, and pixels interpolate vertex colours
with screen-space barycentrics.  The Jacobian of the image with respect
to vertex positions follows the same chain (projection, barycentrics,
smooth vertex normals) analytically; occlusion-boundary pixels keep the
interior formula and no silhouette-motion term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Y00 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = 1.0925484305920792
_C3 = 0.31539156525252005
_C4 = 0.5462742152960396

BACKGROUND = 0.5
_BARY_EPS = 1e-9


class AppearanceFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; extrinsics map world points to camera space.

    Camera space is x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    t: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 50.0]))
    near: float = 1e-3

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            R=np.asarray(d["R"], dtype=float), t=np.asarray(d["t"], dtype=float),
        )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Extrinsics (R, t) for a camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)  # image x: right
    x /= np.linalg.norm(x)
    y = np.cross(z, x)  # image y: down
    R = np.stack([x, y, z])
    return R, -R @ eye


def default_camera(width=256, height=192, focal=340.0, distance=50.0):
    R, t = look_at((0.0, 0.0, distance))
    return Camera(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height, R, t)


@dataclass
class AppearanceModel:
    albedo: np.ndarray  # (V, 3)
    sh_coeffs: np.ndarray  # (9, 3)

    def __post_init__(self):
        self.albedo = np.clip(np.asarray(self.albedo, dtype=float), 0.0, 1.0)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float)
        if self.sh_coeffs.shape != (9, 3):
            raise ValueError("sh_coeffs must be 9 coefficients per colour channel")
        if self.albedo.ndim != 2 or self.albedo.shape[1] != 3:
            raise ValueError("albedo must be (V, 3)")

    def to_dict(self):
        return {"format": "deepfit-appearance", "albedo": self.albedo.tolist(), "sh_coeffs": self.sh_coeffs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["albedo"], dtype=float), np.asarray(d["sh_coeffs"], dtype=float))


def white_light(direction=(-0.3, 0.4, 1.0), strength=0.35):
    """Unit ambient irradiance plus a soft directional term, equal in all channels."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    c = np.zeros(9)
    c[0] = 1.0 / Y00
    c[1], c[2], c[3] = strength * d[1] / _C1, strength * d[2] / _C1, strength * d[0] / _C1
    return np.repeat(c[:, None], 3, axis=1)


@dataclass
class MeshSurface:
    vertices: np.ndarray
    triangles: np.ndarray


# -- projection -------------------------------------------------------------

def project(camera: Camera, points):
    """Pixel coordinates of world points, their 2x3 derivatives, validity."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    Xc = X @ camera.R.T + camera.t
    z = Xc[:, 2]
    valid = z > camera.near
    zs = np.where(valid, z, 1.0)
    u = camera.fx * Xc[:, 0] / zs + camera.cx
    v = camera.fy * Xc[:, 1] / zs + camera.cy
    Jc = np.zeros((len(X), 2, 3))
    Jc[:, 0, 0] = camera.fx / zs
    Jc[:, 0, 2] = -camera.fx * Xc[:, 0] / zs ** 2
    Jc[:, 1, 1] = camera.fy / zs
    Jc[:, 1, 2] = -camera.fy * Xc[:, 1] / zs ** 2
    J = Jc @ camera.R
    return np.stack([u, v], axis=1), J, valid


# -- shading ----------------------------------------------------------------

def sh_basis(n):
    """Real SH basis (9) at unit normals and its derivative w.r.t. the normal."""
    n = np.atleast_2d(n)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    one, zero = np.ones_like(x), np.zeros_like(x)
    Y = np.stack([
        Y00 * one, _C1 * y, _C1 * z, _C1 * x,
        _C2 * x * y, _C2 * y * z, _C3 * (3 * z * z - 1), _C2 * x * z, _C4 * (x * x - y * y),
    ], axis=1)
    dY = np.stack([
        np.stack([zero, zero, zero], 1),
        np.stack([zero, _C1 * one, zero], 1),
        np.stack([zero, zero, _C1 * one], 1),
        np.stack([_C1 * one, zero, zero], 1),
        np.stack([_C2 * y, _C2 * x, zero], 1),
        np.stack([zero, _C2 * z, _C2 * y], 1),
        np.stack([zero, zero, 6 * _C3 * z], 1),
        np.stack([_C2 * z, zero, _C2 * x], 1),
        np.stack([2 * _C4 * x, -2 * _C4 * y, zero], 1),
    ], axis=1)
    return Y, dY


def shade(normal, albedo, sh_coeffs):
    """Clamped RGB of albedo under SH light, with derivatives.

    Returns ``(rgb, d_rgb/d_normal (N,3,3), d_rgb/d_albedo (N,3))``; the
    albedo derivative is diagonal so only its diagonal is returned.
    """
    Y, dY = sh_basis(normal)
    albedo = np.atleast_2d(albedo)
    irr = Y @ sh_coeffs  # (N, 3)
    raw = albedo * irr
    live = (raw > 0.0) & (raw < 1.0)
    rgb = np.clip(raw, 0.0, 1.0)
    d_irr = np.einsum("nkj,kc->ncj", dY, sh_coeffs)
    d_normal = albedo[:, :, None] * d_irr * live[:, :, None]
    d_albedo = irr * live
    return rgb, d_normal, d_albedo


# -- normals ----------------------------------------------------------------

def _skew(v):
    z = np.zeros(len(v))
    return np.stack([
        np.stack([z, -v[:, 2], v[:, 1]], 1),
        np.stack([v[:, 2], z, -v[:, 0]], 1),
        np.stack([-v[:, 1], v[:, 0], z], 1),
    ], 1)


def vertex_normals(vertices, triangles, with_jacobian=False):
    """Area-weighted smooth vertex normals, optionally with d n_hat / d X."""
    V = len(vertices)
    x0, x1, x2 = (vertices[triangles[:, k]] for k in range(3))
    a, b = x1 - x0, x2 - x0
    fn = np.cross(a, b)
    N = np.zeros((V, 3))
    for k in range(3):
        np.add.at(N, triangles[:, k], fn)
    norm = np.linalg.norm(N, axis=1)
    ok = norm > 1e-15
    n_hat = np.where(ok[:, None], N / np.where(ok, norm, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
    if not with_jacobian:
        return n_hat
    # d n_hat / d N for every vertex
    P = (np.eye(3)[None] - n_hat[:, :, None] * n_hat[:, None, :]) / np.where(ok, norm, 1.0)[:, None, None]
    P[~ok] = 0.0
    Sa, Sb = _skew(a), _skew(b)
    dfn = np.stack([Sb - Sa, -Sb, Sa], axis=1)  # (T, 3 wrt-vertex, 3, 3)
    rows, cols, vals = [], [], []
    base = np.arange(3)
    for k in range(3):  # owner vertex of the normal
        owner = triangles[:, k]
        for j in range(3):  # vertex being moved
            blk = np.einsum("tij,tjl->til", P[owner], dfn[:, j])
            r = (3 * owner[:, None, None] + base[None, :, None]).repeat(3, axis=2)
            c = (3 * triangles[:, j][:, None, None] + base[None, None, :]).repeat(3, axis=1)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(blk.ravel())
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * V, 3 * V))
    return n_hat, J


# -- rasterization ----------------------------------------------------------

@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3)
    triangle_id: np.ndarray  # (H, W), -1 for background
    barycentric: np.ndarray  # (H, W, 3)
    uv: np.ndarray  # (V, 2) projected vertices
    vertex_colors: np.ndarray  # (V, 3)
    background: float = BACKGROUND
    vertex_jacobian: sp.csr_matrix | None = None

    @property
    def mask(self):
        return self.triangle_id >= 0

    @property
    def shape(self):
        return self.image.shape[:2]


def _coverage(uv, depth, valid, triangles, width, height, cull_backfaces):
    q = uv[triangles]  # (T, 3, 2)
    D = (q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1]) - (q[:, 1, 1] - q[:, 0, 1]) * (q[:, 2, 0] - q[:, 0, 0])
    keep = valid[triangles].all(axis=1) & (np.abs(D) > 1e-12)
    if cull_backfaces:
        # counter-clockwise in the world appears clockwise in a y-down image
        keep &= D < 0
    tid = np.flatnonzero(keep)
    if len(tid) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 3))
    qk = q[tid]
    x0 = np.clip(np.ceil(qk[:, :, 0].min(1)), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(qk[:, :, 0].max(1)), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(qk[:, :, 1].min(1)), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(qk[:, :, 1].max(1)), 0, height - 1).astype(np.int64)
    inside_img = (qk[:, :, 0].max(1) >= 0) & (qk[:, :, 0].min(1) <= width - 1)
    inside_img &= (qk[:, :, 1].max(1) >= 0) & (qk[:, :, 1].min(1) <= height - 1)
    nx = np.where(inside_img, np.maximum(x1 - x0 + 1, 0), 0)
    ny = np.where(inside_img, np.maximum(y1 - y0 + 1, 0), 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 3))
    rep = np.repeat(np.arange(len(tid)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - start
    px = x0[rep] + off % nx[rep]
    py = y0[rep] + off // nx[rep]
    p = np.stack([px, py], axis=1).astype(float)
    qa, qb, qc = qk[rep, 0], qk[rep, 1], qk[rep, 2]
    Dk = D[tid][rep]

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    b0 = cross(qb - p, qc - p) / Dk
    b1 = cross(qc - p, qa - p) / Dk
    b2 = cross(qa - p, qb - p) / Dk
    bary = np.stack([b0, b1, b2], axis=1)
    inside = (bary >= -_BARY_EPS).all(axis=1)
    tri = tid[rep[inside]]
    bary = bary[inside]
    pix = (py * width + px)[inside]
    z = (bary * depth[triangles[tri]]).sum(axis=1)
    order = np.lexsort((tri, z, pix))
    pix, tri, bary = pix[order], tri[order], bary[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    bary = np.clip(bary[first], 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return pix[first], tri[first], bary


def rasterize(camera: Camera, surface: MeshSurface, appearance: AppearanceModel,
              background=BACKGROUND, cull_backfaces=True, with_jacobian=False) -> RenderResult:
    verts = np.asarray(surface.vertices, dtype=float)
    tris = np.asarray(surface.triangles, dtype=np.int64)
    if len(verts) != len(appearance.albedo):
        raise ValueError("surface and appearance vertex counts differ")
    H, W = camera.height, camera.width
    image = np.full((H, W, 3), float(background))
    tri_id = -np.ones((H, W), dtype=np.int64)
    bary_img = np.zeros((H, W, 3))
    if len(verts) == 0 or len(tris) == 0:
        return RenderResult(image, tri_id, bary_img, np.zeros((0, 2)), np.zeros((0, 3)), background)
    uv, _, valid = project(camera, verts)
    depth = verts @ camera.R[2] + camera.t[2]
    normals = vertex_normals(verts, tris)
    colors, _, _ = shade(normals, appearance.albedo, appearance.sh_coeffs)
    pix, tri, bary = _coverage(uv, depth, valid, tris, W, H, cull_backfaces)
    flat = image.reshape(-1, 3)
    flat[pix] = np.einsum("nk,nkc->nc", bary, colors[tris[tri]])
    tri_id.reshape(-1)[pix] = tri
    bary_img.reshape(-1, 3)[pix] = bary
    result = RenderResult(image, tri_id, bary_img, uv, colors, background)
    if with_jacobian:
        result.vertex_jacobian = render_jacobian(result, camera, surface, appearance)
    return result


def boundary_pixels(result: RenderResult, triangles) -> np.ndarray:
    """Covered pixels next to background or to a triangle sharing no vertex."""
    tid = result.triangle_id
    H, W = tid.shape
    covered = tid >= 0
    out = np.zeros_like(covered)
    tris = np.asarray(triangles)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = np.full_like(tid, -1)
        ys = slice(max(dy, 0), H + min(dy, 0))
        yd = slice(max(-dy, 0), H + min(-dy, 0))
        xs = slice(max(dx, 0), W + min(dx, 0))
        xd = slice(max(-dx, 0), W + min(-dx, 0))
        nb[yd, xd] = tid[ys, xs]
        edge = covered & (nb < 0)
        both = covered & (nb >= 0) & (nb != tid)
        if both.any():
            a = tris[tid[both]]
            b = tris[nb[both]]
            share = (a[:, :, None] == b[:, None, :]).any(axis=(1, 2))
            sub = np.zeros(both.sum(), dtype=bool)
            sub[~share] = True
            edge[both] = sub
        # image borders also count as boundary
        if dy == 1:
            edge[-1] |= covered[-1]
        elif dy == -1:
            edge[0] |= covered[0]
        elif dx == 1:
            edge[:, -1] |= covered[:, -1]
        else:
            edge[:, 0] |= covered[:, 0]
        out |= edge
    return out


def render_jacobian(result: RenderResult, camera: Camera, surface: MeshSurface,
                    appearance: AppearanceModel, pixels=None) -> sp.csr_matrix:
    """Sparse d(image) / d(vertex positions), shape (3HW, 3V).

    Rows are ordered (pixel, channel).  ``pixels`` (flat indices) limits
    the rows that are filled in; all others stay empty.
    """
    verts = np.asarray(surface.vertices, dtype=float)
    tris = np.asarray(surface.triangles, dtype=np.int64)
    H, W = result.shape
    V = len(verts)
    tid = result.triangle_id.reshape(-1)
    pix = np.flatnonzero(tid >= 0)
    if pixels is not None:
        pix = np.intersect1d(pix, np.asarray(pixels, dtype=np.int64))
    if len(pix) == 0:
        return sp.csr_matrix((3 * H * W, 3 * V))
    tri = tid[pix]
    bary = result.barycentric.reshape(-1, 3)[pix]
    vj = tris[tri]  # (N, 3)
    uv, P, _ = project(camera, verts)
    q = uv[vj]  # (N, 3, 2)
    p = np.stack([pix % W, pix // W], axis=1).astype(float)
    r = q - p[:, None, :]

    def dcross_a(bvec):  # d cross(a, b) / d a
        return np.stack([bvec[:, 1], -bvec[:, 0]], axis=1)

    def dcross_b(avec):  # d cross(a, b) / d b
        return np.stack([-avec[:, 1], avec[:, 0]], axis=1)

    N = len(pix)
    dE = np.zeros((N, 3, 3, 2))
    # E0 = cross(r1, r2), E1 = cross(r2, r0), E2 = cross(r0, r1)
    for i, (ia, ib) in enumerate(((1, 2), (2, 0), (0, 1))):
        dE[:, i, ia] = dcross_a(r[:, ib])
        dE[:, i, ib] = dcross_b(r[:, ia])
    D = (q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1]) - (q[:, 1, 1] - q[:, 0, 1]) * (q[:, 2, 0] - q[:, 0, 0])
    dD = dE.sum(axis=1)  # (N, 3, 2)
    db = (dE - bary[:, :, None, None] * dD[:, None]) / D[:, None, None, None]
    cols_rgb = result.vertex_colors[vj]  # (N, 3 i, 3 ch)
    dC_dq = np.einsum("nic,nijk->ncjk", cols_rgb, db)
    dC_dX = np.einsum("ncjk,njkl->ncjl", dC_dq, P[vj])  # (N, 3ch, 3j, 3xyz)

    ch = np.arange(3)
    rows = (3 * pix[:, None, None, None] + ch[None, :, None, None]) + np.zeros((1, 1, 3, 3), dtype=np.int64)
    cols = (3 * vj[:, None, :, None] + ch[None, None, None, :]) + np.zeros((1, 3, 1, 1), dtype=np.int64)
    J_bary = sp.csr_matrix((dC_dX.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * H * W, 3 * V))

    # shading path: pixel <- vertex colours <- vertex normals <- vertex positions
    normals, dN = vertex_normals(verts, tris, with_jacobian=True)
    _, d_normal, _ = shade(normals, appearance.albedo, appearance.sh_coeffs)
    blk_rows = (3 * np.arange(V)[:, None, None] + ch[None, :, None]).repeat(3, axis=2)
    blk_cols = (3 * np.arange(V)[:, None, None] + ch[None, None, :]).repeat(3, axis=1)
    Cn = sp.csr_matrix((d_normal.ravel(), (blk_rows.ravel(), blk_cols.ravel())), shape=(3 * V, 3 * V))
    interp = interpolation_matrix(pix, vj, bary, H * W, V)
    return (J_bary + interp @ (Cn @ dN)).tocsr()


def interpolation_matrix(pix, vj, bary, n_pixels, n_vertices):
    """(3P, 3V) sparse map from per-vertex RGB to per-pixel RGB."""
    ch = np.arange(3)
    rows = (3 * pix[:, None, None] + ch[None, None, :]).repeat(3, axis=1)
    cols = 3 * vj[:, :, None] + ch[None, None, :]
    vals = np.repeat(bary[:, :, None], 3, axis=2)
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n_pixels, 3 * n_vertices))


# -- appearance -------------------------------------------------------------

@dataclass
class AppearanceFitOptions:
    iterations: int = 100
    smoothness: float = 1e-2
    dc_reference: float = 1.0 / Y00  # gauge: band-0 coefficient of every channel
    min_pixels: int = 100
    tolerance: float = 1e-12  # relative cost decrease that ends the fit


def mesh_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _fit_channel(interp, Y, target, GtG, G, smooth, opts):
    """Damped Gauss-Newton over (albedo, SH bands 1-2) for one channel.

    The data term is bilinear in albedo and lighting, so alternating
    linear solves stall along the weakly constrained albedo/lighting
    trade-off.  A joint step with the Schur complement on the 8 lighting
    unknowns follows it.
    """
    V = Y.shape[0]
    Yr = Y[:, 1:]
    c = np.zeros(8)
    dc = opts.dc_reference

    def irradiance(c):
        return dc * Y[:, 0] + Yr @ c

    def cost_of(a, c):
        r = interp @ (a * irradiance(c)) - target
        g = G @ a
        return float(r @ r + smooth * g @ g), r

    # albedo for the ambient-only light as the starting point
    M = interp @ sp.diags(irradiance(c))
    a = spla.spsolve((M.T @ M + GtG + 1e-9 * sp.identity(V)).tocsc(), M.T @ target)
    cost, r = cost_of(a, c)
    mu = 1e-6
    for _ in range(opts.iterations):
        irr = irradiance(c)
        Ja = interp @ sp.diags(irr)
        Jc = np.asarray((interp @ sp.diags(a)) @ Yr)
        A = (Ja.T @ Ja + GtG).tocsc()
        diag_a = A.diagonal()
        Bm = np.asarray(Ja.T @ Jc)
        C = Jc.T @ Jc
        ga = Ja.T @ r + smooth * (G.T @ (G @ a))
        gc = Jc.T @ r
        improved = False
        for _ in range(12):
            Ad = (A + sp.diags(mu * np.maximum(diag_a, 1e-12) + 1e-12)).tocsc()
            lu = spla.splu(Ad)
            AiB = lu.solve(Bm)
            Aiga = lu.solve(ga)
            S = C + mu * np.diag(np.maximum(np.diag(C), 1e-12)) + 1e-12 * np.eye(8) - Bm.T @ AiB
            dcv = np.linalg.solve(S, -(gc - Bm.T @ Aiga))
            da = -Aiga - AiB @ dcv
            new_cost, new_r = cost_of(a + da, c + dcv)
            if new_cost < cost:
                a, c, r = a + da, c + dcv, new_r
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                mu = max(mu / 10, 1e-12)
                improved = True
                break
            mu *= 10
        if not improved or rel < opts.tolerance:
            break
    return a, np.r_[dc, c]


def fit_appearance(captured_image, camera: Camera, posed_surface: MeshSurface,
                   options: AppearanceFitOptions | None = None) -> AppearanceModel:
    """Joint least-squares fit of per-vertex albedo and SH lighting.

    Minimises the pixel error plus an albedo smoothness term over mesh
    edges.  Per-vertex albedo can absorb any shading, so the lighting is
    determined by the smoothness prior; the albedo/light scale ambiguity
    is fixed by holding every channel's band-0 coefficient at
    ``options.dc_reference``.
    """
    opts = options or AppearanceFitOptions()
    verts = np.asarray(posed_surface.vertices, dtype=float)
    tris = np.asarray(posed_surface.triangles, dtype=np.int64)
    V = len(verts)
    H, W = camera.height, camera.width
    img = np.asarray(captured_image, dtype=float).reshape(H * W, 3)
    probe = AppearanceModel(np.full((V, 3), 0.5), white_light(strength=0.0))
    res = rasterize(camera, posed_surface, probe)
    tid = res.triangle_id.reshape(-1)
    pix = np.flatnonzero(tid >= 0)
    # clamped observations carry no linear information
    pix = pix[(img[pix] < 1.0 - 1e-6).all(axis=1)]
    if len(pix) < opts.min_pixels:
        raise AppearanceFitError(f"only {len(pix)} covered pixels; need {opts.min_pixels}")
    vj = tris[tid[pix]]
    bary = res.barycentric.reshape(-1, 3)[pix]
    target = img[pix]  # (P, 3)
    Y, _ = sh_basis(vertex_normals(verts, tris))
    n_pix = len(pix)
    interp = sp.csr_matrix(
        (bary.ravel(), (np.repeat(np.arange(n_pix), 3), vj.ravel())), shape=(n_pix, V))

    edges = mesh_edges(tris)
    G = sp.csr_matrix(
        (np.r_[np.ones(len(edges)), -np.ones(len(edges))],
         (np.r_[np.arange(len(edges)), np.arange(len(edges))], np.r_[edges[:, 0], edges[:, 1]])),
        shape=(len(edges), V))
    GtG = (G.T @ G) * opts.smoothness

    albedo = np.zeros((V, 3))
    sh = np.zeros((9, 3))
    for ch in range(3):
        albedo[:, ch], sh[:, ch] = _fit_channel(interp, Y, target[:, ch], GtG, G, opts.smoothness, opts)
    return AppearanceModel(np.clip(albedo, 0.0, 1.0), sh)


def visible_vertices(result: RenderResult, triangles, n_vertices):
    tid = result.triangle_id.reshape(-1)
    seen = np.zeros(n_vertices, dtype=bool)
    seen[np.asarray(triangles)[tid[tid >= 0]].ravel()] = True
    return seen
