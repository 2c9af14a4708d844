"""Reference dense-flow backend: coarse-to-fine Horn-Schunck with warping.

Written in torch so that reverse- and forward-mode derivatives come from
autograd.  Both images are converted to luma and bilinearly resized to a
square working resolution before the flow is computed; flow vectors are
in pixels of that resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import jvp as _fjvp
from torch.func import vmap

_LUMA = (0.299, 0.587, 0.114)


@dataclass
class FlowField:
    data: np.ndarray  # (2, R, R): horizontal, vertical displacement

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError("flow field must be (2, H, W)")
        if not np.isfinite(self.data).all():
            raise ValueError("flow field has non-finite values")

    @property
    def resolution(self):
        return self.data.shape[1:]


def _avg(u):
    k = torch.tensor([[1.0, 2.0, 1.0], [2.0, 0.0, 2.0], [1.0, 2.0, 1.0]], dtype=u.dtype) / 12.0
    return F.conv2d(F.pad(u[None, None], (1, 1, 1, 1), mode="replicate"), k[None, None])[0, 0]


def _grad(img):
    p = F.pad(img[None, None], (1, 1, 1, 1), mode="replicate")[0, 0]
    return 0.5 * (p[1:-1, 2:] - p[1:-1, :-2]), 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])


def _warp(img, u, v):
    """Bilinear lookup of img at (x + u, y + v), border-clamped."""
    H, W = img.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=img.dtype), torch.arange(W, dtype=img.dtype), indexing="ij")
    x = (xs + u).clamp(0, W - 1)
    y = (ys + v).clamp(0, H - 1)
    x0 = x.detach().floor().clamp(max=W - 2)
    y0 = y.detach().floor().clamp(max=H - 2)
    fx, fy = x - x0, y - y0
    i0 = (y0 * W + x0).long()
    flat = img.reshape(-1)
    a, b, c, d = flat[i0], flat[i0 + 1], flat[i0 + W], flat[i0 + W + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def horn_schunck(A, B, levels=3, iterations=20, smoothness=0.1):
    """Flow from A to B (B(x + f(x)) ~ A(x)) as a (2, H, W) tensor."""
    alpha2 = smoothness ** 2
    pa, pb = [A], [B]
    for _ in range(levels - 1):
        pa.append(F.avg_pool2d(pa[-1][None, None], 2)[0, 0])
        pb.append(F.avg_pool2d(pb[-1][None, None], 2)[0, 0])
    u = torch.zeros_like(pa[-1])
    v = torch.zeros_like(pa[-1])
    for lvl in reversed(range(levels)):
        a, b = pa[lvl], pb[lvl]
        if u.shape != a.shape:
            sy, sx = a.shape[0] / u.shape[0], a.shape[1] / u.shape[1]
            u = sx * F.interpolate(u[None, None], size=a.shape, mode="bilinear", align_corners=False)[0, 0]
            v = sy * F.interpolate(v[None, None], size=a.shape, mode="bilinear", align_corners=False)[0, 0]
        bw = _warp(b, u, v)
        ix, iy = _grad(0.5 * (a + bw))
        it = bw - a
        den = alpha2 + ix * ix + iy * iy
        U, V = u, v
        for _ in range(iterations):
            ub, vb = _avg(U), _avg(V)
            rho = ix * (ub - u) + iy * (vb - v) + it
            U = ub - ix * rho / den
            V = vb - iy * rho / den
        u, v = U, V
    return torch.stack([u, v])


class VariationalFlowBackend:
    """Multi-scale Horn-Schunck flow with autograd derivatives.

    ``resolution`` is the square working size both images are resized to.
    ``dtype`` trades precision for speed; float32 is about three times
    faster on CPU and adequate for solver Jacobians.
    """

    name = "variational"

    def __init__(self, levels=3, iterations=20, smoothness=0.1, resolution=512, dtype="float64"):
        self.levels = int(levels)
        self.iterations = int(iterations)
        self.smoothness = float(smoothness)
        self.resolution = int(resolution)
        self.dtype = getattr(torch, dtype) if isinstance(dtype, str) else dtype

    def _prep(self, image):
        """(H, W, 3) or (H, W) image -> (R, R) luma tensor."""
        t = torch.as_tensor(np.asarray(image), dtype=self.dtype)
        return self._prep_t(t)

    def _prep_t(self, t):
        if t.ndim == 3:
            t = t @ torch.tensor(_LUMA, dtype=t.dtype)
        R = self.resolution
        if tuple(t.shape) == (R, R):
            return t
        return F.interpolate(t[None, None], size=(R, R), mode="bilinear", align_corners=False)[0, 0]

    def _flow_t(self, a, b):
        return horn_schunck(self._prep_t(a), self._prep_t(b), self.levels, self.iterations, self.smoothness)

    def flow(self, imageA, imageB) -> FlowField:
        if np.shape(imageA) != np.shape(imageB):
            raise ValueError("flow inputs must have the same size")
        with torch.no_grad():
            a = torch.as_tensor(np.asarray(imageA), dtype=self.dtype)
            b = torch.as_tensor(np.asarray(imageB), dtype=self.dtype)
            out = self._flow_t(a, b)
        return FlowField(out.double().numpy())

    def vjp(self, imageA, imageB, cotangent, wrt="B"):
        """Cotangent on imageA or imageB for a flow cotangent (2, R, R)."""
        a = torch.as_tensor(np.asarray(imageA), dtype=self.dtype)
        b = torch.as_tensor(np.asarray(imageB), dtype=self.dtype)
        x = a if wrt == "A" else b
        x.requires_grad_(True)
        out = self._flow_t(a, b)
        (g,) = torch.autograd.grad(out, x, torch.as_tensor(np.asarray(cotangent), dtype=self.dtype))
        return g.double().numpy()

    def jvp(self, imageA, imageB, tangentsA=None, tangentsB=None):
        """Flow tangents (2, R, R, P) for stacked image tangents (..., P).

        Returns ``(flow, tangents)``.  Either tangent stack may be None.
        """
        a = torch.as_tensor(np.asarray(imageA), dtype=self.dtype)
        b = torch.as_tensor(np.asarray(imageB), dtype=self.dtype)
        ref = tangentsA if tangentsA is not None else tangentsB
        P = np.shape(ref)[-1]

        def stack(t, like):
            if t is None:
                return torch.zeros((P,) + tuple(like.shape), dtype=self.dtype)
            return torch.as_tensor(np.moveaxis(np.asarray(t), -1, 0), dtype=self.dtype)

        ta, tb = stack(tangentsA, a), stack(tangentsB, b)
        with torch.no_grad():
            value = self._flow_t(a, b)
        if P == 0:
            return FlowField(value.double().numpy()), np.zeros((2,) + tuple(value.shape[1:]) + (0,))
        fn = lambda dta, dtb: _fjvp(self._flow_t, (a, b), (dta, dtb))[1]
        tang = vmap(fn)(ta, tb)
        return FlowField(value.double().numpy()), np.moveaxis(tang.double().numpy(), 0, -1)


def flow(backend, imageA, imageB) -> FlowField:
    return backend.flow(imageA, imageB)
