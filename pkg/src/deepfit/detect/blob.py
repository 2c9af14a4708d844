"""Reference landmark backend: colour-keyed blob heatmaps.

Every landmark owns a unique fiducial colour.  A heatmap is the
similarity of each crop pixel's normalised chroma to that colour,
downsampled to the 64-cell grid and blurred.  Chroma discards
brightness, so shading does not move the peaks.

The similarity kernel is deliberately wide and compactly supported,
(1 - d^2/rho^2)^3, so that pixels blending fiducial and skin colours
respond gradually and the heatmaps vary smoothly under sub-pixel motion.
A wide kernel also answers to a few neighbouring colours; those belong
to landmarks far away on the face, and a narrow Gaussian score is used
only to decide which blob the 3x3 patch sits on.
"""
from __future__ import annotations

import numpy as np

from .geometry import CROP_SIZE, HEATMAP_SIZE, HEATMAP_STRIDE

_SQRT3 = np.sqrt(3.0)


def chroma(image, eps=1e-2):
    """Brightness-normalised opponent chroma (r-g, (r+g-2b)/sqrt3) / (r+g+b)."""
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    s = r + g + b + eps
    return np.stack([(r - g) / s, (r + g - 2 * b) / (_SQRT3 * s)], axis=-1)


def chroma_jacobian(image, eps=1e-2):
    """d chroma / d rgb per pixel, shape (..., 2, 3)."""
    c = chroma(image, eps)
    s = image.sum(axis=-1) + eps
    u, v = c[..., 0], c[..., 1]
    du = np.stack([1 - u, -1 - u, -u], axis=-1)
    dv = np.stack([1 / _SQRT3 - v, 1 / _SQRT3 - v, -2 / _SQRT3 - v], axis=-1)
    return np.stack([du, dv], axis=-2) / s[..., None, None]


def _downsample_matrix(n_out=HEATMAP_SIZE, n_in=CROP_SIZE, stride=HEATMAP_STRIDE):
    taps = np.array([1.0, 2.0, 2.0, 2.0, 1.0]) / 8.0
    D = np.zeros((n_out, n_in))
    for m in range(n_out):
        for o, w in zip(range(-2, 3), taps):
            i = stride * m + o
            if 0 <= i < n_in:
                D[m, i] = w
    return D


def _blur_matrix(n, sigma):
    if sigma <= 0:
        return np.eye(n)
    r = int(np.ceil(4 * sigma))
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    B = np.exp(-0.5 * (d / sigma) ** 2)
    B[np.abs(d) > r] = 0.0
    return B / B[n // 2].sum()


class BlobBackend:
    """Heatmaps from fiducial colour similarity.

    Parameters
    ----------
    colors : (L, 3) fiducial RGB colours, one per landmark.
    support : chroma radius of the similarity kernel.
    blur_sigma : spatial blur in heatmap cells.
    gain : overall heatmap scale.  With the default soft-argmax
        temperature this keeps the 3x3 patch estimate close to unbiased.
    peak_sigma : width of the narrow score used to pick patches; by
        default 0.35 of the smallest chroma distance between fiducials.
    """

    name = "blob"

    def __init__(self, colors, support=0.15, blur_sigma=2.0, gain=5.0, peak_sigma=None, eps=1e-2):
        self.colors = np.asarray(colors, dtype=float)
        self.eps = eps
        self.targets = chroma(self.colors, eps)
        if peak_sigma is None:
            d = np.linalg.norm(self.targets[:, None] - self.targets[None], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            peak_sigma = 0.35 * d.min()
        self.peak_sigma = float(peak_sigma)
        self.support = float(support)
        self.blur_sigma = float(blur_sigma)
        self.gain = float(gain)
        self.K = _blur_matrix(HEATMAP_SIZE, blur_sigma) @ _downsample_matrix()
        self.support_rows = [np.flatnonzero(self.K[m]) for m in range(HEATMAP_SIZE)]

    @property
    def n_landmarks(self):
        return len(self.colors)

    def _sqdist(self, c):
        """Squared chroma distance of every pixel to every target, (L, H, W)."""
        flat = c.reshape(-1, 2)
        d2 = (flat ** 2).sum(1)[None] - 2.0 * self.targets @ flat.T + (self.targets ** 2).sum(1)[:, None]
        return np.maximum(d2, 0.0).reshape((len(self.targets),) + c.shape[:-1])

    def _kernel(self, image):
        """Chroma (H, W, 2) and kernel base q = (1 - d^2/rho^2)_+ per target."""
        c = chroma(image, self.eps)
        q = np.clip(1.0 - self._sqdist(c) / self.support ** 2, 0.0, None)
        return c, q

    def _dscore(self, c, q, k):
        """d S_k / d chroma on the pixels of ``c``, shape (..., 2)."""
        return (-6.0 / self.support ** 2) * (q ** 2)[..., None] * (c - self.targets[k])

    def _sparse_scores(self, image, width=None):
        """Per-target (pixel index, kernel value) lists over the kernel support.

        With ``width`` set, the values are narrow Gaussian scores on the
        same support instead of the smooth kernel.
        """
        _, lists = self._support(image, width)
        return lists

    def _support(self, image, width=None, base=False):
        c = chroma(image, self.eps).reshape(-1, 2)
        # pixels whose chroma magnitude rules out every target are skipped
        radius = np.linalg.norm(self.targets, axis=1)
        mag = np.linalg.norm(c, axis=1)
        cand = np.flatnonzero((mag > radius.min() - self.support) & (mag < radius.max() + self.support))
        d2 = self._sqdist(c[cand])
        k_idx, j = np.nonzero(d2 < self.support ** 2)
        d2 = d2[k_idx, j]
        pix = cand[j]
        if base:
            vals = 1.0 - d2 / self.support ** 2
        elif width is None:
            vals = (1.0 - d2 / self.support ** 2) ** 3
        else:
            vals = np.exp(-0.5 * d2 / width ** 2)
        bounds = np.searchsorted(k_idx, np.arange(self.n_landmarks + 1))
        return c, [(pix[a:b], vals[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def _blur_down(self, sparse):
        out = np.zeros((self.n_landmarks, HEATMAP_SIZE, HEATMAP_SIZE))
        for k, (pix, vals) in enumerate(sparse):
            if len(pix):
                r, c = pix // CROP_SIZE, pix % CROP_SIZE
                out[k] = (self.K[:, r] * vals) @ self.K[:, c].T
        return out

    def patch_centers(self, image256, heatmaps, search=3):
        """Patch centre per landmark: the heatmap maximum near the narrow-score peak."""
        coarse_all = self._blur_down(self._sparse_scores(np.asarray(image256, dtype=float), self.peak_sigma))
        out = []
        n = heatmaps.shape[-1]
        for k in range(self.n_landmarks):
            coarse = coarse_all[k]
            r, q = np.unravel_index(np.argmax(coarse), coarse.shape)
            r0, r1 = max(r - search, 0), min(r + search + 1, n)
            q0, q1 = max(q - search, 0), min(q + search + 1, n)
            win = heatmaps[k, r0:r1, q0:q1]
            rr, qq = np.unravel_index(np.argmax(win), win.shape)
            out.append((int(np.clip(q0 + qq, 1, n - 2)), int(np.clip(r0 + rr, 1, n - 2))))
        return out

    def heatmaps(self, image256):
        return self.gain * self._blur_down(self._sparse_scores(np.asarray(image256, dtype=float)))

    def vjp(self, image256, cotangent):
        """Image cotangent (256, 256, 3) for a heatmap cotangent (L, 64, 64)."""
        img = np.asarray(image256, dtype=float)
        cot = np.asarray(cotangent, dtype=float)
        c, q = self._kernel(img)
        c_bar = np.zeros(img.shape[:2] + (2,))
        for k in np.flatnonzero(np.abs(cot).reshape(len(cot), -1).max(axis=1) > 0):
            S_bar = self.gain * (self.K.T @ cot[k] @ self.K)
            c_bar += S_bar[..., None] * self._dscore(c, q[k], k)
        Jc = chroma_jacobian(img, self.eps)
        return np.einsum("hwc,hwcr->hwr", c_bar, Jc)

    def jvp(self, image256, tangents):
        """Heatmap tangents (L, 64, 64, P) for image tangents (256, 256, 3, P)."""
        img = np.asarray(image256, dtype=float)
        T = np.asarray(tangents, dtype=float)
        squeeze = T.ndim == 3
        if squeeze:
            T = T[..., None]
        c, q = self._kernel(img)
        c_dot = np.einsum("hwcr,hwrp->hwcp", chroma_jacobian(img, self.eps), T)
        out = np.empty((self.n_landmarks, HEATMAP_SIZE, HEATMAP_SIZE, T.shape[-1]))
        for k in range(self.n_landmarks):
            S_dot = np.einsum("hwc,hwcp->phw", self._dscore(c, q[k], k), c_dot)
            out[k] = self.gain * np.moveaxis(self.K @ S_dot @ self.K.T, 0, -1)
        return out[..., 0] if squeeze else out

    def patch_jvp(self, image256, centers, tangent_fn):
        """Tangents of the 3x3 patch around each centre, (L, 3, 3, P).

        ``tangent_fn(flat_pixel_indices)`` must return crop-image tangents
        (n, 3, P) at the requested pixels.  Only pixels inside the kernel
        support that reach a patch through the blur are visited, which
        is exact because the kernel and its gradient vanish elsewhere.
        """
        img = np.asarray(image256, dtype=float)
        chrom, lists = self._support(img, base=True)
        N = CROP_SIZE
        supports = []
        for k, (cx, cy) in enumerate(centers):
            pix, q = lists[k]
            r, col = pix // N, pix % N
            lo_r, hi_r = self.support_rows[cy - 1][0], self.support_rows[cy + 1][-1]
            lo_c, hi_c = self.support_rows[cx - 1][0], self.support_rows[cx + 1][-1]
            keep = (r >= lo_r) & (r <= hi_r) & (col >= lo_c) & (col <= hi_c)
            supports.append((pix[keep], q[keep]))
        flat = np.unique(np.concatenate([pix for pix, _ in supports] + [np.zeros(0, np.int64)]))
        tang = np.asarray(tangent_fn(flat), dtype=float)  # (n, 3, P)
        P = tang.shape[-1]
        Jc = chroma_jacobian(img.reshape(-1, 3)[flat], self.eps)
        c_dot = np.einsum("ncr,nrp->ncp", Jc, tang)
        out = np.zeros((len(centers), 3, 3, P))
        for k, (cx, cy) in enumerate(centers):
            pix, q = supports[k]
            if len(pix) == 0:
                continue
            pos = np.searchsorted(flat, pix)
            s_dot = np.einsum("nc,ncp->np", self._dscore(chrom[pix], q, k), c_dot[pos])
            Kp = self.K[cy - 1:cy + 2][:, pix // N]  # (3, n)
            Kq = self.K[cx - 1:cx + 2][:, pix % N]
            out[k] = self.gain * np.einsum("an,bn,np->abp", Kp, Kq, s_dot)
        return out
