"""Bounding boxes, crop/resize resampling, patch soft-argmax and un-mapping.

Coordinates are (x, y) = (column, row) with pixel centres on integers.
A box is the half-open continuous range [x0, x1) x [y0, y1); the crop
grid of size ``target`` samples the source at ``x0 + sx * j`` so a box
of exactly the target size reproduces the source pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

CROP_SIZE = 256
HEATMAP_SIZE = 64
HEATMAP_STRIDE = CROP_SIZE // HEATMAP_SIZE


class DetectionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def shifted(self, dx, dy):
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


def foreground_mask(image, background=0.5, threshold=0.05, despeckle=True):
    """Pixels differing from the background colour.

    A 3x3 median filter first removes isolated sensor-noise outliers.
    """
    img = np.asarray(image, dtype=float)
    if despeckle and img.shape[0] >= 3 and img.shape[1] >= 3:
        img = ndimage.median_filter(img, size=(3, 3, 1) if img.ndim == 3 else (3, 3), mode="nearest")
    diff = np.abs(img - background)
    return diff.max(axis=-1) > threshold if diff.ndim == 3 else diff > threshold


def detect_bbox(image, background=0.5, threshold=0.05, margin=0.1, square=True) -> BoundingBox:
    """Padded box around pixels that differ from the background colour.

    ``margin`` is added on every side as a fraction of the tight extent.
    The padded box is grown to a square about its centre, then clamped to
    the image.
    """
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise DetectionFailed("empty image")
    H, W = img.shape[:2]
    fg = foreground_mask(img, background, threshold)
    if not fg.any():
        raise DetectionFailed("no foreground pixels")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    x0, x1 = float(cols[0]), float(cols[-1] + 1)
    y0, y1 = float(rows[0]), float(rows[-1] + 1)
    w, h = x1 - x0, y1 - y0
    x0, x1 = x0 - margin * w, x1 + margin * w
    y0, y1 = y0 - margin * h, y1 + margin * h
    if square:
        side = max(x1 - x0, y1 - y0)
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        x0, x1 = cx - 0.5 * side, cx + 0.5 * side
        y0, y1 = cy - 0.5 * side, cy + 0.5 * side
    return BoundingBox(max(x0, 0.0), max(y0, 0.0), min(x1, float(W)), min(y1, float(H)))


@dataclass(frozen=True)
class CropResizeTransform:
    bbox: BoundingBox
    source_shape: tuple  # (H, W)
    size: int = CROP_SIZE

    @property
    def scale(self):
        return np.array([self.bbox.width / self.size, self.bbox.height / self.size])

    @property
    def origin(self):
        return np.array([self.bbox.x0, self.bbox.y0])

    def to_crop(self, xy):
        return (np.asarray(xy, dtype=float) - self.origin) / self.scale

    def from_crop(self, uv):
        return self.origin + self.scale * np.asarray(uv, dtype=float)

    def matrix(self) -> sp.csr_matrix:
        """Sparse (size*size, H*W) bilinear resampling matrix."""
        return _resample_matrix(self.bbox.as_list(), tuple(self.source_shape), self.size)


_MATRIX_CACHE: dict = {}


def _axis_weights(start, step, n, limit):
    pos = np.clip(start + step * np.arange(n), 0.0, limit - 1)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, limit - 1)
    return i0, i1, frac


def _resample_matrix(box, shape, size):
    key = (tuple(box), shape, size)
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    H, W = shape
    x0, y0, x1, y1 = box
    xi0, xi1, fx = _axis_weights(x0, (x1 - x0) / size, size, W)
    yi0, yi1, fy = _axis_weights(y0, (y1 - y0) / size, size, H)
    out = np.arange(size * size).reshape(size, size)
    rows, cols, vals = [], [], []
    for yi, wy in ((yi0, 1.0 - fy), (yi1, fy)):
        for xi, wx in ((xi0, 1.0 - fx), (xi1, fx)):
            w = wy[:, None] * wx[None, :]
            rows.append(out.ravel())
            cols.append((yi[:, None] * W + xi[None, :]).ravel())
            vals.append(w.ravel())
    rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    keep = vals != 0.0
    M = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(size * size, H * W))
    if len(_MATRIX_CACHE) > 64:
        _MATRIX_CACHE.clear()
    _MATRIX_CACHE[key] = M
    return M


def crop_resize(image, bbox: BoundingBox, size=CROP_SIZE):
    """Bilinear crop of ``bbox`` resampled to ``size`` x ``size``."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape[:2]
    tf = CropResizeTransform(bbox, (H, W), size)
    M = tf.matrix()
    flat = img.reshape(H * W, -1)
    out = (M @ flat).reshape(size, size, *img.shape[2:])
    return out, tf


def crop_resize_vjp(transform: CropResizeTransform, cotangent):
    """Pull a crop-space cotangent back to the source image."""
    H, W = transform.source_shape
    c = np.asarray(cotangent, dtype=float)
    M = transform.matrix()
    return (M.T @ c.reshape(transform.size ** 2, -1)).reshape(H, W, *c.shape[2:])


def patch_center(heatmap):
    """Argmax cell (x, y), clamped so the 3x3 patch stays inside the grid."""
    h = np.asarray(heatmap)
    r, c = np.unravel_index(np.argmax(h), h.shape)
    n_r, n_c = h.shape
    return int(np.clip(c, 1, n_c - 2)), int(np.clip(r, 1, n_r - 2))


def _patch_grid(center):
    cx, cy = center
    gy, gx = np.mgrid[cy - 1:cy + 2, cx - 1:cx + 2]
    return np.stack([gx, gy], axis=-1).astype(float)


def _patch(heatmap, center):
    cx, cy = center
    vals = np.asarray(heatmap, dtype=float)[cy - 1:cy + 2, cx - 1:cx + 2]
    return vals, _patch_grid(center)


@dataclass(frozen=True)
class SoftArgmax:
    coord: np.ndarray  # (2,) x, y on the heatmap grid
    weights: np.ndarray  # (3, 3) patch softmax weights
    center: tuple  # (cx, cy)
    beta: float

    def jacobian(self):
        """d coord / d patch values, shape (2, 3, 3)."""
        m = _patch_grid(self.center)
        return self.beta * self.weights[None] * np.moveaxis(m - self.coord, -1, 0)

    def vjp(self, cotangent, shape=(HEATMAP_SIZE, HEATMAP_SIZE)):
        """Full-heatmap cotangent for a coordinate cotangent (2,)."""
        g = np.zeros(shape)
        cx, cy = self.center
        g[cy - 1:cy + 2, cx - 1:cx + 2] = np.tensordot(np.asarray(cotangent, float), self.jacobian(), axes=1)
        return g


def soft_argmax(heatmap, beta=50.0, center=None) -> SoftArgmax:
    """Softmax-weighted mean cell coordinate over a 3x3 patch.

    The patch sits at the heatmap argmax unless ``center`` pins it.
    """
    h = np.asarray(heatmap, dtype=float)
    center = patch_center(h) if center is None else (int(center[0]), int(center[1]))
    vals, m = _patch(h, center)
    e = np.exp(beta * (vals - vals.max()))
    w = e / e.sum()
    # centre plus signed offset; opposite weights cancel exactly on symmetric patches
    off = np.array([w[:, 2].sum() - w[:, 0].sum(), w[2].sum() - w[0].sum()])
    coord = np.array(center, dtype=float) + off
    return SoftArgmax(coord, w, center, float(beta))


def uncrop_coords(coord64, transform: CropResizeTransform):
    """Heatmap-grid coordinate to full-resolution pixel coordinate."""
    return transform.from_crop(HEATMAP_STRIDE * np.asarray(coord64, dtype=float))


def uncrop_jacobian(transform: CropResizeTransform):
    return np.diag(HEATMAP_STRIDE * transform.scale)
