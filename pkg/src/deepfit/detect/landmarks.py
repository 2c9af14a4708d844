"""Landmarks from a full-resolution image through crop, heatmaps and soft-argmax.

The box and the argmax patches are treated as constants when
differentiating.  ``LandmarkDetection`` keeps what the backward and
forward passes need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    HEATMAP_STRIDE,
    BoundingBox,
    CropResizeTransform,
    SoftArgmax,
    crop_resize,
    crop_resize_vjp,
    detect_bbox,
    soft_argmax,
    uncrop_coords,
)

DEFAULT_BETA = 50.0
DEFAULT_VALIDITY = 0.1


@dataclass
class LandmarkSet:
    points: np.ndarray  # (L, 2) full-resolution (x, y)
    confidence: np.ndarray  # (L,) heatmap peak values
    valid: np.ndarray  # (L,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.confidence = np.asarray(self.confidence, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.points).all(axis=1)

    def __len__(self):
        return len(self.points)


@dataclass
class LandmarkDetection:
    landmarks: LandmarkSet
    bbox: BoundingBox
    transform: CropResizeTransform
    crop: np.ndarray
    heatmaps: np.ndarray
    estimates: list  # SoftArgmax per landmark
    backend: object

    @property
    def centers(self):
        return [e.center for e in self.estimates]

    def _coord_scale(self):
        return HEATMAP_STRIDE * self.transform.scale

    def vjp(self, cotangent):
        """Full-resolution image cotangent (H, W, 3) for a landmark cotangent (L, 2)."""
        cot = np.asarray(cotangent, dtype=float) * self._coord_scale()
        heat_cot = np.zeros_like(self.heatmaps)
        for k, est in enumerate(self.estimates):
            if np.any(cot[k]):
                heat_cot[k] = est.vjp(cot[k], self.heatmaps.shape[1:])
        crop_cot = self.backend.vjp(self.crop, heat_cot)
        return crop_resize_vjp(self.transform, crop_cot)

    def jacobian(self, tangent_fn):
        """Landmark tangents (L, 2, P) by forward propagation.

        ``tangent_fn(flat_pixel_indices)`` returns full-resolution image
        tangents (n, 3, P) at those pixels; only pixels that can reach a
        soft-argmax patch are requested when the backend supports it.
        """
        M = self.transform.matrix()
        H, W = self.transform.source_shape

        def crop_tangents(idx):
            sub = M[idx]
            cols = np.unique(sub.indices)
            T = np.asarray(tangent_fn(cols), dtype=float)  # (n_cols, 3, P)
            local = sub[:, cols]
            return np.stack([local @ T[:, c, :] for c in range(3)], axis=1)

        if hasattr(self.backend, "patch_jvp"):
            patches = self.backend.patch_jvp(self.crop, self.centers, crop_tangents)
        else:
            size = self.transform.size
            full = crop_tangents(np.arange(size * size))
            dense = self.backend.jvp(self.crop, full.reshape(size, size, 3, -1))
            patches = np.stack([dense[k, cy - 1:cy + 2, cx - 1:cx + 2] for k, (cx, cy) in enumerate(self.centers)])
        J = np.stack([est.jacobian() for est in self.estimates])  # (L, 2, 3, 3)
        out = np.einsum("ldab,labp->ldp", J, patches)
        return out * self._coord_scale()[None, :, None]


def landmarks(backend, image, bbox: BoundingBox | None = None, beta=DEFAULT_BETA, centers=None,
              validity_threshold=DEFAULT_VALIDITY, background=0.5) -> LandmarkDetection:
    """Detect landmarks; ``bbox`` and ``centers`` pin the non-smooth choices."""
    img = np.asarray(image, dtype=float)
    if bbox is None:
        bbox = detect_bbox(img, background=background)
    crop, tf = crop_resize(img, bbox)
    heat = backend.heatmaps(crop)
    if centers is None and hasattr(backend, "patch_centers"):
        centers = backend.patch_centers(crop, heat)
    ests: list[SoftArgmax] = []
    for k in range(len(heat)):
        ests.append(soft_argmax(heat[k], beta, None if centers is None else centers[k]))
    pts = np.array([uncrop_coords(e.coord, tf) for e in ests])
    conf = np.array([heat[k, cy - 1:cy + 2, cx - 1:cx + 2].max() for k, (cx, cy) in enumerate(e.center for e in ests)])
    lm = LandmarkSet(pts, conf, conf >= validity_threshold)
    return LandmarkDetection(lm, bbox, tf, crop, heat, ests, backend)
