import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfit.detect import (
    BlobBackend,
    BoundingBox,
    CropResizeTransform,
    DetectionFailed,
    crop_resize,
    crop_resize_vjp,
    detect_bbox,
    landmarks,
    soft_argmax,
    uncrop_coords,
)
from deepfit.procedural import fiducial_colors
from deepfit.render import project
from deepfit.rig import PoseParams, posed_vertices

from conftest import render


def square_image(x0=50, y0=60, side=40, shape=(192, 256)):
    img = np.full(shape + (3,), 0.5)
    img[y0:y0 + side, x0:x0 + side] = [0.8, 0.3, 0.2]
    return img


def test_all_background_fails():
    with pytest.raises(DetectionFailed):
        detect_bbox(np.full((64, 64, 3), 0.5))


def test_bbox_is_extent_plus_margin():
    box = detect_bbox(square_image())
    assert box.as_list() == pytest.approx([46.0, 56.0, 94.0, 104.0], abs=1e-12)


def test_bbox_translates_with_foreground():
    a = detect_bbox(square_image(50, 60))
    b = detect_bbox(square_image(57, 49))
    assert np.allclose(np.subtract(b.as_list(), a.as_list()), [7, -11, 7, -11], atol=1e-12)


def test_bbox_ignores_isolated_noise_pixels():
    img = square_image()
    rng = np.random.default_rng(0)
    img = img + 0.02 * rng.standard_normal(img.shape)
    box = detect_bbox(img)
    assert box.as_list() == pytest.approx([46.0, 56.0, 94.0, 104.0], abs=1e-12)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BoundingBox(10, 10, 10, 20)


def test_full_image_crop_is_identity():
    img = np.random.default_rng(1).uniform(size=(256, 256, 3))
    out, _ = crop_resize(img, BoundingBox(0, 0, 256, 256))
    assert np.array_equal(out, img)


def test_constant_crop_is_constant():
    img = np.full((100, 120, 3), 0.3)
    out, _ = crop_resize(img, BoundingBox(10.3, 5.7, 80.1, 90.9), size=64)
    assert np.allclose(out, 0.3, atol=1e-15)


def test_crop_vjp_matches_finite_differences():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(32, 32, 3))
    box = BoundingBox(3.2, 4.7, 27.9, 30.1)
    cot = rng.standard_normal((16, 16, 3))
    _, tf = crop_resize(img, box, size=16)
    g = crop_resize_vjp(tf, cot)
    h = 1e-6
    for _ in range(10):
        d = rng.standard_normal(img.shape)
        fd = ((crop_resize(img + h * d, box, 16)[0] - crop_resize(img - h * d, box, 16)[0]) / (2 * h) * cot).sum()
        assert abs(fd - (g * d).sum()) / abs(fd) < 1e-4


def test_one_hot_soft_argmax():
    h = np.zeros((64, 64))
    h[32, 32] = 1.0
    assert np.allclose(soft_argmax(h, beta=50).coord, [32, 32], atol=0.05)


def test_symmetric_patch_gives_centre():
    h = np.zeros((64, 64))
    h[19:22, 9:12] = [[0.2, 0.5, 0.2], [0.5, 0.9, 0.5], [0.2, 0.5, 0.2]]
    assert np.array_equal(soft_argmax(h).coord, [10.0, 20.0])


def test_large_beta_tends_to_argmax():
    rng = np.random.default_rng(3)
    h = rng.uniform(size=(64, 64))
    r, c = np.unravel_index(np.argmax(h), h.shape)
    res = soft_argmax(h, beta=1e4)
    if 1 <= r <= 62 and 1 <= c <= 62:
        assert np.allclose(res.coord, [c, r], atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 200.0))
def test_soft_argmax_is_convex_combination(seed, beta):
    h = np.random.default_rng(seed).uniform(size=(64, 64))
    res = soft_argmax(h, beta=beta)
    assert np.all(res.weights > 0) and abs(res.weights.sum() - 1.0) < 1e-12
    cx, cy = res.center
    assert cx - 1 <= res.coord[0] <= cx + 1 and cy - 1 <= res.coord[1] <= cy + 1


def test_soft_argmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = rng.uniform(size=(64, 64))
    res = soft_argmax(h, beta=50)
    J = res.jacobian()
    eps = 1e-5
    cx, cy = res.center
    for i in range(3):
        for j in range(3):
            d = np.zeros_like(h)
            d[cy - 1 + i, cx - 1 + j] = eps
            fd = (soft_argmax(h + d, 50, res.center).coord - soft_argmax(h - d, 50, res.center).coord) / (2 * eps)
            assert np.allclose(fd, J[:, i, j], rtol=1e-6, atol=1e-9)


def test_uncrop_identity_box_scales_by_four():
    tf = CropResizeTransform(BoundingBox(0, 0, 256, 256), (256, 256))
    assert np.allclose(uncrop_coords([10.25, 33.5], tf), [41.0, 134.0], atol=1e-12)


def test_uncrop_large_box():
    tf = CropResizeTransform(BoundingBox(0, 0, 512, 512), (512, 512))
    assert np.allclose(uncrop_coords([16, 16], tf), [128, 128], atol=1e-12)


def test_crop_coordinate_round_trip():
    tf = CropResizeTransform(BoundingBox(13.7, 22.1, 140.2, 151.9), (192, 256))
    p = np.array([77.3, 101.9])
    assert np.allclose(tf.from_crop(tf.to_crop(p)), p, atol=1e-9)


def test_heatmap_stack_shape(rig, appearance, camera):
    img = render(rig, camera, appearance, PoseParams.neutral(rig))
    det = landmarks(BlobBackend(fiducial_colors()), img)
    assert det.heatmaps.shape == (68, 64, 64) and np.isfinite(det.heatmaps).all()


def test_blob_landmarks_match_projected_vertices(rig, appearance, front_camera):
    p = PoseParams(np.deg2rad([3, -4, 2]), [0.5, -0.3, 1.0], np.zeros(rig.n_shapes))
    img = render(rig, front_camera, appearance, p)
    det = landmarks(BlobBackend(fiducial_colors()), img)
    truth = project(front_camera, posed_vertices(rig, p)[rig.landmark_vertices])[0]
    lm = det.landmarks
    assert lm.valid.all()
    assert np.linalg.norm(lm.points - truth, axis=1).max() < 1.0


def blob_toy(rng, size=64, n=6):
    img = np.full((size, size, 3), 0.5)
    ys, xs = np.mgrid[0:size, 0:size]
    cols = fiducial_colors()
    for k in range(n):
        cx, cy = rng.uniform(12, size - 12, 2)
        a = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * 2.5 ** 2))[..., None]
        img = (1 - a) * img + a * cols[k]
    return img


def test_landmark_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    img = blob_toy(rng)
    be = BlobBackend(fiducial_colors())
    det = landmarks(be, img, bbox=BoundingBox(0, 0, 64, 64))
    live = np.flatnonzero(det.landmarks.valid)
    assert len(live) >= 4
    cot = np.zeros((68, 2))
    cot[live] = rng.standard_normal((len(live), 2))
    g = det.vjp(cot)
    h = 1e-6
    for _ in range(5):
        d = rng.standard_normal(img.shape)
        f = lambda x: landmarks(be, x, bbox=det.bbox, centers=det.centers).landmarks.points  # noqa: E731
        fd = ((f(img + h * d) - f(img - h * d)) / (2 * h) * cot).sum()
        assert abs(fd - (g * d).sum()) / abs(fd) < 1e-3


def test_forward_jacobian_agrees_with_vjp():
    rng = np.random.default_rng(6)
    img = blob_toy(rng)
    det = landmarks(BlobBackend(fiducial_colors()), img, bbox=BoundingBox(0, 0, 64, 64))
    T = rng.standard_normal((64 * 64, 3, 2))
    J = det.jacobian(lambda idx: T[idx])  # (68, 2, 2)
    cot = rng.standard_normal((68, 2))
    g = det.vjp(cot).reshape(-1, 3)
    for p in range(2):
        assert np.isclose((J[:, :, p] * cot).sum(), (g * T[:, :, p]).sum(), rtol=1e-8)


def test_whole_pixel_shift_is_equivariant():
    rng = np.random.default_rng(7)
    img = np.full((96, 96, 3), 0.5)
    img[10:74, 12:76] = blob_toy(rng)
    be = BlobBackend(fiducial_colors())
    box = BoundingBox(12, 10, 76, 74)
    a = landmarks(be, img, bbox=box)
    shifted = np.roll(np.roll(img, 5, axis=0), 7, axis=1)
    b = landmarks(be, shifted, bbox=box.shifted(7, 5))
    ok = a.landmarks.valid
    assert np.allclose(b.landmarks.points[ok] - a.landmarks.points[ok], [7, 5], atol=1e-9)
