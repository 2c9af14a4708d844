import numpy as np
from scipy import ndimage

from deepfit.detect import VariationalFlowBackend


def texture(rng, size=64, sigma=3.0):
    return ndimage.gaussian_filter(rng.uniform(size=(size + 16, size + 16)), sigma, mode="wrap")


def test_identical_images_give_zero_flow():
    rng = np.random.default_rng(0)
    img = texture(rng)[:64, :64]
    f = VariationalFlowBackend(resolution=64).flow(img, img)
    assert np.abs(f.data).max() < 1e-12


def test_three_pixel_shift():
    rng = np.random.default_rng(1)
    tex = texture(rng, 96, 4.0)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    A = tex[:96, 8:104]
    B = tex[:96, 5:101]  # B(x + 3) = A(x)
    f = VariationalFlowBackend(resolution=96).flow(A, B)
    m = f.data[0, 16:-16, 16:-16].mean()
    assert abs(m - 3.0) < 0.5, m
    assert abs(f.data[1, 16:-16, 16:-16].mean()) < 0.5


def test_flow_vjp_matches_finite_differences():
    rng = np.random.default_rng(2)
    be = VariationalFlowBackend(iterations=20, resolution=32)
    A = texture(rng, 32)[:32, :32]
    B = np.roll(A, 1, axis=1) + 0.01 * rng.standard_normal((32, 32))
    cot = rng.standard_normal((2, 32, 32))
    for wrt in ("A", "B"):
        g = be.vjp(A, B, cot, wrt=wrt)
        h = 1e-5
        for _ in range(3):
            d = rng.standard_normal((32, 32))
            if wrt == "A":
                fp, fm = be.flow(A + h * d, B).data, be.flow(A - h * d, B).data
            else:
                fp, fm = be.flow(A, B + h * d).data, be.flow(A, B - h * d).data
            fd = ((fp - fm) / (2 * h) * cot).sum()
            assert abs(fd - (g * d).sum()) / abs(fd) < 1e-2


def test_flow_jvp_agrees_with_vjp():
    rng = np.random.default_rng(3)
    be = VariationalFlowBackend(resolution=32)
    A = texture(rng, 32)[:32, :32]
    B = np.roll(A, 2, axis=0)
    T = rng.standard_normal((32, 32, 2))
    _, tang = be.jvp(A, B, None, T)
    cot = rng.standard_normal((2, 32, 32))
    g = be.vjp(A, B, cot, wrt="B")
    for p in range(2):
        assert np.isclose((tang[..., p] * cot).sum(), (g * T[..., p]).sum(), rtol=1e-9)


def test_rgb_inputs_resized_to_working_resolution():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(40, 50, 3))
    f = VariationalFlowBackend(resolution=24).flow(img, img)
    assert f.resolution == (24, 24)
